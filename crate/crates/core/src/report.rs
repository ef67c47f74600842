//! Report artifacts: the per-generation stats CSV, species CSV, sample
//! images (PGM/PPM), SVG curves and the multi-seed aggregate.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::evolution::{GenerationReport, RoleReport};
use crate::fitness::FITNESS_SENTINEL;
use crate::nn::Matrix;
use crate::Error;

const ROLE_COLUMNS: [&str; 6] = ["best_fitness", "mean_fitness", "mean_layers", "reused_genes", "species_sizes", "threshold"];

pub fn csv_header() -> String {
    let mut cols = vec!["generation".to_string()];
    for prefix in ["g", "d"] {
        cols.extend(ROLE_COLUMNS.iter().map(|c| format!("{prefix}_{c}")));
    }
    cols.join(",")
}

fn role_cells(r: &RoleReport) -> [String; 6] {
    let sizes: Vec<String> = r.species_sizes.iter().map(usize::to_string).collect();
    [
        r.best_fitness.to_string(),
        r.mean_fitness.to_string(),
        r.mean_layers.to_string(),
        r.reused_genes.to_string(),
        sizes.join(";"),
        r.threshold.to_string(),
    ]
}

/// One CSV line (without newline). Wall-clock time is deliberately left
/// out so the file is reproducible.
pub fn csv_row(r: &GenerationReport) -> String {
    let mut cells = vec![r.generation.to_string()];
    cells.extend(role_cells(&r.generator));
    cells.extend(role_cells(&r.discriminator));
    cells.join(",")
}

/// Per-role columns parsed back from the stats CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleRow {
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub mean_layers: f64,
    pub reused_genes: usize,
    pub species_sizes: Vec<usize>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub generation: u64,
    pub generator: RoleRow,
    pub discriminator: RoleRow,
}

impl From<&GenerationReport> for CsvRow {
    fn from(r: &GenerationReport) -> Self {
        let role = |x: &RoleReport| RoleRow {
            best_fitness: x.best_fitness,
            mean_fitness: x.mean_fitness,
            mean_layers: x.mean_layers,
            reused_genes: x.reused_genes,
            species_sizes: x.species_sizes.clone(),
            threshold: x.threshold,
        };
        Self { generation: r.generation, generator: role(&r.generator), discriminator: role(&r.discriminator) }
    }
}

fn parse_role(cells: &[&str], line: usize) -> Result<RoleRow, Error> {
    let bad = |what: &str| Error::Format(format!("report line {line}: bad {what}"));
    let f = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
    let sizes = if cells[4].is_empty() {
        Vec::new()
    } else {
        cells[4].split(';').map(|s| s.parse::<usize>().map_err(|_| bad("species_sizes"))).collect::<Result<_, _>>()?
    };
    Ok(RoleRow {
        best_fitness: f(cells[0], "best_fitness")?,
        mean_fitness: f(cells[1], "mean_fitness")?,
        mean_layers: f(cells[2], "mean_layers")?,
        reused_genes: cells[3].parse().map_err(|_| bad("reused_genes"))?,
        species_sizes: sizes,
        threshold: f(cells[5], "threshold")?,
    })
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>, Error> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == csv_header() => {}
        _ => return Err(Error::Format("report CSV header does not match".into())),
    }
    let width = 1 + 2 * ROLE_COLUMNS.len();
    lines
        .enumerate()
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split(',').collect();
            if cells.len() != width {
                return Err(Error::Format(format!("report line {}: {} columns, expected {width}", i + 2, cells.len())));
            }
            Ok(CsvRow {
                generation: cells[0].parse().map_err(|_| Error::Format(format!("report line {}: bad generation", i + 2)))?,
                generator: parse_role(&cells[1..7], i + 2)?,
                discriminator: parse_role(&cells[7..13], i + 2)?,
            })
        })
        .collect()
}

pub const SPECIES_HEADER: &str = "generation,role,species_id,size,average_fitness,threshold";

pub fn species_rows(r: &GenerationReport) -> Vec<String> {
    [("generator", &r.generator), ("discriminator", &r.discriminator)]
        .into_iter()
        .flat_map(|(name, role)| {
            role.species
                .iter()
                .map(move |s| format!("{},{name},{},{},{},{}", r.generation, s.species_id, s.size, s.average_fitness, s.threshold))
        })
        .collect()
}

fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tiles the first `rows * cols` samples (CHW rows in [-1, 1]) into a
/// binary PGM (one channel) or PPM (three channels).
pub fn sample_grid(samples: &Matrix, channels: usize, height: usize, width: usize, rows: usize, cols: usize) -> Result<Vec<u8>, Error> {
    if channels != 1 && channels != 3 {
        return Err(Error::Shape(format!("sample grid supports 1 or 3 channels, got {channels}")));
    }
    if samples.cols != channels * height * width {
        return Err(Error::Shape(format!("samples have {} features, expected {}", samples.cols, channels * height * width)));
    }
    if samples.rows < rows * cols {
        return Err(Error::Shape(format!("{} samples for a {rows}x{cols} grid", samples.rows)));
    }
    let (gw, gh) = (cols * width, rows * height);
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    let plane = height * width;
    for y in 0..gh {
        for x in 0..gw {
            let s = samples.row((y / height) * cols + x / width);
            let p = (y % height) * width + x % width;
            for c in 0..channels {
                out.push(to_byte(s[c * plane + p]));
            }
        }
    }
    Ok(out)
}

/// Binary PPM scatter plot of 2-D points (black) over mode centers (red)
/// on the square [-extent, extent]^2.
pub fn scatter_plot(points: &Matrix, centers: &[[f64; 2]], extent: f64, size: usize) -> Result<Vec<u8>, Error> {
    if points.cols != 2 {
        return Err(Error::Shape(format!("scatter plot needs 2-D points, got {}", points.cols)));
    }
    let mut px = vec![255u8; size * size * 3];
    let to_pixel = |v: f64| {
        let t = (v + extent) / (2.0 * extent) * (size as f64 - 1.0);
        (t.is_finite() && t >= 0.0 && t <= size as f64 - 1.0).then(|| t.round() as usize)
    };
    let mut paint = |x: f64, y: f64, radius: usize, rgb: [u8; 3]| {
        let (Some(cx), Some(cy)) = (to_pixel(x), to_pixel(-y)) else { return };
        for py in cy.saturating_sub(radius)..=(cy + radius).min(size - 1) {
            for qx in cx.saturating_sub(radius)..=(cx + radius).min(size - 1) {
                let i = (py * size + qx) * 3;
                px[i..i + 3].copy_from_slice(&rgb);
            }
        }
    };
    for i in 0..points.rows {
        let r = points.row(i);
        paint(r[0], r[1], 0, [0, 0, 0]);
    }
    for c in centers {
        paint(c[0], c[1], 2, [220, 0, 0]);
    }
    let mut out = format!("P6\n{size} {size}\n255\n").into_bytes();
    out.extend(px);
    Ok(out)
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Static SVG line chart. Sentinel and non-finite values are skipped.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.1.is_finite() && p.1 < FITNESS_SENTINEL);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts() {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    for (v, y) in [(y0, h - m), (y1, m)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, m - 4.0, y + 4.0, fmt_tick(v));
    }
    for (v, x) in [(x0, m), (x1, w - m)] {
        let _ = writeln!(svg, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, h - m + 16.0, fmt_tick(v));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite() && p.1 < FITNESS_SENTINEL)
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#, w - m, escape(s.name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean, sample standard deviation and the half-width of the two-sided
/// 95% Student-t confidence interval of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
}

/// `None` for fewer than two values.
pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?.inverse_cdf(0.975);
    Some(Aggregate { runs: n, mean, std, ci95: t * std / (n as f64).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speciation::SpeciesSummary;

    fn role(best: f64) -> RoleReport {
        RoleReport {
            best_fitness: best,
            mean_fitness: best * 2.0,
            mean_layers: 1.5,
            reused_genes: 3,
            species_sizes: vec![2, 3],
            threshold: 1.5,
            species: vec![SpeciesSummary { species_id: 4, size: 2, average_fitness: 0.5, threshold: 1.5 }],
            best_id: 9,
            best_structure: "linear32/relu".into(),
        }
    }

    #[test]
    fn csv_roundtrip() {
        let r = GenerationReport { generation: 3, generator: role(0.25), discriminator: role(1e9), wall_clock_secs: 2.0 };
        let text = format!("{}\n{}\n", csv_header(), csv_row(&r));
        let rows = parse_csv(&text).unwrap();
        assert_eq!(rows, vec![CsvRow::from(&r)]);
        assert_eq!(csv_header().split(',').count(), csv_row(&r).split(',').count());
        assert_eq!(species_rows(&r), vec!["3,generator,4,2,0.5,1.5", "3,discriminator,4,2,0.5,1.5"]);
        assert!(parse_csv("nope\n").is_err());
    }

    #[test]
    fn grid_tiling_and_scaling() {
        let samples = Matrix::from_vec(100, 28 * 28, vec![-1.0; 100 * 28 * 28]);
        let img = sample_grid(&samples, 1, 28, 28, 10, 10).unwrap();
        let header = b"P5\n280 280\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 280 * 280);
        assert!(img[header.len()..].iter().all(|&b| b == 0));
        assert_eq!((to_byte(1.0), to_byte(0.0), to_byte(5.0)), (255, 128, 255));
        assert!(sample_grid(&samples, 1, 28, 28, 11, 10).is_err());
    }

    #[test]
    fn aggregate_matches_t_table() {
        assert!(aggregate(&[1.0]).is_none());
        let a = aggregate(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(a.mean, 3.0);
        assert!((a.std - 2.5f64.sqrt()).abs() < 1e-12);
        // t(0.975, 4) = 2.776445
        assert!((a.ci95 - 2.776445 * 2.5f64.sqrt() / 5f64.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn chart_is_well_formed() {
        let svg = line_chart("fit <ness>", "generation", &[Series { name: "best", points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 1e9)] }]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("fit &lt;ness&gt;"));
    }
}
