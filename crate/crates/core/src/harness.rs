//! Run management: run directories, per-generation artifacts, checkpoints,
//! resume, repeated seeds and re-rendering of reports.
//!
//! A run directory holds `config.toml`, `report.csv`, `species.csv`,
//! `timing.csv`, `checkpoints/ckpt_NNNN/`, `samples/` and `curves/`.
//! Repeated runs put one such directory per seed under `seed_N/` next to an
//! `aggregate.json` summary.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{self, RunConfig};
use crate::data::Dataset;
use crate::evolution::{self, Environment, GenerationReport, RunState};
use crate::fitness;
use crate::genome::{build_phenotype, infer_shapes, Genome, SampleShape};
use crate::nn::Network;
use crate::report::{self, Aggregate, Series};
use crate::rng::{self, tag};
use crate::Error;

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.csv";
pub const SPECIES_FILE: &str = "species.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SAMPLES_DIR: &str = "samples";
pub const CURVES_DIR: &str = "curves";
pub const AGGREGATE_FILE: &str = "aggregate.json";

const GRID_SIDE: usize = 10;
const SCATTER_POINTS: usize = 1000;
const SCATTER_SIZE: usize = 400;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Number of seeds, starting at `config.seed`.
    pub repeat: usize,
    /// Keep only the newest N checkpoints; 0 keeps all of them.
    pub keep_checkpoints: usize,
    /// Print one progress line per generation to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub generations: u64,
    /// Best generator fitness of the last generation, if any ran.
    pub final_best_fitness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub runs: Vec<RunSummary>,
    pub aggregate: Option<Aggregate>,
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<(), Error> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    f.flush()?;
    Ok(())
}

/// Keeps the header and every row whose leading generation index is below
/// `generation`.
fn truncate_rows(path: &Path, generation: u64) -> Result<(), Error> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|g| g.parse::<u64>().ok()).is_some_and(|g| g < generation);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Trained phenotype of an evaluated generator. Missing parameters (for a
/// diverged individual) are initialized from a fixed stream.
pub fn generator_network(genome: &Genome, config: &RunConfig, shape: SampleShape) -> Result<Network, Error> {
    let plan = infer_shapes(genome, shape, config.latent_dim, config.base_channels)?;
    let mut rng = rng::stream(config.seed, &[tag::SAMPLES, genome.id]);
    Ok(build_phenotype(genome, &plan, &mut rng).network)
}

/// Writes the sample image of `generator` to `path` (extension chosen by
/// the data shape) and returns the written path.
pub fn write_samples(generator: &Network, dataset: &Dataset, seed: u64, path: &Path) -> Result<PathBuf, Error> {
    let mut rng = rng::stream(seed, &[tag::SAMPLES]);
    match dataset.shape {
        SampleShape::Image { channels, height, width } => {
            let samples = fitness::generate(generator, GRID_SIDE * GRID_SIDE, 256, &mut rng);
            let bytes = report::sample_grid(&samples, channels, height, width, GRID_SIDE, GRID_SIDE)?;
            let path = path.with_extension(if channels == 1 { "pgm" } else { "ppm" });
            fs::write(&path, bytes)?;
            Ok(path)
        }
        SampleShape::Flat { .. } => {
            let samples = fitness::generate(generator, SCATTER_POINTS, 256, &mut rng);
            let centers = dataset.centers.clone().unwrap_or_default();
            let reach = centers.iter().map(|c| c[0].hypot(c[1])).fold(0.0, f64::max) + 5.0 * dataset.sigma.unwrap_or(0.1);
            let bytes = report::scatter_plot(&samples, &centers, reach.max(1.0) * 1.1, SCATTER_SIZE)?;
            let path = path.with_extension("ppm");
            fs::write(&path, bytes)?;
            Ok(path)
        }
    }
}

fn wants_samples(config: &RunConfig, generation: u64) -> bool {
    let g = generation as usize;
    g == 0 || g + 1 == config.generations || (config.sample_every > 0 && (g + 1).is_multiple_of(config.sample_every))
}

fn sample_name(generation: u64) -> String {
    format!("gen_{generation:04}")
}

/// Writes the SVG curves for a report CSV.
pub fn render_curves(run_dir: &Path) -> Result<(), Error> {
    let rows = report::parse_csv(&fs::read_to_string(run_dir.join(REPORT_FILE))?)?;
    let dir = run_dir.join(CURVES_DIR);
    fs::create_dir_all(&dir)?;
    let series = |name: &'static str, f: &dyn Fn(&report::CsvRow) -> f64| Series {
        name,
        points: rows.iter().map(|r| (r.generation as f64, f(r))).collect(),
    };
    let charts = [
        (
            "generator_fitness.svg",
            "Generator fitness (FID)",
            vec![series("best", &|r| r.generator.best_fitness), series("mean", &|r| r.generator.mean_fitness)],
        ),
        (
            "discriminator_fitness.svg",
            "Discriminator fitness (loss)",
            vec![series("best", &|r| r.discriminator.best_fitness), series("mean", &|r| r.discriminator.mean_fitness)],
        ),
        (
            "layers.svg",
            "Mean layer count",
            vec![series("generators", &|r| r.generator.mean_layers), series("discriminators", &|r| r.discriminator.mean_layers)],
        ),
        (
            "reused_genes.svg",
            "Genes with reused parameters",
            vec![
                series("generators", &|r| r.generator.reused_genes as f64),
                series("discriminators", &|r| r.discriminator.reused_genes as f64),
            ],
        ),
    ];
    for (file, title, s) in charts {
        fs::write(dir.join(file), report::line_chart(title, "generation", &s))?;
    }
    Ok(())
}

/// Continues `state` to `config.generations`, writing every artifact and a
/// checkpoint after each generation.
fn drive(config: &RunConfig, env: &Environment, dir: &Path, state: RunState, opts: &RunOptions) -> Result<RunState, Error> {
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    let samples_dir = dir.join(SAMPLES_DIR);
    fs::create_dir_all(&samples_dir)?;
    let sink = |next: &RunState, r: &GenerationReport| -> Result<(), Error> {
        append_line(&dir.join(REPORT_FILE), &report::csv_header(), &report::csv_row(r))?;
        for row in report::species_rows(r) {
            append_line(&dir.join(SPECIES_FILE), report::SPECIES_HEADER, &row)?;
        }
        append_line(&dir.join(TIMING_FILE), "generation,wall_clock_secs", &format!("{},{:.3}", r.generation, r.wall_clock_secs))?;
        if wants_samples(config, r.generation) {
            if let Some(best) = next.previous.generators.first() {
                let net = generator_network(best, config, env.dataset.shape)?;
                write_samples(&net, &env.dataset, config.seed, &samples_dir.join(sample_name(r.generation)))?;
            }
        }
        checkpoint::save(&ckpt_dir, config, next, Some(&dir.join(REPORT_FILE)))?;
        prune(&ckpt_dir, opts.keep_checkpoints)?;
        if opts.verbose {
            eprintln!(
                "seed {} gen {:>4}: G best {:.4} mean layers {:.2} | D best {:.4} mean layers {:.2} | {:.1}s",
                config.seed,
                r.generation,
                r.generator.best_fitness,
                r.generator.mean_layers,
                r.discriminator.best_fitness,
                r.discriminator.mean_layers,
                r.wall_clock_secs
            );
        }
        Ok(())
    };
    let (state, _) = evolution::run(config, env, state, sink)?;
    if dir.join(REPORT_FILE).exists() {
        render_curves(dir)?;
        if let Some(best) = state.previous.generators.first() {
            let net = generator_network(best, config, env.dataset.shape)?;
            write_samples(&net, &env.dataset, config.seed, &samples_dir.join("final"))?;
        }
    }
    Ok(state)
}

fn prune(ckpt_dir: &Path, keep: usize) -> Result<(), Error> {
    if keep == 0 {
        return Ok(());
    }
    let all = checkpoint::list(ckpt_dir)?;
    for (_, path) in all.iter().take(all.len().saturating_sub(keep)) {
        fs::remove_dir_all(path)?;
    }
    Ok(())
}

fn summary_of(config: &RunConfig, dir: &Path) -> Result<RunSummary, Error> {
    let path = dir.join(REPORT_FILE);
    let rows = if path.exists() { report::parse_csv(&fs::read_to_string(path)?)? } else { Vec::new() };
    Ok(RunSummary {
        seed: config.seed,
        dir: dir.to_path_buf(),
        generations: rows.len() as u64,
        final_best_fitness: rows.last().map(|r| r.generator.best_fitness),
    })
}

/// Starts a fresh run in `dir`, which must not already contain one.
pub fn run_single(config: &RunConfig, env: &Environment, dir: &Path, opts: &RunOptions) -> Result<RunSummary, Error> {
    if dir.join(CONFIG_FILE).exists() {
        return Err(Error::Config(format!("{} already contains a run; use resume", dir.display())));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
    let state = evolution::initialize(config, env.dataset.shape.is_spatial())?;
    checkpoint::save(&dir.join(CHECKPOINT_DIR), config, &state, None)?;
    drive(config, env, dir, state, opts)?;
    summary_of(config, dir)
}

/// Runs `opts.repeat` seeds (at least one) starting at `config.seed`. A
/// single run writes straight into `out`; repeated runs use `out/seed_N`
/// and add an aggregate of the final best generator fitness.
pub fn run_experiment(config: &RunConfig, out: &Path, opts: &RunOptions) -> Result<ExperimentSummary, Error> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let env = Environment::from_config(config, Some(&out.join("cache")))?;
    let repeat = opts.repeat.max(1);
    let mut runs = Vec::with_capacity(repeat);
    for i in 0..repeat {
        let mut cfg = config.clone();
        cfg.seed = config.seed + i as u64;
        let dir = if repeat == 1 { out.to_path_buf() } else { out.join(format!("seed_{}", cfg.seed)) };
        runs.push(run_single(&cfg, &env, &dir, opts)?);
    }
    let summary = summarize(runs);
    if repeat > 1 {
        write_aggregate(out, &summary)?;
    }
    Ok(summary)
}

fn summarize(runs: Vec<RunSummary>) -> ExperimentSummary {
    let finals: Vec<f64> = runs.iter().filter_map(|r| r.final_best_fitness).collect();
    let aggregate = if finals.len() == runs.len() { report::aggregate(&finals) } else { None };
    ExperimentSummary { runs, aggregate }
}

fn write_aggregate(out: &Path, summary: &ExperimentSummary) -> Result<(), Error> {
    let mut f = File::create(out.join(AGGREGATE_FILE))?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    writeln!(f)?;
    Ok(())
}

/// Reads the resolved config stored in a run directory.
pub fn read_run_config(dir: &Path) -> Result<RunConfig, Error> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("{} has no {CONFIG_FILE}", dir.display())));
    }
    config::load_config(Some(&path), &[])
}

/// Run directories below `dir`: `dir` itself, or its `seed_N` children.
pub fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    if dir.join(CONFIG_FILE).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<(u64, PathBuf)> = Vec::new();
    if dir.is_dir() {
        for e in fs::read_dir(dir)? {
            let e = e?;
            let seed = e.file_name().to_str().and_then(|n| n.strip_prefix("seed_")).and_then(|n| n.parse().ok());
            if let Some(seed) = seed.filter(|_| e.path().join(CONFIG_FILE).exists()) {
                out.push((seed, e.path()));
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!("{} contains no run", dir.display())));
    }
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

/// Continues every run under `dir` from its newest checkpoint. Rows of the
/// report files written after that checkpoint are discarded first, so the
/// finished files equal those of an uninterrupted run.
pub fn resume(dir: &Path, opts: &RunOptions) -> Result<ExperimentSummary, Error> {
    let dirs = run_dirs(dir)?;
    let mut env: Option<(String, Environment)> = None;
    let mut runs = Vec::new();
    for run in &dirs {
        let config = read_run_config(run)?;
        let ckpt = checkpoint::latest(&run.join(CHECKPOINT_DIR))?
            .ok_or_else(|| Error::Checkpoint(format!("{} has no checkpoint", run.display())))?;
        let state = checkpoint::load(&ckpt, &config)?;
        let copy = ckpt.join(checkpoint::REPORT_COPY);
        if copy.exists() {
            fs::copy(&copy, run.join(REPORT_FILE))?;
        } else if run.join(REPORT_FILE).exists() {
            fs::remove_file(run.join(REPORT_FILE))?;
        }
        truncate_rows(&run.join(SPECIES_FILE), state.generation)?;
        truncate_rows(&run.join(TIMING_FILE), state.generation)?;

        // Seeds of one experiment share everything but the seed.
        let mut key_cfg = config.clone();
        key_cfg.seed = 0;
        let key = key_cfg.hash();
        if env.as_ref().is_none_or(|(k, _)| *k != key) {
            let cache = if dirs.len() > 1 { dir.join("cache") } else { run.join("cache") };
            env = Some((key.clone(), Environment::from_config(&config, Some(&cache))?));
        }
        let (_, e) = env.as_ref().expect("environment loaded");
        drive(&config, e, run, state, opts)?;
        runs.push(summary_of(&config, run)?);
    }
    let summary = summarize(runs);
    if dirs.len() > 1 {
        write_aggregate(dir, &summary)?;
    }
    Ok(summary)
}

/// Re-renders curves and sample images of every run under `dir` from its
/// report CSV and checkpoints.
pub fn render(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut written = Vec::new();
    for run in run_dirs(dir)? {
        let config = read_run_config(&run)?;
        let dataset = evolution::load_dataset(&config)?;
        if run.join(REPORT_FILE).exists() {
            render_curves(&run)?;
            written.push(run.join(CURVES_DIR));
        }
        let samples = run.join(SAMPLES_DIR);
        fs::create_dir_all(&samples)?;
        for (gen, ckpt) in checkpoint::list(&run.join(CHECKPOINT_DIR))? {
            if gen == 0 {
                continue;
            }
            let state = checkpoint::load(&ckpt, &config)?;
            if let Some(best) = state.previous.generators.first() {
                let net = generator_network(best, &config, dataset.shape)?;
                written.push(write_samples(&net, &dataset, config.seed, &samples.join(sample_name(gen - 1)))?);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_header_and_early_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "generation,x\n0,a\n1,b\n2,c\n").unwrap();
        truncate_rows(&p, 2).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "generation,x\n0,a\n1,b\n");
    }

    #[test]
    fn sampling_schedule() {
        let c = RunConfig { generations: 25, sample_every: 10, ..RunConfig::default() };
        let picked: Vec<u64> = (0..25).filter(|&g| wants_samples(&c, g)).collect();
        assert_eq!(picked, vec![0, 9, 19, 24]);
    }
}
