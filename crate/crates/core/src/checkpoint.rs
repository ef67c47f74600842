//! Per-generation checkpoints.
//!
//! A checkpoint is a directory `ckpt_NNNN` (NNNN = the next generation to
//! run) holding `state.json` with the config hash, counters, batch iterator,
//! speciation state and all genomes, a `params/` directory of parameter
//! blobs referenced from the genome records, and a copy of the report CSV.
//! Blobs are named by the SHA-256 of their content, so parameters shared
//! between genomes are written once.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::BatchIterator;
use crate::evaluation::PreviousGeneration;
use crate::evolution::RunState;
use crate::genome::{Activation, Gene, Genome, IdGen, LayerParams, LayerType, Role, ShapeSignature};
use crate::speciation::{SpeciationState, Species};
use crate::Error;

const BLOB_MAGIC: &[u8; 4] = b"CGPB";
const BLOB_VERSION: u32 = 1;
const STATE_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";
pub const PARAMS_DIR: &str = "params";
pub const REPORT_COPY: &str = "report.csv";

#[derive(Debug, Serialize, Deserialize)]
struct GeneRecord {
    layer_type: LayerType,
    activation: Activation,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    lineage_id: u64,
    param_ref: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenomeRecord {
    id: u64,
    role: Role,
    fitness: Option<f64>,
    reused_gene_count: usize,
    genes: Vec<GeneRecord>,
    adapter_ref: Option<String>,
    head_ref: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpeciesRecord {
    id: u64,
    representative: GenomeRecord,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpeciationRecord {
    threshold: f64,
    target_species: usize,
    species: Vec<SpeciesRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRecord {
    version: u32,
    config_hash: String,
    generation: u64,
    genome_ids: IdGen,
    lineage_ids: IdGen,
    species_ids: IdGen,
    batches: BatchIterator,
    generators: Vec<GenomeRecord>,
    discriminators: Vec<GenomeRecord>,
    generator_species: SpeciationRecord,
    discriminator_species: SpeciationRecord,
    previous_generators: Vec<GenomeRecord>,
    previous_discriminators: Vec<GenomeRecord>,
}

pub fn checkpoint_name(generation: u64) -> String {
    format!("ckpt_{generation:04}")
}

fn encode_blob(p: &LayerParams) -> Vec<u8> {
    let sig = serde_json::to_vec(&p.signature).expect("signature serializes");
    let mut out = Vec::with_capacity(32 + sig.len() + 8 * (p.weight.len() + p.bias.len()));
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(sig.len() as u64).to_le_bytes());
    out.extend_from_slice(&sig);
    for v in [&p.weight, &p.bias, &p.square_avg] {
        out.extend_from_slice(&(v.len() as u64).to_le_bytes());
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    name: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], Error> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint(format!("parameter blob {} is truncated", self.name)));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, Error> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("blob {} length overflow", self.name)))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn decode_blob(bytes: &[u8], name: &str) -> Result<LayerParams, Error> {
    let mut r = Reader { bytes, name };
    if r.take(4)? != BLOB_MAGIC {
        return Err(Error::Checkpoint(format!("parameter blob {name} has a bad magic number")));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != BLOB_VERSION {
        return Err(Error::Checkpoint(format!("parameter blob {name} has unsupported version {version}")));
    }
    let sig_len = r.u64()? as usize;
    let signature: ShapeSignature = serde_json::from_slice(r.take(sig_len)?)?;
    let weight = r.f64s()?;
    let bias = r.f64s()?;
    let square_avg = r.f64s()?;
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint(format!("parameter blob {name} has trailing bytes")));
    }
    Ok(LayerParams { signature, weight, bias, square_avg })
}

/// Collects blobs while genomes are encoded.
#[derive(Default)]
struct BlobWriter {
    blobs: BTreeMap<String, Vec<u8>>,
}

impl BlobWriter {
    fn put(&mut self, p: &Option<Arc<LayerParams>>) -> Option<String> {
        let p = p.as_ref()?;
        let bytes = encode_blob(p);
        let name = format!("{}_{}.bin", p.signature, &hex::encode(Sha256::digest(&bytes))[..32]);
        self.blobs.entry(name.clone()).or_insert(bytes);
        Some(name)
    }

    fn genome(&mut self, g: &Genome) -> GenomeRecord {
        GenomeRecord {
            id: g.id,
            role: g.role,
            fitness: g.fitness,
            reused_gene_count: g.reused_gene_count,
            genes: g
                .genes
                .iter()
                .map(|gene| GeneRecord {
                    layer_type: gene.layer_type,
                    activation: gene.activation,
                    out_features: gene.out_features(),
                    out_channels: gene.out_channels(),
                    lineage_id: gene.lineage_id,
                    param_ref: self.put(&gene.params),
                })
                .collect(),
            adapter_ref: self.put(&g.adapter_params),
            head_ref: self.put(&g.head_params),
        }
    }

    fn genomes(&mut self, pop: &[Genome]) -> Vec<GenomeRecord> {
        pop.iter().map(|g| self.genome(g)).collect()
    }

    fn speciation(&mut self, s: &SpeciationState) -> SpeciationRecord {
        SpeciationRecord {
            threshold: s.threshold,
            target_species: s.target_species,
            species: s.species.iter().map(|sp| SpeciesRecord { id: sp.id, representative: self.genome(&sp.representative) }).collect(),
        }
    }
}

struct BlobReader {
    dir: PathBuf,
    cache: BTreeMap<String, Arc<LayerParams>>,
}

impl BlobReader {
    fn get(&mut self, name: &Option<String>) -> Result<Option<Arc<LayerParams>>, Error> {
        let Some(name) = name else { return Ok(None) };
        if let Some(p) = self.cache.get(name) {
            return Ok(Some(p.clone()));
        }
        if name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(Error::Checkpoint(format!("invalid parameter reference {name:?}")));
        }
        let bytes = fs::read(self.dir.join(name)).map_err(|e| Error::Checkpoint(format!("cannot read parameter blob {name}: {e}")))?;
        let p = Arc::new(decode_blob(&bytes, name)?);
        self.cache.insert(name.clone(), p.clone());
        Ok(Some(p))
    }

    fn genome(&mut self, r: &GenomeRecord) -> Result<Genome, Error> {
        let mut genes = Vec::with_capacity(r.genes.len());
        for g in &r.genes {
            let units = match (g.layer_type.is_spatial(), g.out_features, g.out_channels) {
                (false, Some(u), None) | (true, None, Some(u)) => u,
                _ => {
                    return Err(Error::Checkpoint(format!("genome {}: gene size field does not match layer type {:?}", r.id, g.layer_type)))
                }
            };
            genes.push(Gene {
                layer_type: g.layer_type,
                activation: g.activation,
                units,
                lineage_id: g.lineage_id,
                params: self.get(&g.param_ref)?,
            });
        }
        let mut genome = Genome::new(r.id, r.role, genes);
        genome.fitness = r.fitness;
        genome.reused_gene_count = r.reused_gene_count;
        genome.adapter_params = self.get(&r.adapter_ref)?;
        genome.head_params = self.get(&r.head_ref)?;
        Ok(genome)
    }

    fn genomes(&mut self, rs: &[GenomeRecord]) -> Result<Vec<Genome>, Error> {
        rs.iter().map(|r| self.genome(r)).collect()
    }

    fn speciation(&mut self, r: &SpeciationRecord) -> Result<SpeciationState, Error> {
        let species = r
            .species
            .iter()
            .map(|s| Ok(Species { id: s.id, representative: self.genome(&s.representative)?, members: Vec::new() }))
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(SpeciationState { species, threshold: r.threshold, target_species: r.target_species })
    }
}

/// Writes the checkpoint for `state` under `dir` and returns its path.
/// `report_csv` is the report so far, copied verbatim.
pub fn save(dir: &Path, config: &RunConfig, state: &RunState, report_csv: Option<&Path>) -> Result<PathBuf, Error> {
    let mut blobs = BlobWriter::default();
    let record = StateRecord {
        version: STATE_VERSION,
        config_hash: config.hash(),
        generation: state.generation,
        genome_ids: state.genome_ids.clone(),
        lineage_ids: state.lineage_ids.clone(),
        species_ids: state.species_ids.clone(),
        batches: state.batches.clone(),
        generators: blobs.genomes(&state.generators),
        discriminators: blobs.genomes(&state.discriminators),
        generator_species: blobs.speciation(&state.generator_species),
        discriminator_species: blobs.speciation(&state.discriminator_species),
        previous_generators: blobs.genomes(&state.previous.generators),
        previous_discriminators: blobs.genomes(&state.previous.discriminators),
    };

    // Write into a temporary directory and rename, so a crash never leaves
    // a half-written checkpoint under the final name.
    let final_dir = dir.join(checkpoint_name(state.generation));
    let tmp_dir = dir.join(format!(".{}.tmp", checkpoint_name(state.generation)));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir)?;
    }
    fs::create_dir_all(tmp_dir.join(PARAMS_DIR))?;
    for (name, bytes) in &blobs.blobs {
        fs::write(tmp_dir.join(PARAMS_DIR).join(name), bytes)?;
    }
    fs::write(tmp_dir.join(STATE_FILE), serde_json::to_vec_pretty(&record)?)?;
    if let Some(csv) = report_csv.filter(|p| p.exists()) {
        fs::copy(csv, tmp_dir.join(REPORT_COPY))?;
    }
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&tmp_dir, &final_dir)?;
    Ok(final_dir)
}

/// Restores the state stored in checkpoint directory `ckpt`. Refuses a
/// checkpoint written under a different config.
pub fn load(ckpt: &Path, config: &RunConfig) -> Result<RunState, Error> {
    let text = fs::read_to_string(ckpt.join(STATE_FILE))
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", ckpt.join(STATE_FILE).display())))?;
    let record: StateRecord = serde_json::from_str(&text)?;
    if record.version != STATE_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", record.version)));
    }
    let hash = config.hash();
    if record.config_hash != hash {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {} was written by config {}, current config is {hash}",
            ckpt.display(),
            record.config_hash
        )));
    }
    let mut blobs = BlobReader { dir: ckpt.join(PARAMS_DIR), cache: BTreeMap::new() };
    Ok(RunState {
        generation: record.generation,
        generators: blobs.genomes(&record.generators)?,
        discriminators: blobs.genomes(&record.discriminators)?,
        generator_species: blobs.speciation(&record.generator_species)?,
        discriminator_species: blobs.speciation(&record.discriminator_species)?,
        previous: PreviousGeneration {
            generators: blobs.genomes(&record.previous_generators)?,
            discriminators: blobs.genomes(&record.previous_discriminators)?,
        },
        genome_ids: record.genome_ids,
        lineage_ids: record.lineage_ids,
        species_ids: record.species_ids,
        batches: record.batches,
    })
}

/// All checkpoint directories under `dir`, ordered by generation.
pub fn list(dir: &Path) -> Result<Vec<(u64, PathBuf)>, Error> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(gen) = name.to_str().and_then(|n| n.strip_prefix("ckpt_")).and_then(|n| n.parse::<u64>().ok()) else {
            continue;
        };
        if entry.path().join(STATE_FILE).is_file() {
            out.push((gen, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn latest(dir: &Path) -> Result<Option<PathBuf>, Error> {
    Ok(list(dir)?.pop().map(|(_, p)| p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_roundtrip_and_corruption() {
        let p = LayerParams {
            signature: ShapeSignature::Conv { in_channels: 1, out_channels: 2 },
            weight: vec![0.5, -1.25, f64::MIN_POSITIVE],
            bias: vec![3.0, 1e-300],
            square_avg: vec![0.0, 1.0, 2.0, 3.0, 4.0],
        };
        let bytes = encode_blob(&p);
        assert_eq!(decode_blob(&bytes, "x").unwrap(), p);
        assert!(decode_blob(&bytes[..bytes.len() - 1], "x").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_blob(&bad, "x").is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_blob(&long, "x").is_err());
    }

    #[test]
    fn checkpoint_names_sort_by_generation() {
        assert_eq!(checkpoint_name(7), "ckpt_0007");
        assert_eq!(checkpoint_name(12345), "ckpt_12345");
    }
}
