//! The generational loop: pair, train and score, speciate, allocate, select,
//! breed, transfer parameters, repeat.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExtractorKind, RunConfig, DATA_DIR_ENV};
use crate::data::{self, BatchIterator, Dataset};
use crate::evaluation::{self, EvalContext, PreviousGeneration};
use crate::fitness::{self, FeatureExtractor, GaussianStats, StatsKey};
use crate::genome::{infer_shapes, new_random_genome, validate, Genome, IdGen, Role, SearchSpace};
use crate::rng::{self, tag};
use crate::speciation::{self, SpeciationState, SpeciesSummary};
use crate::variation;
use crate::Error;

/// Data, feature extractor and reference statistics of a run. Everything
/// here is a deterministic function of the config.
pub struct Environment {
    pub dataset: Dataset,
    pub extractor: Box<dyn FeatureExtractor>,
    pub real_stats: GaussianStats,
}

impl Environment {
    pub fn new(dataset: Dataset, extractor: Box<dyn FeatureExtractor>) -> Result<Self, Error> {
        let real_stats = fitness::estimate_gaussian(&extractor.extract(&dataset.samples))?;
        Ok(Self { dataset, extractor, real_stats })
    }

    /// Loads the dataset and extractor named by `config`. Real-data
    /// statistics are cached in `cache_dir` when given.
    pub fn from_config(config: &RunConfig, cache_dir: Option<&Path>) -> Result<Self, Error> {
        let dcfg = &config.dataset;
        let dataset = load_dataset(config)?;
        let width = dataset.shape.width();
        let extractor: Box<dyn FeatureExtractor> = match config.extractor_kind() {
            ExtractorKind::Identity => Box::new(fitness::Identity { width }),
            ExtractorKind::RawPixels => Box::new(fitness::RawPixels { width }),
            ExtractorKind::ConvClassifier => {
                let labels =
                    dataset.labels.as_ref().ok_or_else(|| Error::Config("extractor.kind: conv_classifier needs labelled data".into()))?;
                let mut rng = rng::stream(dcfg.data_seed, &[tag::INIT]);
                Box::new(fitness::ConvClassifier::train(
                    &dataset.samples,
                    labels,
                    dataset.shape,
                    config.extractor.classifier_steps,
                    64,
                    &mut rng,
                )?)
            }
        };
        let real_stats = match cache_dir {
            Some(dir) => {
                let key = StatsKey { extractor: format!("{}_seed{}", extractor.id(), dcfg.data_seed), dataset: dataset.id.clone() };
                fitness::cached_stats(dir, &key, || fitness::estimate_gaussian(&extractor.extract(&dataset.samples)))?
            }
            None => fitness::estimate_gaussian(&extractor.extract(&dataset.samples))?,
        };
        Ok(Self { dataset, extractor, real_stats })
    }
}

/// The training data named by `config`.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset, Error> {
    let dcfg = &config.dataset;
    Ok(match dcfg.kind {
        DatasetKind::Ring => {
            let r = &dcfg.ring;
            let mut rng = rng::stream(dcfg.data_seed, &[tag::DATA]);
            data::synthetic_ring(r.modes, r.radius, r.sigma, r.samples, &mut rng)
        }
        DatasetKind::Mnist => data::load_mnist(&mnist_dir(dcfg.path.as_deref())?)?,
    })
}

fn mnist_dir(path: Option<&str>) -> Result<PathBuf, Error> {
    if let Some(p) = path {
        return Ok(PathBuf::from(p));
    }
    let root = std::env::var(DATA_DIR_ENV).map_err(|_| Error::Config(format!("dataset.path: not set and ${DATA_DIR_ENV} is undefined")))?;
    let root = PathBuf::from(root);
    let sub = root.join("mnist");
    Ok(if sub.is_dir() { sub } else { root })
}

/// Complete state between generations.
#[derive(Debug, Clone)]
pub struct RunState {
    /// Index of the next generation to run.
    pub generation: u64,
    pub generators: Vec<Genome>,
    pub discriminators: Vec<Genome>,
    pub generator_species: SpeciationState,
    pub discriminator_species: SpeciationState,
    pub previous: PreviousGeneration,
    pub genome_ids: IdGen,
    pub lineage_ids: IdGen,
    pub species_ids: IdGen,
    pub batches: BatchIterator,
}

impl RunState {
    pub fn population(&self, role: Role) -> &[Genome] {
        match role {
            Role::Generator => &self.generators,
            Role::Discriminator => &self.discriminators,
        }
    }
}

/// Per-role statistics of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleReport {
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub mean_layers: f64,
    pub reused_genes: usize,
    pub species_sizes: Vec<usize>,
    pub threshold: f64,
    pub species: Vec<SpeciesSummary>,
    pub best_id: u64,
    pub best_structure: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: u64,
    pub generator: RoleReport,
    pub discriminator: RoleReport,
    pub wall_clock_secs: f64,
}

/// Fresh populations of single-gene genomes and empty speciation states.
pub fn initialize(config: &RunConfig, spatial: bool) -> Result<RunState, Error> {
    config.validate()?;
    let space = config.search_space(spatial);
    let mut rng = rng::stream(config.seed, &[tag::INIT]);
    let mut genome_ids = IdGen::default();
    let mut lineage_ids = IdGen::default();
    let generators =
        (0..config.pop_gen).map(|_| new_random_genome(Role::Generator, &space, &mut genome_ids, &mut lineage_ids, &mut rng)).collect();
    let discriminators =
        (0..config.pop_disc).map(|_| new_random_genome(Role::Discriminator, &space, &mut genome_ids, &mut lineage_ids, &mut rng)).collect();
    Ok(RunState {
        generation: 0,
        generators,
        discriminators,
        generator_species: SpeciationState::new(config.species),
        discriminator_species: SpeciationState::new(config.species),
        previous: PreviousGeneration::default(),
        genome_ids,
        lineage_ids,
        species_ids: IdGen::default(),
        batches: BatchIterator::new(rng::derive_seed(config.seed, &[tag::DATA]), config.batch_size),
    })
}

fn role_report(pop: &[Genome], species: &SpeciationState, threshold: f64) -> RoleReport {
    let n = pop.len() as f64;
    let best = pop
        .iter()
        .min_by(|a, b| a.fitness_or_worst().total_cmp(&b.fitness_or_worst()).then(a.id.cmp(&b.id)))
        .expect("non-empty population");
    let mut summary = speciation::summarize(species);
    for s in &mut summary {
        s.threshold = threshold;
    }
    RoleReport {
        best_fitness: best.fitness_or_worst(),
        mean_fitness: pop.iter().map(Genome::fitness_or_worst).sum::<f64>() / n,
        mean_layers: pop.iter().map(|g| g.len() as f64).sum::<f64>() / n,
        reused_genes: pop.iter().map(|g| g.reused_gene_count).sum(),
        species_sizes: species.sizes(),
        threshold,
        species: summary,
        best_id: best.id,
        best_structure: best.describe(),
    }
}

struct Breeder<'a> {
    config: &'a RunConfig,
    space: SearchSpace,
    env: &'a Environment,
}

impl Breeder<'_> {
    /// Builds the next population of one role from its species.
    fn breed(&self, species: &SpeciationState, state: &mut RunState, role: Role, generation: u64) -> Result<Vec<Genome>, Error> {
        let size = match role {
            Role::Generator => self.config.pop_gen,
            Role::Discriminator => self.config.pop_disc,
        };
        let averages: Vec<f64> = species.species.iter().map(|s| s.average_fitness()).collect();
        let slots = speciation::allocate_offspring(&averages, size)?;
        let mut rng = rng::stream(self.config.seed, &[tag::BREED, generation, role as u64]);
        let mut next = Vec::with_capacity(size);
        for (sp, &n) in species.species.iter().zip(&slots) {
            let mut remaining = n;
            if self.config.elitism && remaining > 0 {
                let elite = sp.best().expect("non-empty species");
                next.push(self.finish(&[elite], elite.clone(), state)?);
                remaining -= 1;
            }
            for _ in 0..remaining {
                let parent = speciation::tournament_select(&sp.members, self.config.tournament_k, &mut rng);
                let mut child = variation::mutate(parent, &self.config.mutation, &self.space, &mut state.lineage_ids, &mut rng);
                let mut parents = vec![parent];
                if self.config.crossover_rate > 0.0 && rand::Rng::random_bool(&mut rng, self.config.crossover_rate) {
                    let other = speciation::tournament_select(&sp.members, self.config.tournament_k, &mut rng);
                    child = variation::crossover(&child, other, &self.space, &mut rng);
                    parents.push(other);
                }
                next.push(self.finish(&parents, child, state)?);
            }
        }
        Ok(next)
    }

    fn finish(&self, parents: &[&Genome], mut child: Genome, state: &mut RunState) -> Result<Genome, Error> {
        child.id = state.genome_ids.next_id();
        child.fitness = None;
        let violations = validate(&child, &self.space);
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::Shape(format!("bred an invalid genome: {}", list.join(", "))));
        }
        let plan = infer_shapes(&child, self.env.dataset.shape, self.config.latent_dim, self.config.base_channels)?;
        Ok(variation::transfer_parameters(parents, child, &plan))
    }
}

/// Runs one generation and returns the bred populations of the next one
/// together with the report of the evaluated generation.
pub fn step_generation(mut state: RunState, config: &RunConfig, env: &Environment) -> Result<(RunState, GenerationReport), Error> {
    let started = Instant::now();
    let generation = state.generation;

    // Pairing: random in the first generation, configured strategy after.
    let mut pair_rng = rng::stream(config.seed, &[tag::PAIRING, generation]);
    let plan = evaluation::plan_pairings(
        &state.generators,
        &state.discriminators,
        &state.previous,
        config.strategy,
        config.k,
        config.batches_per_gen,
        &mut pair_rng,
    );

    // Training and scoring.
    let real_batches: Vec<_> = (0..state.discriminators.len()).map(|_| state.batches.take(&env.dataset, config.batches_per_gen)).collect();
    let ctx = EvalContext {
        seed: config.seed,
        generation,
        sample_shape: env.dataset.shape,
        latent_dim: config.latent_dim,
        base_channels: config.base_channels,
        batch_size: config.batch_size,
        optimizer: config.optimizer,
        fid_samples: config.fid_samples,
        extractor: env.extractor.as_ref(),
        real_stats: &env.real_stats,
        parallel: config.parallel,
    };
    let mut generators = std::mem::take(&mut state.generators);
    let mut discriminators = std::mem::take(&mut state.discriminators);
    evaluation::evaluate_generation(&ctx, &mut generators, &mut discriminators, &plan, &real_batches)?;

    // Speciation.
    let mut species_rng = rng::stream(config.seed, &[tag::SPECIES, generation]);
    let g_threshold = state.generator_species.threshold;
    let d_threshold = state.discriminator_species.threshold;
    let mut g_species = speciation::assign_species(generators.clone(), &state.generator_species, &mut state.species_ids, &mut species_rng);
    let mut d_species =
        speciation::assign_species(discriminators.clone(), &state.discriminator_species, &mut state.species_ids, &mut species_rng);

    let report = GenerationReport {
        generation,
        generator: role_report(&generators, &g_species, g_threshold),
        discriminator: role_report(&discriminators, &d_species, d_threshold),
        wall_clock_secs: 0.0,
    };

    // Selection and breeding.
    let breeder = Breeder { config, space: config.search_space(env.dataset.shape.is_spatial()), env };
    let next_g = breeder.breed(&g_species, &mut state, Role::Generator, generation)?;
    let next_d = breeder.breed(&d_species, &mut state, Role::Discriminator, generation)?;

    g_species.threshold = speciation::adjust_threshold(g_threshold, config.species, g_species.species.len());
    d_species.threshold = speciation::adjust_threshold(d_threshold, config.species, d_species.species.len());
    for s in g_species.species.iter_mut().chain(d_species.species.iter_mut()) {
        s.members.clear();
    }

    state.previous = PreviousGeneration::from_evaluated(&generators, &discriminators);
    state.generators = next_g;
    state.discriminators = next_d;
    state.generator_species = g_species;
    state.discriminator_species = d_species;
    state.generation += 1;

    let report = GenerationReport { wall_clock_secs: started.elapsed().as_secs_f64(), ..report };
    Ok((state, report))
}

/// Runs generations until `config.generations` have completed, calling
/// `after_each` with the new state and the finished generation's report.
/// Starting from a resumed state continues where it left off.
pub fn run(
    config: &RunConfig,
    env: &Environment,
    mut state: RunState,
    mut after_each: impl FnMut(&RunState, &GenerationReport) -> Result<(), Error>,
) -> Result<(RunState, Vec<GenerationReport>), Error> {
    let mut reports = Vec::new();
    while (state.generation as usize) < config.generations {
        let (next, report) = step_generation(state, config, env)?;
        after_each(&next, &report)?;
        reports.push(report);
        state = next;
    }
    Ok((state, reports))
}
