//! Competitive pairing and per-pairing adversarial training.
//!
//! During a pairing only the trainee learns: the adversary is an immutable
//! snapshot of an individual evaluated in the previous generation (or, in
//! the very first generation, a randomly drawn member of the current one).

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fitness::{self, FeatureExtractor, GaussianStats, FITNESS_SENTINEL};
use crate::genome::{build_phenotype, infer_shapes, Genome, Role, SampleShape};
use crate::nn::{Matrix, Network, RmsProp};
use crate::rng::{self, tag};
use crate::Error;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

/// `−mean(log D(x)) − mean(log(1 − D(G(z))))`.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    discriminator_loss_grad(d_real, d_fake).0
}

/// Discriminator loss with its gradient with respect to each probability.
/// Clamped probabilities get a zero gradient.
pub fn discriminator_loss_grad(d_real: &[f64], d_fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let nr = d_real.len().max(1) as f64;
    let nf = d_fake.len().max(1) as f64;
    let mut loss = 0.0;
    let g_real = d_real
        .iter()
        .map(|&p| {
            let (c, inside) = clamp_prob(p);
            loss -= c.ln() / nr;
            if inside {
                -1.0 / (nr * c)
            } else {
                0.0
            }
        })
        .collect();
    let g_fake = d_fake
        .iter()
        .map(|&p| {
            let (c, inside) = clamp_prob(p);
            loss -= (1.0 - c).ln() / nf;
            if inside {
                1.0 / (nf * (1.0 - c))
            } else {
                0.0
            }
        })
        .collect();
    (loss, g_real, g_fake)
}

/// Non-saturating generator loss `−mean(log D(G(z)))`.
pub fn generator_loss(d_fake: &[f64]) -> f64 {
    generator_loss_grad(d_fake).0
}

pub fn generator_loss_grad(d_fake: &[f64]) -> (f64, Vec<f64>) {
    let n = d_fake.len().max(1) as f64;
    let mut loss = 0.0;
    let g = d_fake
        .iter()
        .map(|&p| {
            let (c, inside) = clamp_prob(p);
            loss -= c.ln() / n;
            if inside {
                -1.0 / (n * c)
            } else {
                0.0
            }
        })
        .collect();
    (loss, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    AllVsBest,
    Random,
    AllVsAll,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::AllVsBest => "all_vs_best",
            Strategy::Random => "random",
            Strategy::AllVsAll => "all_vs_all",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "all_vs_best" => Ok(Strategy::AllVsBest),
            "random" => Ok(Strategy::Random),
            "all_vs_all" => Ok(Strategy::AllVsAll),
            other => Err(Error::Config(format!("unknown strategy {other:?} (all_vs_best | random | all_vs_all)"))),
        }
    }
}

/// One trainee/adversary match. `trainee` indexes the current population of
/// `trainee_role`; `adversary` indexes the plan's pool of the other role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub trainee_role: Role,
    pub trainee: usize,
    pub adversary: usize,
    /// Batches this match trains for.
    pub batches: usize,
}

#[derive(Debug, Clone)]
pub struct PairingPlan {
    pub strategy: Strategy,
    pub k: usize,
    pub matches: Vec<Match>,
    /// Frozen adversaries for discriminator trainees.
    pub generator_pool: Vec<Genome>,
    /// Frozen adversaries for generator trainees.
    pub discriminator_pool: Vec<Genome>,
}

impl PairingPlan {
    pub fn matches_for(&self, role: Role, trainee: usize) -> impl Iterator<Item = &Match> {
        self.matches.iter().filter(move |m| m.trainee_role == role && m.trainee == trainee)
    }

    pub fn pool(&self, trainee_role: Role) -> &[Genome] {
        match trainee_role {
            Role::Generator => &self.discriminator_pool,
            Role::Discriminator => &self.generator_pool,
        }
    }
}

/// Splits `total` batches over `pairings` matches: `⌊total/pairings⌋` each,
/// plus one for the first `total mod pairings`.
pub fn batch_budgets(total: usize, pairings: usize) -> Vec<usize> {
    if pairings == 0 {
        return Vec::new();
    }
    let (base, extra) = (total / pairings, total % pairings);
    (0..pairings).map(|i| base + usize::from(i < extra)).collect()
}

/// Evaluated populations of the previous generation, each sorted best first.
#[derive(Debug, Clone, Default)]
pub struct PreviousGeneration {
    pub generators: Vec<Genome>,
    pub discriminators: Vec<Genome>,
}

impl PreviousGeneration {
    pub fn from_evaluated(generators: &[Genome], discriminators: &[Genome]) -> Self {
        let sorted = |p: &[Genome]| {
            let mut v = p.to_vec();
            v.sort_by(|a, b| a.fitness_or_worst().total_cmp(&b.fitness_or_worst()).then(a.id.cmp(&b.id)));
            v
        };
        Self { generators: sorted(generators), discriminators: sorted(discriminators) }
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty() || self.discriminators.is_empty()
    }

    pub fn best(&self, role: Role, k: usize) -> &[Genome] {
        let v = match role {
            Role::Generator => &self.generators,
            Role::Discriminator => &self.discriminators,
        };
        &v[..k.min(v.len())]
    }
}

/// Plans the matches of one generation. Without a previous generation every
/// strategy other than all-vs-all falls back to random pairing against the
/// current populations. All-vs-best pairs each individual with the `k` best
/// adversaries of the previous generation; random draws `k` distinct
/// adversaries; all-vs-all uses every adversary. `k` is capped at the pool
/// size, and each trainee's `batches_per_gen` budget is split across its
/// matches.
pub fn plan_pairings(
    generators: &[Genome],
    discriminators: &[Genome],
    previous: &PreviousGeneration,
    strategy: Strategy,
    k: usize,
    batches_per_gen: usize,
    rng: &mut impl Rng,
) -> PairingPlan {
    let first = previous.is_empty();
    let effective = match (strategy, first) {
        (Strategy::AllVsBest, true) => Strategy::Random,
        (s, _) => s,
    };
    let (generator_pool, discriminator_pool) = match (effective, first) {
        (_, true) => (generators.to_vec(), discriminators.to_vec()),
        (Strategy::AllVsBest, false) => (previous.best(Role::Generator, k).to_vec(), previous.best(Role::Discriminator, k).to_vec()),
        (_, false) => (previous.generators.clone(), previous.discriminators.clone()),
    };
    let mut matches = Vec::new();
    for (role, trainees, pool) in
        [(Role::Generator, generators.len(), discriminator_pool.len()), (Role::Discriminator, discriminators.len(), generator_pool.len())]
    {
        for t in 0..trainees {
            let adversaries: Vec<usize> = match effective {
                Strategy::AllVsBest => (0..k.min(pool)).collect(),
                Strategy::Random => index::sample(rng, pool, k.min(pool)).into_vec(),
                Strategy::AllVsAll => (0..pool).collect(),
            };
            for (a, b) in adversaries.iter().zip(batch_budgets(batches_per_gen, adversaries.len())) {
                matches.push(Match { trainee_role: role, trainee: t, adversary: *a, batches: b });
            }
        }
    }
    PairingPlan { strategy: effective, k, matches, generator_pool, discriminator_pool }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub name: OptimizerName,
    pub learning_rate: f64,
    /// Carry each layer's optimizer state across generations together with
    /// its parameters.
    pub persist_state: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Rmsprop,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { name: OptimizerName::Rmsprop, learning_rate: 0.001, persist_state: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub losses: Vec<f64>,
    pub diverged: bool,
}

fn latent(rows: usize, dim: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, dim, (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Trains a discriminator against a frozen generator on the given real
/// batches, one optimizer step per batch. Returns the loss of every batch
/// (measured before its update).
pub fn train_discriminator(
    disc: &mut Network,
    generator: &Network,
    real_batches: &[Matrix],
    opt: &mut RmsProp,
    rng: &mut impl Rng,
) -> TrainStats {
    let mut stats = TrainStats::default();
    for real in real_batches {
        let fake = generator.forward(&latent(real.rows, generator.input_width, rng));
        let tr = disc.forward_trace(real);
        let tf = disc.forward_trace(&fake);
        let (loss, gr, gf) = discriminator_loss_grad(&tr.output().data, &tf.output().data);
        if !loss.is_finite() || !fake.is_finite() {
            stats.diverged = true;
            break;
        }
        stats.losses.push(loss);
        let (_, mut grads) = disc.backward(&tr, &Matrix::from_vec(real.rows, 1, gr), true);
        let (_, gfake) = disc.backward(&tf, &Matrix::from_vec(fake.rows, 1, gf), true);
        for (a, b) in grads.per_op.iter_mut().zip(gfake.per_op) {
            if let (Some(a), Some(b)) = (a.as_mut(), b) {
                a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
            }
        }
        opt.step(disc, &grads);
    }
    stats
}

/// Trains a generator through a frozen discriminator for `batches` steps of
/// `batch_size` latent vectors.
pub fn train_generator(
    generator: &mut Network,
    disc: &Network,
    batches: usize,
    batch_size: usize,
    opt: &mut RmsProp,
    rng: &mut impl Rng,
) -> TrainStats {
    let mut stats = TrainStats::default();
    for _ in 0..batches {
        let z = latent(batch_size, generator.input_width, rng);
        let tg = generator.forward_trace(&z);
        let td = disc.forward_trace(tg.output());
        let (loss, gp) = generator_loss_grad(&td.output().data);
        if !loss.is_finite() || !tg.output().is_finite() {
            stats.diverged = true;
            break;
        }
        stats.losses.push(loss);
        let (gx, _) = disc.backward(&td, &Matrix::from_vec(batch_size, 1, gp), false);
        let (_, grads) = generator.backward(&tg, &gx, true);
        opt.step(generator, &grads);
    }
    stats
}

/// Runs one pairing of `batches` steps, updating only the trainee.
/// Discriminator trainees consume the first `batches` of `real_batches`.
#[allow(clippy::too_many_arguments)]
pub fn train_pairing(
    trainee: &mut Network,
    trainee_role: Role,
    adversary: &Network,
    real_batches: &[Matrix],
    batches: usize,
    batch_size: usize,
    opt: &mut RmsProp,
    rng: &mut impl Rng,
) -> TrainStats {
    match trainee_role {
        Role::Discriminator => train_discriminator(trainee, adversary, &real_batches[..batches.min(real_batches.len())], opt, rng),
        Role::Generator => train_generator(trainee, adversary, batches, batch_size, opt, rng),
    }
}

/// Everything `evaluate_generation` needs besides the populations.
pub struct EvalContext<'a> {
    pub seed: u64,
    pub generation: u64,
    pub sample_shape: SampleShape,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub fid_samples: usize,
    pub extractor: &'a dyn FeatureExtractor,
    pub real_stats: &'a GaussianStats,
    pub parallel: bool,
}

impl EvalContext<'_> {
    pub fn phenotype(&self, genome: &Genome) -> Result<Network, Error> {
        let plan = infer_shapes(genome, self.sample_shape, self.latent_dim, self.base_channels)?;
        let mut rng = rng::stream(self.seed, &[tag::BUILD, self.generation, genome.id]);
        Ok(build_phenotype(genome, &plan, &mut rng).network)
    }
}

/// Per-individual outcome of one generation's training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub losses: Vec<f64>,
    pub diverged: bool,
}

fn run_trainee(
    ctx: &EvalContext<'_>,
    role: Role,
    index: usize,
    genome: &mut Genome,
    plan: &PairingPlan,
    adversaries: &HashMap<usize, Network>,
    real_batches: &[Matrix],
) -> Result<Outcome, Error> {
    let mut net = ctx.phenotype(genome)?;
    let mut opt = if ctx.optimizer.persist_state {
        RmsProp::resume(ctx.optimizer.learning_rate, &net, |slot| genome.params_for(slot))
    } else {
        RmsProp::new(ctx.optimizer.learning_rate)
    };
    let pool = plan.pool(role);
    let mut outcome = Outcome::default();
    let mut consumed = 0;
    for (ordinal, m) in plan.matches_for(role, index).enumerate() {
        let adversary = &adversaries[&m.adversary];
        let mut rng = rng::stream(ctx.seed, &[tag::TRAIN, ctx.generation, genome.id, pool[m.adversary].id, ordinal as u64]);
        let real = match role {
            Role::Discriminator => &real_batches[consumed..consumed + m.batches],
            Role::Generator => &[][..],
        };
        consumed += m.batches;
        let stats = train_pairing(&mut net, role, adversary, real, m.batches, ctx.batch_size, &mut opt, &mut rng);
        outcome.losses.extend(stats.losses);
        if stats.diverged || !net.params_finite() {
            outcome.diverged = true;
            break;
        }
    }
    if outcome.diverged {
        genome.fitness = Some(FITNESS_SENTINEL);
        return Ok(outcome);
    }
    genome.store_parameters(&net, ctx.optimizer.persist_state.then_some(&opt));
    genome.fitness = Some(match role {
        Role::Discriminator => {
            if outcome.losses.is_empty() {
                // No batches were scheduled: score the untouched network on
                // one batch from its first adversary.
                match plan.matches_for(role, index).next() {
                    Some(m) => {
                        let mut rng = rng::stream(ctx.seed, &[tag::FID, ctx.generation, genome.id]);
                        let gen = &adversaries[&m.adversary];
                        let fake = gen.forward(&latent(ctx.batch_size, gen.input_width, &mut rng));
                        discriminator_loss(&[], &net.forward(&fake).data)
                    }
                    None => FITNESS_SENTINEL,
                }
            } else {
                outcome.losses.iter().sum::<f64>() / outcome.losses.len() as f64
            }
        }
        Role::Generator => {
            let mut rng = rng::stream(ctx.seed, &[tag::FID, ctx.generation, genome.id]);
            fitness::generator_fitness(&net, ctx.extractor, ctx.real_stats, ctx.fid_samples, &mut rng).unwrap_or(FITNESS_SENTINEL)
        }
    });
    Ok(outcome)
}

fn build_pool(ctx: &EvalContext<'_>, pool: &[Genome], used: impl Iterator<Item = usize>) -> Result<HashMap<usize, Network>, Error> {
    let mut out = HashMap::new();
    for i in used {
        if let std::collections::hash_map::Entry::Vacant(e) = out.entry(i) {
            e.insert(ctx.phenotype(&pool[i])?);
        }
    }
    Ok(out)
}

/// Executes every match of `plan`, stores trained parameters back into the
/// genomes and assigns fitness: the mean per-batch discriminator loss for
/// discriminators, the FID after training for generators. `real_batches[i]`
/// holds the real batches of discriminator `i` for this generation.
pub fn evaluate_generation(
    ctx: &EvalContext<'_>,
    generators: &mut [Genome],
    discriminators: &mut [Genome],
    plan: &PairingPlan,
    real_batches: &[Vec<Matrix>],
) -> Result<(Vec<Outcome>, Vec<Outcome>), Error> {
    assert_eq!(real_batches.len(), discriminators.len(), "one batch list per discriminator");
    let disc_pool =
        build_pool(ctx, &plan.discriminator_pool, plan.matches.iter().filter(|m| m.trainee_role == Role::Generator).map(|m| m.adversary))?;
    let gen_pool =
        build_pool(ctx, &plan.generator_pool, plan.matches.iter().filter(|m| m.trainee_role == Role::Discriminator).map(|m| m.adversary))?;

    let run_g = |(i, g): (usize, &mut Genome)| run_trainee(ctx, Role::Generator, i, g, plan, &disc_pool, &[]);
    let run_d = |(i, d): (usize, &mut Genome)| run_trainee(ctx, Role::Discriminator, i, d, plan, &gen_pool, &real_batches[i]);
    let (g_out, d_out): (Result<Vec<_>, _>, Result<Vec<_>, _>) = if ctx.parallel {
        (generators.par_iter_mut().enumerate().map(run_g).collect(), discriminators.par_iter_mut().enumerate().map(run_d).collect())
    } else {
        (generators.iter_mut().enumerate().map(run_g).collect(), discriminators.iter_mut().enumerate().map(run_d).collect())
    };
    Ok((g_out?, d_out?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{IdGen, SearchSpace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[allow(clippy::approx_constant)]
    fn loss_values() {
        assert!((discriminator_loss(&[0.5], &[0.5]) - 1.3863).abs() < 1e-4);
        assert!((discriminator_loss(&[0.9], &[0.1]) - 0.2107).abs() < 1e-4);
        assert!(discriminator_loss(&[1.0], &[0.0]) < 1e-6);
        assert!((generator_loss(&[0.5]) - 0.6931).abs() < 1e-4);
        assert!((generator_loss(&[0.25]) - 1.3863).abs() < 1e-4);
        assert!(generator_loss(&[1.0]) < 1e-6);
        assert!(generator_loss(&[0.0]).is_finite());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let real = [0.3, 0.8, 0.55];
        let fake = [0.1, 0.45];
        let (_, gr, gf) = discriminator_loss_grad(&real, &fake);
        let h = 1e-6;
        for i in 0..real.len() {
            let (mut up, mut dn) = (real, real);
            up[i] += h;
            dn[i] -= h;
            let fd = (discriminator_loss(&up, &fake) - discriminator_loss(&dn, &fake)) / (2.0 * h);
            assert!((fd - gr[i]).abs() < 1e-6);
        }
        for i in 0..fake.len() {
            let (mut up, mut dn) = (fake, fake);
            up[i] += h;
            dn[i] -= h;
            let fd = (discriminator_loss(&real, &up) - discriminator_loss(&real, &dn)) / (2.0 * h);
            assert!((fd - gf[i]).abs() < 1e-6);
        }
        let (_, g) = generator_loss_grad(&fake);
        let fd = (generator_loss(&[0.1 + h, 0.45]) - generator_loss(&[0.1 - h, 0.45])) / (2.0 * h);
        assert!((fd - g[0]).abs() < 1e-6);
    }

    #[test]
    fn budgets() {
        assert_eq!(batch_budgets(20, 3), vec![7, 7, 6]);
        assert_eq!(batch_budgets(20, 1), vec![20]);
        assert_eq!(batch_budgets(20, 0), Vec::<usize>::new());
        for k in 1..=25 {
            assert_eq!(batch_budgets(20, k).iter().sum::<usize>(), 20);
        }
    }

    fn population(role: Role, n: usize, ids: &mut IdGen, rng: &mut ChaCha8Rng) -> Vec<Genome> {
        let space = SearchSpace::default();
        let mut lin = IdGen::default();
        (0..n).map(|_| crate::genome::new_random_genome(role, &space, ids, &mut lin, rng)).collect()
    }

    #[test]
    fn pairing_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ids = IdGen::default();
        let mut gens = population(Role::Generator, 20, &mut ids, &mut rng);
        let mut discs = population(Role::Discriminator, 20, &mut ids, &mut rng);
        let first = plan_pairings(&gens, &discs, &PreviousGeneration::default(), Strategy::AllVsBest, 3, 20, &mut rng);
        assert_eq!(first.strategy, Strategy::Random);
        assert_eq!(first.matches.len(), 120);

        for (i, g) in gens.iter_mut().enumerate() {
            g.fitness = Some(i as f64);
        }
        for (i, d) in discs.iter_mut().enumerate() {
            d.fitness = Some(100.0 - i as f64);
        }
        let prev = PreviousGeneration::from_evaluated(&gens, &discs);
        let plan = plan_pairings(&gens, &discs, &prev, Strategy::AllVsBest, 3, 20, &mut rng);
        assert_eq!(plan.strategy, Strategy::AllVsBest);
        let g_matches = plan.matches.iter().filter(|m| m.trainee_role == Role::Generator).count();
        assert_eq!((g_matches, plan.matches.len() - g_matches), (60, 60));
        assert_eq!(plan.discriminator_pool[0].fitness, Some(81.0));
        assert_eq!(plan.generator_pool[0].fitness, Some(0.0));
        for t in 0..20 {
            assert_eq!(plan.matches_for(Role::Generator, t).map(|m| m.batches).sum::<usize>(), 20);
        }

        let all = plan_pairings(&gens[..3], &discs[..2], &PreviousGeneration::default(), Strategy::AllVsAll, 3, 20, &mut rng);
        assert_eq!(all.matches.iter().filter(|m| m.trainee_role == Role::Generator).count(), 6);
        assert_eq!(all.matches.iter().filter(|m| m.trainee_role == Role::Discriminator).count(), 6);
    }

    #[test]
    fn k_is_capped_by_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ids = IdGen::default();
        let gens = population(Role::Generator, 4, &mut ids, &mut rng);
        let discs = population(Role::Discriminator, 2, &mut ids, &mut rng);
        let plan = plan_pairings(&gens, &discs, &PreviousGeneration::default(), Strategy::Random, 5, 20, &mut rng);
        assert_eq!(plan.matches_for(Role::Generator, 0).count(), 2);
        assert_eq!(plan.matches_for(Role::Discriminator, 0).count(), 4);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("all_vs_best".parse::<Strategy>().unwrap(), Strategy::AllVsBest);
        assert!("best".parse::<Strategy>().is_err());
    }
}
