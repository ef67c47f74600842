use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use coegan::data::{nearest_center, synthetic_ring};
use coegan::evaluation::batch_budgets;
use coegan::fitness::{estimate_gaussian, fid, GaussianStats};
use coegan::genome::{infer_shapes, random_genome_of_length, validate, Genome, IdGen, Role, SampleShape, SearchSpace};
use coegan::nn::Matrix;
use coegan::speciation::{allocate_offspring, genome_distance, tournament_select};
use coegan::variation::{crossover, mutate, MutationRates};

const MNIST: SampleShape = SampleShape::Image { channels: 1, height: 28, width: 28 };

fn role(generator: bool) -> Role {
    if generator {
        Role::Generator
    } else {
        Role::Discriminator
    }
}

fn genome(role: Role, len: usize, seed: u64) -> Genome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ids, mut lineage) = (IdGen::default(), IdGen::default());
    random_genome_of_length(role, &SearchSpace::default(), len, &mut ids, &mut lineage, &mut rng)
}

fn psd(d: usize, seed: u64) -> GaussianStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cov = &b * b.transpose();
    GaussianStats { mean: DVector::from_fn(d, |_, _| rng.sample(StandardNormal)), cov: (&cov + cov.transpose()) * 0.5 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_genomes_are_valid_and_shaped(gen in any::<bool>(), len in 1usize..=4, seed in any::<u64>()) {
        let g = genome(role(gen), len, seed);
        prop_assert!(validate(&g, &SearchSpace::default()).is_empty());
        let plan = infer_shapes(&g, MNIST, 100, 32);
        prop_assert!(plan.is_ok(), "{:?}", plan.err());
    }

    #[test]
    fn variation_keeps_genomes_valid(gen in any::<bool>(), la in 1usize..=4, lb in 1usize..=4, seed in any::<u64>()) {
        let space = SearchSpace::default();
        let a = genome(role(gen), la, seed);
        let b = genome(role(gen), lb, seed ^ 0x5555);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lineage = IdGen::starting_at(1000);
        let rates = MutationRates { add: 0.7, remove: 0.7, change: 0.7 };
        for child in [mutate(&a, &rates, &space, &mut lineage, &mut rng), crossover(&a, &b, &space, &mut rng)] {
            prop_assert!(validate(&child, &space).is_empty());
            prop_assert!(!child.is_empty());
            prop_assert!(infer_shapes(&child, MNIST, 100, 32).is_ok());
        }
    }

    #[test]
    fn distance_is_a_metric(la in 1usize..=4, lb in 1usize..=4, lc in 1usize..=4, seed in any::<u64>()) {
        let a = genome(Role::Discriminator, la, seed);
        let b = genome(Role::Discriminator, lb, seed.wrapping_add(1));
        let c = genome(Role::Discriminator, lc, seed.wrapping_add(2));
        prop_assert_eq!(genome_distance(&a, &a), 0);
        prop_assert_eq!(genome_distance(&a, &b), genome_distance(&b, &a));
        prop_assert!(genome_distance(&a, &c) <= genome_distance(&a, &b) + genome_distance(&b, &c));
        prop_assert!(genome_distance(&a, &b) <= la + lb);
    }

    #[test]
    fn allocation_fills_population(averages in prop::collection::vec(0.0f64..100.0, 1..8), extra in 0usize..40) {
        let size = averages.len() + extra;
        let slots = allocate_offspring(&averages, size).unwrap();
        prop_assert_eq!(slots.iter().sum::<usize>(), size);
        prop_assert!(slots.iter().all(|&s| s >= 1));
    }

    #[test]
    fn fid_is_symmetric_and_non_negative(d in 1usize..6, s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (psd(d, s1), psd(d, s2));
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-8 * a.cov.norm().max(1.0));
    }

    #[test]
    fn budgets_split_evenly(total in 0usize..100, k in 1usize..10) {
        let b = batch_budgets(total, k);
        prop_assert_eq!(b.len(), k);
        prop_assert_eq!(b.iter().sum::<usize>(), total);
        prop_assert!(b.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }
}

/// With three members of fitness {1,2,3} and two draws with replacement, the
/// best member wins unless both draws miss it: 1 - (2/3)^2 = 5/9.
#[test]
fn tournament_win_rate_matches_enumeration() {
    let members: Vec<Genome> = [1.0, 2.0, 3.0]
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let mut g = genome(Role::Generator, 1, i as u64);
            g.fitness = Some(f);
            g
        })
        .collect();
    let mut pairs = 0;
    let mut best_wins = 0;
    for i in 0..3 {
        for j in 0..3 {
            pairs += 1;
            best_wins += usize::from(i == 0 || j == 0);
        }
    }
    let expected = best_wins as f64 / pairs as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let wins = (0..10_000).filter(|_| tournament_select(&members, 2, &mut rng).fitness == Some(1.0)).count();
    assert_abs_diff_eq!(wins as f64 / 10_000.0, expected, epsilon = 0.02);
}

#[test]
fn ring_modes_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ds = synthetic_ring(8, 2.0, 0.05, 8000, &mut rng);
    let centers = ds.centers.clone().unwrap();
    let mut counts = [0f64; 8];
    for r in 0..ds.len() {
        let row = ds.samples.row(r);
        counts[nearest_center([row[0], row[1]], &centers).0] += 1.0;
    }
    let chi2: f64 = counts.iter().map(|c| (c - 1000.0).powi(2) / 1000.0).sum();
    let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

#[test]
fn gaussian_estimate_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mu, sd, rho) = ([1.0, -2.0], [2.0, 0.5], 0.6);
    let n = 100_000;
    let data: Vec<f64> = (0..n)
        .flat_map(|_| {
            let (z1, z2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            let x = mu[0] + sd[0] * z1;
            let y = mu[1] + sd[1] * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
            [x, y]
        })
        .collect();
    let stats = estimate_gaussian(&Matrix::from_vec(n, 2, data)).unwrap();
    let nf = n as f64;
    for i in 0..2 {
        assert!((stats.mean[i] - mu[i]).abs() < 3.0 * sd[i] / nf.sqrt());
        let var = sd[i] * sd[i];
        assert!((stats.cov[(i, i)] - var).abs() < 3.0 * var * (2.0 / nf).sqrt());
    }
    let cxy = rho * sd[0] * sd[1];
    let se = ((var_product(sd) + cxy * cxy) / nf).sqrt();
    assert!((stats.cov[(0, 1)] - cxy).abs() < 3.0 * se);
}

fn var_product(sd: [f64; 2]) -> f64 {
    sd[0] * sd[0] * sd[1] * sd[1]
}

#[test]
fn replayed_data_scores_near_zero_and_a_point_mass_scores_worse() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let real = synthetic_ring(8, 2.0, 0.05, 10_000, &mut rng);
    let real_stats = estimate_gaussian(&real.samples).unwrap();
    let replay = synthetic_ring(8, 2.0, 0.05, 1000, &mut rng);
    let replay_fid = fid(&real_stats, &estimate_gaussian(&replay.samples).unwrap()).unwrap();
    assert!(replay_fid < 0.05, "{replay_fid}");
    let point = Matrix::from_vec(1000, 2, [0.3, 0.1].repeat(1000));
    let point_fid = fid(&real_stats, &estimate_gaussian(&point).unwrap()).unwrap();
    assert!(point_fid > replay_fid);
}
