//! Species partitioning, adaptive compatibility threshold, offspring
//! allocation and in-species tournament selection.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::genome::{Activation, Genome, IdGen, LayerType};
use crate::Error;

pub const INITIAL_THRESHOLD: f64 = 1.0;
pub const THRESHOLD_STEP: f64 = 0.5;
pub const WEIGHT_EPS: f64 = 1e-6;

fn gene_key_counts(g: &Genome) -> BTreeMap<(LayerType, Activation), i64> {
    let mut m = BTreeMap::new();
    for gene in &g.genes {
        *m.entry((gene.layer_type, gene.activation)).or_insert(0) += 1;
    }
    m
}

/// Number of genes present in only one of the two genomes, where genes are
/// identified by layer type and activation (size attributes and weights are
/// ignored). Computed as a multiset symmetric difference.
pub fn genome_distance(a: &Genome, b: &Genome) -> usize {
    let ca = gene_key_counts(a);
    let mut cb = gene_key_counts(b);
    let mut d = 0;
    for (k, n) in ca {
        let m = cb.remove(&k).unwrap_or(0);
        d += (n - m).unsigned_abs() as usize;
    }
    d + cb.values().map(|&m| m as usize).sum::<usize>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub id: u64,
    pub representative: Genome,
    pub members: Vec<Genome>,
}

impl Species {
    pub fn average_fitness(&self) -> f64 {
        self.members.iter().map(Genome::fitness_or_worst).sum::<f64>() / self.members.len() as f64
    }

    pub fn best(&self) -> Option<&Genome> {
        self.members.iter().min_by(|a, b| a.fitness_or_worst().total_cmp(&b.fitness_or_worst()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciationState {
    pub species: Vec<Species>,
    pub threshold: f64,
    pub target_species: usize,
}

impl SpeciationState {
    pub fn new(target_species: usize) -> Self {
        Self { species: Vec::new(), threshold: INITIAL_THRESHOLD, target_species }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.species.iter().map(|s| s.members.len()).collect()
    }

    pub fn member_count(&self) -> usize {
        self.species.iter().map(|s| s.members.len()).sum()
    }
}

/// Greedy NEAT-style assignment: each individual joins the first species
/// whose representative lies within the threshold, otherwise it founds a new
/// species. Afterwards empty species are dropped and every representative is
/// re-drawn from the species' current members.
pub fn assign_species(population: Vec<Genome>, state: &SpeciationState, species_ids: &mut IdGen, rng: &mut impl Rng) -> SpeciationState {
    let mut species: Vec<Species> =
        state.species.iter().map(|s| Species { id: s.id, representative: s.representative.clone(), members: Vec::new() }).collect();
    for g in population {
        match species.iter_mut().find(|s| genome_distance(&s.representative, &g) as f64 <= state.threshold) {
            Some(s) => s.members.push(g),
            None => species.push(Species { id: species_ids.next_id(), representative: g.clone(), members: vec![g] }),
        }
    }
    species.retain(|s| !s.members.is_empty());
    for s in &mut species {
        s.representative = s.members.choose(rng).expect("non-empty species").clone();
    }
    SpeciationState { species, threshold: state.threshold, target_species: state.target_species }
}

/// Nudges the threshold toward producing `target` species: up when there
/// are too many, down (clamped at zero) when there are too few.
pub fn adjust_threshold(threshold: f64, target: usize, observed: usize) -> f64 {
    use std::cmp::Ordering::*;
    match observed.cmp(&target) {
        Greater => threshold + THRESHOLD_STEP,
        Less => (threshold - THRESHOLD_STEP).max(0.0),
        Equal => threshold,
    }
}

/// Splits `population_size` offspring slots across species in proportion to
/// `1 / (average fitness + ε)`, using largest-remainder rounding and a floor
/// of one slot per species.
pub fn allocate_offspring(averages: &[f64], population_size: usize) -> Result<Vec<usize>, Error> {
    let s = averages.len();
    if s == 0 {
        return Ok(Vec::new());
    }
    if population_size < s {
        return Err(Error::Numeric(format!("{population_size} slots cannot cover {s} species")));
    }
    if let Some(bad) = averages.iter().find(|f| f.is_nan() || **f < 0.0) {
        return Err(Error::Numeric(format!("species average fitness {bad} is undefined or negative")));
    }
    let mut weights: Vec<f64> = averages.iter().map(|f| 1.0 / (f + WEIGHT_EPS)).collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        weights = vec![1.0; s];
    }
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| population_size as f64 * w / total).collect();
    let mut slots: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = slots.iter().sum();
    let mut order: Vec<usize> = (0..s).collect();
    // Largest fractional part first; ties go to the better (heavier) species.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(weights[b].total_cmp(&weights[a])).then(a.cmp(&b))
    });
    for &i in order.iter().take(population_size.saturating_sub(assigned)) {
        slots[i] += 1;
    }
    // One-slot floor: take from the largest allocation, lightest species first.
    while let Some(empty) = slots.iter().position(|&n| n == 0) {
        let max = *slots.iter().max().unwrap();
        let donor = (0..s).filter(|&i| slots[i] == max).min_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(b.cmp(&a))).unwrap();
        slots[donor] -= 1;
        slots[empty] += 1;
    }
    Ok(slots)
}

/// Draws `k` members uniformly with replacement and returns the one with the
/// lowest fitness (first drawn wins ties).
pub fn tournament_select<'a>(members: &'a [Genome], k: usize, rng: &mut impl Rng) -> &'a Genome {
    assert!(!members.is_empty(), "tournament over an empty species");
    (0..k.max(1))
        .map(|_| &members[rng.random_range(0..members.len())])
        .reduce(|best, g| if g.fitness_or_worst() < best.fitness_or_worst() { g } else { best })
        .unwrap()
}

/// One row of the per-generation species summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSummary {
    pub species_id: u64,
    pub size: usize,
    pub average_fitness: f64,
    pub threshold: f64,
}

pub fn summarize(state: &SpeciationState) -> Vec<SpeciesSummary> {
    state
        .species
        .iter()
        .map(|s| SpeciesSummary {
            species_id: s.id,
            size: s.members.len(),
            average_fitness: s.average_fitness(),
            threshold: state.threshold,
        })
        .collect()
}
