//! Mutation, section-boundary crossover and parameter transfer.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::genome::{Activation, Gene, Genome, IdGen, LayerType, SearchSpace, ShapePlan};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MutationRates {
    pub add: f64,
    pub remove: f64,
    pub change: f64,
}

impl Default for MutationRates {
    fn default() -> Self {
        Self { add: 0.30, remove: 0.10, change: 0.10 }
    }
}

impl MutationRates {
    pub const NONE: MutationRates = MutationRates { add: 0.0, remove: 0.0, change: 0.0 };
}

/// Returns a mutated copy of `genome`. Add, remove and change fire
/// independently, in that order; sub-mutations that cannot apply (add at the
/// genome limit, remove of the last gene) are skipped.
///
/// The copy keeps the parent's id and parameters and has no fitness.
pub fn mutate(genome: &Genome, rates: &MutationRates, space: &SearchSpace, lineage: &mut IdGen, rng: &mut impl Rng) -> Genome {
    let mut child = genome.clone();
    child.fitness = None;
    child.reused_gene_count = 0;

    if rng.random_bool(rates.add) && child.genes.len() < space.genome_limit {
        let gene = space.random_gene(child.role, lineage, rng);
        let slots = space.insertion_slots(child.role, &child.genes, gene.layer_type);
        let at = rng.random_range(slots);
        child.genes.insert(at, gene);
    }

    if rng.random_bool(rates.remove) && child.genes.len() > 1 {
        let at = rng.random_range(0..child.genes.len());
        child.genes.remove(at);
    }

    if rng.random_bool(rates.change) && !child.genes.is_empty() {
        let at = rng.random_range(0..child.genes.len());
        let gene = &mut child.genes[at];
        if rng.random_bool(0.5) {
            gene.activation = *Activation::ALL.choose(rng).unwrap();
        }
        if rng.random_bool(0.5) {
            let (lo, hi) = space.units_range(gene.layer_type);
            let units = rng.random_range(lo..=hi);
            if units != gene.units {
                gene.units = units;
                gene.params = None;
                gene.lineage_id = lineage.next_id();
            }
        }
    }
    child
}

fn split_sections(g: &Genome) -> (Vec<Gene>, Vec<Gene>) {
    let (spatial, linear): (Vec<Gene>, Vec<Gene>) = g.genes.iter().cloned().partition(|x| x.layer_type.is_spatial());
    (spatial, linear)
}

fn join(role: crate::genome::Role, spatial: Vec<Gene>, linear: Vec<Gene>) -> Vec<Gene> {
    match role {
        crate::genome::Role::Discriminator => spatial.into_iter().chain(linear).collect(),
        crate::genome::Role::Generator => linear.into_iter().chain(spatial).collect(),
    }
}

/// Cuts both parents at the boundary between their spatial and linear
/// sections and joins the spatial section of one with the linear section of
/// the other. Genes carry their parameters along; the child is truncated from
/// the tail to the genome limit. If the drawn orientation would be empty the
/// other orientation is used.
pub fn crossover(a: &Genome, b: &Genome, space: &SearchSpace, rng: &mut impl Rng) -> Genome {
    assert_eq!(a.role, b.role, "crossover between roles");
    let (a_sp, a_lin) = split_sections(a);
    let (b_sp, b_lin) = split_sections(b);
    let (first, second) = if rng.random_bool(0.5) { ((a_sp, b_lin), (b_sp, a_lin)) } else { ((b_sp, a_lin), (a_sp, b_lin)) };
    let (sp, lin) = if first.0.is_empty() && first.1.is_empty() { second } else { first };
    let mut genes = join(a.role, sp, lin);
    genes.truncate(space.genome_limit);
    let mut child = Genome::new(a.id, a.role, genes);
    child.adapter_params = a.adapter_params.clone();
    child.head_params = a.head_params.clone();
    child
}

/// Keeps the parameters of every child gene that descends from a parent gene
/// (same lineage id) and whose stored signature equals the child's realized
/// layer signature. All other genes are reset to untrained. The adapter and
/// head keep their parameters only on an exact signature match as well.
pub fn transfer_parameters(parents: &[&Genome], mut child: Genome, plan: &ShapePlan) -> Genome {
    assert_eq!(child.genes.len(), plan.genes.len(), "shape plan does not belong to the child");
    let lineages: HashSet<u64> = parents.iter().flat_map(|p| p.genes.iter().map(|g| g.lineage_id)).collect();
    let mut reused = 0;
    for (gene, shape) in child.genes.iter_mut().zip(&plan.genes) {
        let keep = gene.params.as_ref().is_some_and(|p| lineages.contains(&gene.lineage_id) && p.signature == shape.signature);
        if keep {
            reused += 1;
        } else {
            gene.params = None;
        }
    }
    if child.adapter_params.as_ref().is_some_and(|p| plan.adapter.is_none_or(|a| a.signature != p.signature)) {
        child.adapter_params = None;
    }
    if child.head_params.as_ref().is_some_and(|p| p.signature != plan.head.signature) {
        child.head_params = None;
    }
    child.reused_gene_count = reused;
    child
}

/// Number of genes in `genome` of the given type.
pub fn count_layers(genome: &Genome, t: LayerType) -> usize {
    genome.genes.iter().filter(|g| g.layer_type == t).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{build_phenotype, infer_shapes, validate, Role, SampleShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gene(t: LayerType, a: Activation, units: usize, id: u64) -> Gene {
        Gene { layer_type: t, activation: a, units, lineage_id: id, params: None }
    }

    const FLAT: SampleShape = SampleShape::Flat { features: 2 };

    fn trained(mut g: Genome, sample: SampleShape, rng: &mut ChaCha8Rng) -> Genome {
        let plan = infer_shapes(&g, sample, 8, 4).unwrap();
        let p = build_phenotype(&g, &plan, rng);
        g.store_parameters(&p.network, None);
        g
    }

    #[test]
    fn zero_rates_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let space = SearchSpace { spatial: false, ..Default::default() };
        let g = Genome::new(
            3,
            Role::Generator,
            vec![gene(LayerType::Linear, Activation::ReLU, 64, 0), gene(LayerType::Linear, Activation::Tanh, 40, 1)],
        );
        let g = trained(g, FLAT, &mut rng);
        let child = mutate(&g, &MutationRates::NONE, &space, &mut IdGen::starting_at(10), &mut rng);
        assert!(child.same_structure(&g));
        assert_eq!(child.genes, g.genes);
    }

    #[test]
    fn add_at_limit_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let space = SearchSpace { spatial: false, ..Default::default() };
        let g = Genome::new(0, Role::Discriminator, (0..4).map(|i| gene(LayerType::Linear, Activation::ReLU, 64, i)).collect());
        let rates = MutationRates { add: 1.0, remove: 0.0, change: 0.0 };
        for _ in 0..20 {
            assert_eq!(mutate(&g, &rates, &space, &mut IdGen::starting_at(10), &mut rng).len(), 4);
        }
    }

    #[test]
    fn size_change_clears_only_that_gene() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let space = SearchSpace { spatial: false, genome_limit: 1, ..Default::default() };
        let g = trained(Genome::new(0, Role::Generator, vec![gene(LayerType::Linear, Activation::ReLU, 64, 0)]), FLAT, &mut rng);
        let rates = MutationRates { add: 0.0, remove: 0.0, change: 1.0 };
        let mut seen_size_change = false;
        for _ in 0..50 {
            let c = mutate(&g, &rates, &space, &mut IdGen::starting_at(100), &mut rng);
            if c.genes[0].units != 64 {
                seen_size_change = true;
                assert!(c.genes[0].params.is_none());
                assert!(c.genes[0].lineage_id >= 100);
            } else {
                assert!(c.genes[0].params.is_some());
                assert_eq!(c.genes[0].lineage_id, 0);
            }
        }
        assert!(seen_size_change);

        // Sibling genes keep their parameters.
        let space = SearchSpace { spatial: false, ..Default::default() };
        let g = trained(
            Genome::new(
                0,
                Role::Generator,
                vec![
                    gene(LayerType::Linear, Activation::ReLU, 64, 0),
                    gene(LayerType::Linear, Activation::ReLU, 65, 1),
                    gene(LayerType::Linear, Activation::ReLU, 66, 2),
                ],
            ),
            FLAT,
            &mut rng,
        );
        for _ in 0..50 {
            let c = mutate(&g, &rates, &space, &mut IdGen::starting_at(100), &mut rng);
            for (a, b) in c.genes.iter().zip(&g.genes) {
                if a.units == b.units {
                    assert_eq!(a.params, b.params);
                }
            }
        }
    }

    #[test]
    fn crossover_cuts_at_section_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let space = SearchSpace::default();
        let a = Genome::new(
            0,
            Role::Discriminator,
            vec![gene(LayerType::Conv, Activation::ReLU, 16, 1), gene(LayerType::Linear, Activation::ReLU, 64, 2)],
        );
        let b = Genome::new(
            1,
            Role::Discriminator,
            vec![gene(LayerType::Conv, Activation::ELU, 32, 3), gene(LayerType::Linear, Activation::Tanh, 128, 4)],
        );
        let mut seen = HashSet::new();
        for _ in 0..40 {
            let c = crossover(&a, &b, &space, &mut rng);
            assert!(validate(&c, &space).is_empty());
            seen.insert(c.genes.iter().map(|g| g.lineage_id).collect::<Vec<_>>());
        }
        assert_eq!(seen, HashSet::from([vec![1, 4], vec![3, 2]]));

        let same = crossover(&a, &a, &space, &mut rng);
        assert!(same.same_structure(&a));
    }

    #[test]
    fn crossover_truncates_and_never_empties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let space = SearchSpace::default();
        let a = Genome::new(0, Role::Generator, vec![gene(LayerType::Linear, Activation::ReLU, 64, 1)]);
        let b = Genome::new(1, Role::Generator, vec![gene(LayerType::Deconv, Activation::ReLU, 16, 2)]);
        for _ in 0..20 {
            let c = crossover(&a, &b, &space, &mut rng);
            assert!(!c.is_empty());
            assert!(validate(&c, &space).is_empty());
        }
        let long = Genome::new(0, Role::Generator, (0..4).map(|i| gene(LayerType::Linear, Activation::ReLU, 64, i)).collect());
        let deep = Genome::new(1, Role::Generator, (10..14).map(|i| gene(LayerType::Deconv, Activation::ReLU, 16, i)).collect());
        for _ in 0..20 {
            assert_eq!(crossover(&long, &deep, &space, &mut rng).len(), 4);
        }
    }

    #[test]
    fn transfer_drops_shape_changed_downstream_gene() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let parent = trained(
            Genome::new(
                0,
                Role::Discriminator,
                vec![gene(LayerType::Linear, Activation::ReLU, 64, 0), gene(LayerType::Linear, Activation::ReLU, 32, 1)],
            ),
            FLAT,
            &mut rng,
        );
        // Insert a 48-wide gene between them: the downstream gene now reads 48
        // features instead of 64.
        let mut child = parent.clone();
        child.genes.insert(1, gene(LayerType::Linear, Activation::ELU, 48, 7));
        let plan = infer_shapes(&child, FLAT, 8, 4).unwrap();
        let child = transfer_parameters(&[&parent], child, &plan);
        assert!(child.genes[0].params.is_some());
        assert!(child.genes[1].params.is_none());
        assert!(child.genes[2].params.is_none());
        assert_eq!(child.reused_gene_count, 1);
        assert!(child.head_params.is_some());

        let plan = infer_shapes(&parent, FLAT, 8, 4).unwrap();
        let same = transfer_parameters(&[&parent], parent.clone(), &plan);
        assert_eq!(same.reused_gene_count, 2);
    }

    #[test]
    fn transfer_requires_shared_lineage() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let parent = trained(Genome::new(0, Role::Generator, vec![gene(LayerType::Linear, Activation::ReLU, 64, 0)]), FLAT, &mut rng);
        let mut stranger = parent.clone();
        stranger.genes[0].lineage_id = 99;
        let plan = infer_shapes(&stranger, FLAT, 8, 4).unwrap();
        let child = transfer_parameters(&[&parent], stranger, &plan);
        assert_eq!(child.reused_gene_count, 0);
    }
}
