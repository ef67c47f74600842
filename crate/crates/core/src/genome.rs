//! Genes, genomes, structural validation, shape inference and phenotype
//! construction.
//!
//! A genome is a flat sequence of layer genes. Discriminators hold a
//! convolutional section followed by a linear section; generators hold a
//! linear section followed by a transposed-convolution section. Every
//! phenotype gets a fixed output head (and, for image generators, a reshape
//! adapter) that is not subject to evolution.

use std::fmt;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, Matrix, Network, Op, ParamSlot, RmsProp, Weights};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Discriminator,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::Generator => Role::Discriminator,
            Role::Discriminator => Role::Generator,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
        }
    }

    /// Layer types a genome of this role may contain.
    pub fn legal_layers(self, spatial: bool) -> &'static [LayerType] {
        match (self, spatial) {
            (_, false) => &[LayerType::Linear],
            (Role::Discriminator, true) => &[LayerType::Linear, LayerType::Conv],
            (Role::Generator, true) => &[LayerType::Linear, LayerType::Deconv],
        }
    }

    /// Position of a layer type's section: 0 for the leading section, 1 for
    /// the trailing one.
    fn section(self, t: LayerType) -> usize {
        match (self, t) {
            (Role::Discriminator, LayerType::Conv) => 0,
            (Role::Discriminator, _) => 1,
            (Role::Generator, LayerType::Linear) => 0,
            (Role::Generator, _) => 1,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerType {
    Linear,
    Conv,
    Deconv,
}

impl LayerType {
    pub fn is_spatial(self) -> bool {
        !matches!(self, LayerType::Linear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    LeakyReLU,
    ELU,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 5] = [Activation::ReLU, Activation::LeakyReLU, Activation::ELU, Activation::Sigmoid, Activation::Tanh];
}

/// Realized shape of a parametrized layer. Parameters may only move between
/// layers whose signatures are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSignature {
    Linear { inputs: usize, outputs: usize },
    Conv { in_channels: usize, out_channels: usize },
    Deconv { in_channels: usize, out_channels: usize },
    Pointwise { in_channels: usize, out_channels: usize },
}

impl fmt::Display for ShapeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeSignature::Linear { inputs, outputs } => write!(f, "linear_{inputs}x{outputs}"),
            ShapeSignature::Conv { in_channels, out_channels } => write!(f, "conv_{in_channels}x{out_channels}"),
            ShapeSignature::Deconv { in_channels, out_channels } => write!(f, "deconv_{in_channels}x{out_channels}"),
            ShapeSignature::Pointwise { in_channels, out_channels } => {
                write!(f, "pointwise_{in_channels}x{out_channels}")
            }
        }
    }
}

/// Trained weights and biases of one layer, tagged with the shape they were
/// trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub signature: ShapeSignature,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Optimizer running averages of squared gradients, weight entries then
    /// bias entries. Empty when no optimizer state was kept.
    pub square_avg: Vec<f64>,
}

/// One evolvable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gene {
    pub layer_type: LayerType,
    pub activation: Activation,
    /// Output features for linear genes, output channels for (de)convolutions.
    pub units: usize,
    pub lineage_id: u64,
    pub params: Option<Arc<LayerParams>>,
}

impl Gene {
    pub fn out_features(&self) -> Option<usize> {
        (!self.layer_type.is_spatial()).then_some(self.units)
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.layer_type.is_spatial().then_some(self.units)
    }

    pub fn same_structure(&self, other: &Gene) -> bool {
        self.layer_type == other.layer_type && self.activation == other.activation && self.units == other.units
    }
}

/// Monotone id source for genomes, lineages and species.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdGen {
    next: u64,
}

impl IdGen {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    pub fn next_id(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn peek(&self) -> u64 {
        self.next
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub id: u64,
    pub role: Role,
    pub genes: Vec<Gene>,
    /// Lower is better. `None` until evaluated.
    pub fitness: Option<f64>,
    /// Genes whose parameters were inherited when this genome was bred.
    pub reused_gene_count: usize,
    pub adapter_params: Option<Arc<LayerParams>>,
    pub head_params: Option<Arc<LayerParams>>,
}

impl Genome {
    pub fn new(id: u64, role: Role, genes: Vec<Gene>) -> Self {
        Self { id, role, genes, fitness: None, reused_gene_count: 0, adapter_params: None, head_params: None }
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }

    /// Fitness for ranking; unevaluated genomes rank last.
    pub fn fitness_or_worst(&self) -> f64 {
        self.fitness.unwrap_or(f64::INFINITY)
    }

    pub fn same_structure(&self, other: &Genome) -> bool {
        self.role == other.role
            && self.genes.len() == other.genes.len()
            && self.genes.iter().zip(&other.genes).all(|(a, b)| a.same_structure(b))
    }

    /// Parameters stored for one slot of the phenotype.
    pub fn params_for(&self, slot: ParamSlot) -> Option<&LayerParams> {
        match slot {
            ParamSlot::Gene(i) => self.genes.get(i)?.params.as_deref(),
            ParamSlot::Adapter => self.adapter_params.as_deref(),
            ParamSlot::Head => self.head_params.as_deref(),
        }
    }

    /// Copies trained parameters (and optimizer state, when given) out of a
    /// phenotype back into the genes, adapter and head.
    pub fn store_parameters(&mut self, net: &Network, opt: Option<&RmsProp>) {
        for (i, op) in net.ops.iter().enumerate() {
            let Some((slot, w)) = op.weights() else { continue };
            let mut params = w.to_params();
            if let Some(st) = opt.and_then(|o| o.state(i)) {
                params.square_avg = st.weight.iter().chain(&st.bias).copied().collect();
            }
            let p = Some(Arc::new(params));
            match slot {
                ParamSlot::Gene(i) => self.genes[i].params = p,
                ParamSlot::Adapter => self.adapter_params = p,
                ParamSlot::Head => self.head_params = p,
            }
        }
    }

    /// Short structural description, e.g. `conv16/relu-linear128/tanh`.
    pub fn describe(&self) -> String {
        self.genes
            .iter()
            .map(|g| {
                let t = match g.layer_type {
                    LayerType::Linear => "linear",
                    LayerType::Conv => "conv",
                    LayerType::Deconv => "deconv",
                };
                format!("{t}{}/{:?}", g.units, g.activation).to_lowercase()
            })
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Shape of one data sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleShape {
    Flat { features: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl SampleShape {
    pub fn width(&self) -> usize {
        match *self {
            SampleShape::Flat { features } => features,
            SampleShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, SampleShape::Image { .. })
    }

    fn tensor(&self) -> TensorShape {
        match *self {
            SampleShape::Flat { features } => TensorShape::Flat(features),
            SampleShape::Image { channels, height, width } => TensorShape::Spatial { channels, height, width },
        }
    }
}

/// Bounds of the architecture search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub genome_limit: usize,
    pub feature_range: (usize, usize),
    pub channel_range: (usize, usize),
    /// Whether convolutional genes are available (image data).
    pub spatial: bool,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self { genome_limit: 4, feature_range: (32, 1024), channel_range: (16, 128), spatial: true }
    }
}

impl SearchSpace {
    pub fn units_range(&self, t: LayerType) -> (usize, usize) {
        if t.is_spatial() {
            self.channel_range
        } else {
            self.feature_range
        }
    }

    pub fn random_gene(&self, role: Role, ids: &mut IdGen, rng: &mut impl Rng) -> Gene {
        let layer_type = *role.legal_layers(self.spatial).choose(rng).expect("non-empty layer set");
        self.random_gene_of(layer_type, ids, rng)
    }

    pub fn random_gene_of(&self, layer_type: LayerType, ids: &mut IdGen, rng: &mut impl Rng) -> Gene {
        let (lo, hi) = self.units_range(layer_type);
        Gene {
            layer_type,
            activation: *Activation::ALL.choose(rng).unwrap(),
            units: rng.random_range(lo..=hi),
            lineage_id: ids.next_id(),
            params: None,
        }
    }

    /// Insertion indices at which a gene of `layer_type` keeps section order.
    pub fn insertion_slots(&self, role: Role, genes: &[Gene], layer_type: LayerType) -> std::ops::RangeInclusive<usize> {
        let leading = genes.iter().take_while(|g| role.section(g.layer_type) == 0).count();
        if role.section(layer_type) == 0 {
            0..=leading
        } else {
            leading..=genes.len()
        }
    }
}

/// A fresh genome holding a single random role-legal gene.
pub fn new_random_genome(role: Role, space: &SearchSpace, ids: &mut IdGen, lineage: &mut IdGen, rng: &mut impl Rng) -> Genome {
    assert!(space.genome_limit >= 1, "genome limit must be at least 1");
    let gene = space.random_gene(role, lineage, rng);
    Genome::new(ids.next_id(), role, vec![gene])
}

/// A genome of `len` random role-legal genes in section order, `len`
/// capped at the genome limit. Used to sample the search space.
pub fn random_genome_of_length(
    role: Role,
    space: &SearchSpace,
    len: usize,
    ids: &mut IdGen,
    lineage: &mut IdGen,
    rng: &mut impl Rng,
) -> Genome {
    let len = len.clamp(1, space.genome_limit.max(1));
    let mut genes: Vec<Gene> = (0..len).map(|_| space.random_gene(role, lineage, rng)).collect();
    genes.sort_by_key(|g| role.section(g.layer_type));
    Genome::new(ids.next_id(), role, genes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    Length { len: usize, limit: usize },
    IllegalLayer { index: usize, layer_type: LayerType },
    SectionOrder { index: usize },
    SizeRange { index: usize, units: usize, min: usize, max: usize },
    ParamShape { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "length: genome has no genes"),
            Violation::Length { len, limit } => write!(f, "length: {len} genes exceeds limit {limit}"),
            Violation::IllegalLayer { index, layer_type } => {
                write!(f, "layer-type: {layer_type:?} not allowed at gene {index}")
            }
            Violation::SectionOrder { index } => write!(f, "section-order: gene {index} breaks section order"),
            Violation::SizeRange { index, units, min, max } => {
                write!(f, "size-range: gene {index} has {units} units outside [{min}, {max}]")
            }
            Violation::ParamShape { index } => write!(f, "params: gene {index} carries a blob of the wrong kind"),
        }
    }
}

/// Lists every structural invariant the genome breaks. Never fails.
pub fn validate(genome: &Genome, space: &SearchSpace) -> Vec<Violation> {
    let mut out = Vec::new();
    if genome.genes.is_empty() {
        out.push(Violation::Empty);
    }
    if genome.genes.len() > space.genome_limit {
        out.push(Violation::Length { len: genome.genes.len(), limit: space.genome_limit });
    }
    let legal = genome.role.legal_layers(space.spatial);
    let mut section = 0;
    for (index, g) in genome.genes.iter().enumerate() {
        if !legal.contains(&g.layer_type) {
            out.push(Violation::IllegalLayer { index, layer_type: g.layer_type });
        }
        let s = genome.role.section(g.layer_type);
        if s < section {
            out.push(Violation::SectionOrder { index });
        }
        section = section.max(s);
        let (min, max) = space.units_range(g.layer_type);
        if g.units < min || g.units > max {
            out.push(Violation::SizeRange { index, units: g.units, min, max });
        }
        if let Some(p) = &g.params {
            let kind_ok = matches!(
                (g.layer_type, p.signature),
                (LayerType::Linear, ShapeSignature::Linear { .. })
                    | (LayerType::Conv, ShapeSignature::Conv { .. })
                    | (LayerType::Deconv, ShapeSignature::Deconv { .. })
            );
            if !kind_ok {
                out.push(Violation::ParamShape { index });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TensorShape {
    Flat(usize),
    Spatial { channels: usize, height: usize, width: usize },
}

impl TensorShape {
    pub fn width(&self) -> usize {
        match *self {
            TensorShape::Flat(n) => n,
            TensorShape::Spatial { channels, height, width } => channels * height * width,
        }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorShape::Flat(n) => write!(f, "{n}"),
            TensorShape::Spatial { channels, height, width } => write!(f, "{channels}x{height}x{width}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: TensorShape,
    pub output: TensorShape,
    pub signature: ShapeSignature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub channels: usize,
    pub from: (usize, usize),
    pub to: (usize, usize),
    pub top: usize,
    pub left: usize,
}

/// Realized tensor shapes of a genome's phenotype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapePlan {
    pub role: Role,
    pub input: TensorShape,
    pub genes: Vec<LayerShape>,
    /// Width of the flatten preceding the first linear layer of an image
    /// discriminator.
    pub flatten: Option<usize>,
    pub adapter: Option<LayerShape>,
    pub crop: Option<CropSpec>,
    pub head: LayerShape,
    pub output: TensorShape,
}

impl ShapePlan {
    pub fn gene_signatures(&self) -> Vec<ShapeSignature> {
        self.genes.iter().map(|s| s.signature).collect()
    }
}

fn positive(shape: TensorShape, what: &str) -> Result<TensorShape, Error> {
    let ok = match shape {
        TensorShape::Flat(n) => n > 0,
        TensorShape::Spatial { channels, height, width } => channels > 0 && height > 0 && width > 0,
    };
    if ok {
        Ok(shape)
    } else {
        Err(Error::Shape(format!("{what} has a non-positive dimension: {shape}")))
    }
}

/// Computes every intermediate shape of the phenotype for `genome` on data
/// of shape `sample`. Generators read `latent_dim` noise and reshape into
/// `base_channels` feature maps ahead of the transposed-convolution section.
pub fn infer_shapes(genome: &Genome, sample: SampleShape, latent_dim: usize, base_channels: usize) -> Result<ShapePlan, Error> {
    positive(sample.tensor(), "sample shape")?;
    match genome.role {
        Role::Discriminator => infer_discriminator(genome, sample),
        Role::Generator => infer_generator(genome, sample, latent_dim, base_channels),
    }
}

fn linear_shape(input: usize, outputs: usize) -> LayerShape {
    LayerShape {
        input: TensorShape::Flat(input),
        output: TensorShape::Flat(outputs),
        signature: ShapeSignature::Linear { inputs: input, outputs },
    }
}

fn infer_discriminator(genome: &Genome, sample: SampleShape) -> Result<ShapePlan, Error> {
    let input = sample.tensor();
    let mut cur = input;
    let mut genes = Vec::with_capacity(genome.genes.len());
    let mut flatten = None;
    for (i, g) in genome.genes.iter().enumerate() {
        match g.layer_type {
            LayerType::Conv => {
                let TensorShape::Spatial { channels, height, width } = cur else {
                    return Err(Error::Shape(format!("conv gene {i} follows a flat tensor")));
                };
                let out = positive(
                    TensorShape::Spatial { channels: g.units, height: nn::conv_out_len(height), width: nn::conv_out_len(width) },
                    "conv output",
                )?;
                genes.push(LayerShape {
                    input: cur,
                    output: out,
                    signature: ShapeSignature::Conv { in_channels: channels, out_channels: g.units },
                });
                cur = out;
            }
            LayerType::Linear => {
                if let TensorShape::Spatial { .. } = cur {
                    flatten = Some(cur.width());
                }
                let out = positive(TensorShape::Flat(g.units), "linear output")?;
                genes.push(linear_shape(cur.width(), g.units));
                cur = out;
            }
            LayerType::Deconv => return Err(Error::Shape(format!("deconv gene {i} in a discriminator"))),
        }
    }
    if let TensorShape::Spatial { .. } = cur {
        flatten = Some(cur.width());
    }
    let head = linear_shape(cur.width(), 1);
    Ok(ShapePlan { role: Role::Discriminator, input, genes, flatten, adapter: None, crop: None, head, output: TensorShape::Flat(1) })
}

fn infer_generator(genome: &Genome, sample: SampleShape, latent_dim: usize, base_channels: usize) -> Result<ShapePlan, Error> {
    let input = positive(TensorShape::Flat(latent_dim), "latent input")?;
    let mut genes = Vec::with_capacity(genome.genes.len());
    let mut width = latent_dim;
    let linear: Vec<&Gene> = genome.genes.iter().take_while(|g| g.layer_type == LayerType::Linear).collect();
    for g in &linear {
        positive(TensorShape::Flat(g.units), "linear output")?;
        genes.push(linear_shape(width, g.units));
        width = g.units;
    }
    let rest = &genome.genes[linear.len()..];
    match sample {
        SampleShape::Flat { features } => {
            if let Some(i) = rest.iter().position(|g| g.layer_type != LayerType::Linear) {
                return Err(Error::Shape(format!("gene {} is not linear on flat data", linear.len() + i)));
            }
            let head = linear_shape(width, features);
            Ok(ShapePlan {
                role: Role::Generator,
                input,
                genes,
                flatten: None,
                adapter: None,
                crop: None,
                head,
                output: TensorShape::Flat(features),
            })
        }
        SampleShape::Image { channels, height, width: img_w } => {
            if let Some(i) = rest.iter().position(|g| g.layer_type != LayerType::Deconv) {
                return Err(Error::Shape(format!("gene {} breaks the generator section order", linear.len() + i)));
            }
            let depth = rest.len() as u32;
            let scale = 1usize << depth;
            let (s0h, s0w) = (height.div_ceil(scale), img_w.div_ceil(scale));
            let first = positive(TensorShape::Spatial { channels: base_channels, height: s0h, width: s0w }, "generator adapter output")?;
            let adapter = LayerShape {
                input: TensorShape::Flat(width),
                output: first,
                signature: ShapeSignature::Linear { inputs: width, outputs: first.width() },
            };
            let mut cur = first;
            for g in rest {
                let TensorShape::Spatial { channels: cin, height: h, width: w } = cur else { unreachable!() };
                let out = positive(
                    TensorShape::Spatial { channels: g.units, height: nn::deconv_out_len(h), width: nn::deconv_out_len(w) },
                    "deconv output",
                )?;
                genes.push(LayerShape {
                    input: cur,
                    output: out,
                    signature: ShapeSignature::Deconv { in_channels: cin, out_channels: g.units },
                });
                cur = out;
            }
            let TensorShape::Spatial { channels: c_last, height: ph, width: pw } = cur else { unreachable!() };
            let crop = (ph > height || pw > img_w).then(|| CropSpec {
                channels: c_last,
                from: (ph, pw),
                to: (height, img_w),
                top: (ph - height) / 2,
                left: (pw - img_w) / 2,
            });
            let output = TensorShape::Spatial { channels, height, width: img_w };
            let head = LayerShape {
                input: TensorShape::Spatial { channels: c_last, height, width: img_w },
                output,
                signature: ShapeSignature::Pointwise { in_channels: c_last, out_channels: channels },
            };
            Ok(ShapePlan { role: Role::Generator, input, genes, flatten: None, adapter: Some(adapter), crop, head, output })
        }
    }
}

/// A trainable network realized from a genome.
#[derive(Debug, Clone)]
pub struct Phenotype {
    pub network: Network,
    /// Genes whose stored parameters matched the realized shape and were loaded.
    pub loaded_genes: usize,
    /// Genes whose stored parameters were discarded for a shape mismatch.
    pub discarded_genes: usize,
}

impl Phenotype {
    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.network.forward(x)
    }
}

fn make_op(slot: ParamSlot, shape: &LayerShape, stored: Option<&LayerParams>, rng: &mut impl Rng) -> (Op, Option<bool>) {
    let mut op = match (shape.signature, shape.input) {
        (ShapeSignature::Linear { inputs, outputs }, _) => Op::dense(slot, inputs, outputs, rng),
        (ShapeSignature::Conv { in_channels, out_channels }, TensorShape::Spatial { height, width, .. }) => {
            Op::conv(slot, in_channels, out_channels, height, width, rng)
        }
        (ShapeSignature::Deconv { in_channels, out_channels }, TensorShape::Spatial { height, width, .. }) => {
            Op::deconv(slot, in_channels, out_channels, height, width, rng)
        }
        (ShapeSignature::Pointwise { in_channels, out_channels }, TensorShape::Spatial { height, width, .. }) => {
            Op::pointwise(slot, in_channels, out_channels, height, width, rng)
        }
        (sig, input) => unreachable!("signature {sig} with input {input}"),
    };
    let loaded = stored.map(|p| {
        let ok = p.signature == shape.signature;
        if ok {
            *op.weights_mut().unwrap().1 = Weights::from_params(p);
        }
        ok
    });
    (op, loaded)
}

/// Builds the phenotype for `genome` following `plan`. Stored parameters are
/// loaded wherever their signature matches the realized layer; all other
/// layers are freshly initialized from `rng`.
pub fn build_phenotype(genome: &Genome, plan: &ShapePlan, rng: &mut impl Rng) -> Phenotype {
    assert_eq!(genome.genes.len(), plan.genes.len(), "shape plan does not belong to this genome");
    let mut ops = Vec::new();
    let mut loaded_genes = 0;
    let mut discarded_genes = 0;
    let mut tally = |r: Option<bool>| match r {
        Some(true) => loaded_genes += 1,
        Some(false) => discarded_genes += 1,
        None => {}
    };
    let mut adapter_pending = plan.adapter;
    for (i, (gene, shape)) in genome.genes.iter().zip(&plan.genes).enumerate() {
        if gene.layer_type == LayerType::Deconv {
            if let Some(a) = adapter_pending.take() {
                ops.push(make_op(ParamSlot::Adapter, &a, genome.adapter_params.as_deref(), rng).0);
            }
        }
        let (op, r) = make_op(ParamSlot::Gene(i), shape, gene.params.as_deref(), rng);
        tally(r);
        ops.push(op);
        ops.push(Op::Act(gene.activation));
    }
    if let Some(a) = adapter_pending.take() {
        ops.push(make_op(ParamSlot::Adapter, &a, genome.adapter_params.as_deref(), rng).0);
    }
    if let Some(c) = plan.crop {
        ops.push(Op::Crop { channels: c.channels, in_h: c.from.0, in_w: c.from.1, top: c.top, left: c.left, out_h: c.to.0, out_w: c.to.1 });
    }
    ops.push(make_op(ParamSlot::Head, &plan.head, genome.head_params.as_deref(), rng).0);
    ops.push(Op::Act(match plan.role {
        Role::Discriminator => Activation::Sigmoid,
        Role::Generator => Activation::Tanh,
    }));
    let network = Network::new(ops, plan.input.width(), plan.output.width());
    Phenotype { network, loaded_genes, discarded_genes }
}
