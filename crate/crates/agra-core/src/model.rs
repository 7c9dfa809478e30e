//! The end-to-end differentiable model: per-region feature extractors, graph
//! node initialization from the distribution bank, stacked propagation,
//! expression classifier, and domain discriminator.
//!
//! All trainable tensors are `Array2<f64>` (biases are 1 x n rows) and carry
//! stable names so the optimizer, gradient checker, and checkpoint format can
//! address them uniformly. Gradients are accumulated by name in [`Grads`];
//! the bank is never part of the gradient set.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{assign_cluster, ClassDistributionBank};
use crate::error::{AgraError, Result};
use crate::graph::{
    gcn_backward_batch, gcn_forward_batch, prior_inter, prior_intra, Activation, AdjacencyParams,
    Domain, GcnLayerCache, GcnLayerParams, GcnStackConfig, GraphTopology, IntraEdgeValues,
    InterEdgeValues, NODE_COUNT, REGION_COUNT,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which feature path the forward pass takes (the reduced variants are the
/// ablation modes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Extract, initialize both domains' nodes, run both stacks.
    Full,
    /// Holistic extracted feature only; no graph, no bank.
    HfOnly,
    /// Concatenation of the six extracted features; no graph, no bank.
    HlfConcat,
    /// Within-domain stack only.
    IntraOnly,
    /// Cross-domain stack only.
    InterOnly,
    /// One stack of the intra depth over the summed adjacency.
    SingleGcn,
}

impl FeatureMode {
    pub fn uses_graph(self) -> bool {
        !matches!(self, FeatureMode::HfOnly | FeatureMode::HlfConcat)
    }

    /// Whether node initialization (and therefore the bank) is involved.
    pub fn uses_bank(self) -> bool {
        self.uses_graph()
    }
}

/// How the adjacency matrices are initialized and whether they train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    /// Prior initialization, fine-tuned during training.
    Learned,
    /// Prior initialization, never updated.
    Fixed,
    /// Random uniform initialization, fine-tuned.
    RandomInit,
    /// All-ones initialization, fine-tuned.
    AllOnes,
}

impl AdjacencyMode {
    pub fn trainable(self) -> bool {
        !matches!(self, AdjacencyMode::Fixed)
    }
}

/// Per-region extractor architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExtractorKind {
    Linear,
    Mlp { hidden: usize },
}

/// Everything needed to build and run the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input dimension of each raw region vector.
    pub raw_dim: usize,
    /// Extracted feature width per region.
    pub region_dim: usize,
    /// Expression classes.
    pub classes: usize,
    pub extractor: ExtractorKind,
    pub stacks: GcnStackConfig,
    pub activation: Activation,
    /// Hidden widths of the two discriminator layers.
    pub disc_hidden: (usize, usize),
    pub intra_edges: IntraEdgeValues,
    pub inter_edges: InterEdgeValues,
    pub inter_local_all_pairs: bool,
    pub feature_mode: FeatureMode,
    pub adjacency_mode: AdjacencyMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            raw_dim: 32,
            region_dim: 64,
            classes: 7,
            extractor: ExtractorKind::Linear,
            stacks: GcnStackConfig::default(),
            activation: Activation::Relu,
            disc_hidden: (128, 64),
            intra_edges: IntraEdgeValues::default(),
            inter_edges: InterEdgeValues::default(),
            inter_local_all_pairs: false,
            feature_mode: FeatureMode::Full,
            adjacency_mode: AdjacencyMode::Learned,
        }
    }
}

impl ModelConfig {
    /// Width of the feature handed to the classifier and discriminator.
    pub fn feature_dim(&self) -> usize {
        match self.feature_mode {
            FeatureMode::HfOnly => self.region_dim,
            FeatureMode::HlfConcat => REGION_COUNT * self.region_dim,
            FeatureMode::Full | FeatureMode::InterOnly => {
                REGION_COUNT * self.stacks.output_dim()
            }
            FeatureMode::IntraOnly | FeatureMode::SingleGcn => {
                REGION_COUNT * self.stacks.intra_dims.last().copied().unwrap_or(self.region_dim)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.raw_dim == 0 || self.region_dim == 0 || self.classes == 0 {
            return Err(AgraError::Config(
                "raw_dim, region_dim, and classes must be nonzero".into(),
            ));
        }
        self.stacks.validate()?;
        if self.feature_mode.uses_graph() {
            if self.stacks.intra_dims[0] != self.region_dim {
                return Err(AgraError::Config(format!(
                    "intra stack input dim {} must equal region_dim {}",
                    self.stacks.intra_dims[0], self.region_dim
                )));
            }
            if self.feature_mode == FeatureMode::InterOnly
                && self.stacks.inter_dims[0] != self.region_dim
            {
                return Err(AgraError::Config(format!(
                    "inter stack input dim {} must equal region_dim {} in inter-only mode",
                    self.stacks.inter_dims[0], self.region_dim
                )));
            }
        }
        if let ExtractorKind::Mlp { hidden } = self.extractor {
            if hidden == 0 {
                return Err(AgraError::Config("mlp hidden width must be nonzero".into()));
            }
        }
        if self.disc_hidden.0 == 0 || self.disc_hidden.1 == 0 {
            return Err(AgraError::Config("discriminator widths must be nonzero".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// An affine map with the bias stored as a 1 x out row.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl LinearParams {
    fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        LinearParams {
            weight: Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound)),
            bias: Array2::zeros((1, cols)),
        }
    }

    pub fn forward(&self, input: &Array2<f64>) -> Array2<f64> {
        input.dot(&self.weight) + &self.bias
    }
}

/// One region's trainable map from raw input to the extracted feature.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionExtractorParams {
    Linear(LinearParams),
    Mlp { hidden: LinearParams, out: LinearParams },
}

/// The two-hidden-layer domain discriminator ending in a single score.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub l1: LinearParams,
    pub l2: LinearParams,
    pub l3: LinearParams,
}

/// All trainable tensors plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub extractors: Vec<RegionExtractorParams>,
    pub adjacency: AdjacencyParams,
    pub intra_layers: Vec<GcnLayerParams>,
    pub inter_layers: Vec<GcnLayerParams>,
    pub classifier: LinearParams,
    pub discriminator: DiscriminatorParams,
}

impl ModelParams {
    /// Build and initialize all tensors: Xavier for affine maps and GCN
    /// weights, adjacency per the configured mode.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let extractors = (0..REGION_COUNT)
            .map(|_| match config.extractor {
                ExtractorKind::Linear => RegionExtractorParams::Linear(LinearParams::xavier(
                    &mut rng,
                    config.raw_dim,
                    config.region_dim,
                )),
                ExtractorKind::Mlp { hidden } => RegionExtractorParams::Mlp {
                    hidden: LinearParams::xavier(&mut rng, config.raw_dim, hidden),
                    out: LinearParams::xavier(&mut rng, hidden, config.region_dim),
                },
            })
            .collect();

        let intra_layers = config
            .stacks
            .intra_dims
            .windows(2)
            .map(|w| {
                GcnLayerParams::new(
                    LinearParams::xavier(&mut rng, w[0], w[1]).weight,
                    config.activation,
                )
            })
            .collect();
        let inter_layers = config
            .stacks
            .inter_dims
            .windows(2)
            .map(|w| {
                GcnLayerParams::new(
                    LinearParams::xavier(&mut rng, w[0], w[1]).weight,
                    config.activation,
                )
            })
            .collect();

        let feature_dim = config.feature_dim();
        let classifier = LinearParams::xavier(&mut rng, feature_dim, config.classes);
        let discriminator = DiscriminatorParams {
            l1: LinearParams::xavier(&mut rng, feature_dim, config.disc_hidden.0),
            l2: LinearParams::xavier(&mut rng, config.disc_hidden.0, config.disc_hidden.1),
            l3: LinearParams::xavier(&mut rng, config.disc_hidden.1, 1),
        };

        let prior_i = prior_intra(&config.intra_edges);
        let prior_x = prior_inter(&config.inter_edges, config.inter_local_all_pairs);
        let mut adjacency = AdjacencyParams::from_priors(prior_i, prior_x);
        match config.adjacency_mode {
            AdjacencyMode::Learned | AdjacencyMode::Fixed => {}
            AdjacencyMode::RandomInit => {
                adjacency.intra =
                    Array2::from_shape_fn((NODE_COUNT, NODE_COUNT), |_| rng.random_range(0.0..1.0));
                adjacency.inter =
                    Array2::from_shape_fn((NODE_COUNT, NODE_COUNT), |_| rng.random_range(0.0..1.0));
            }
            AdjacencyMode::AllOnes => {
                adjacency.intra = Array2::ones((NODE_COUNT, NODE_COUNT));
                adjacency.inter = Array2::ones((NODE_COUNT, NODE_COUNT));
            }
        }

        Ok(ModelParams {
            config,
            extractors,
            adjacency,
            intra_layers,
            inter_layers,
            classifier,
            discriminator,
        })
    }

    /// Visit every trainable tensor with its stable name, in a fixed order.
    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for (k, ext) in self.extractors.iter().enumerate() {
            match ext {
                RegionExtractorParams::Linear(l) => {
                    f(&format!("extractor.{k}.w"), &l.weight);
                    f(&format!("extractor.{k}.b"), &l.bias);
                }
                RegionExtractorParams::Mlp { hidden, out } => {
                    f(&format!("extractor.{k}.hidden.w"), &hidden.weight);
                    f(&format!("extractor.{k}.hidden.b"), &hidden.bias);
                    f(&format!("extractor.{k}.out.w"), &out.weight);
                    f(&format!("extractor.{k}.out.b"), &out.bias);
                }
            }
        }
        for (l, layer) in self.intra_layers.iter().enumerate() {
            f(&format!("gcn.intra.{l}.w"), &layer.weight);
        }
        for (l, layer) in self.inter_layers.iter().enumerate() {
            f(&format!("gcn.inter.{l}.w"), &layer.weight);
        }
        f("adj.intra", &self.adjacency.intra);
        f("adj.inter", &self.adjacency.inter);
        f("classifier.w", &self.classifier.weight);
        f("classifier.b", &self.classifier.bias);
        f("disc.l1.w", &self.discriminator.l1.weight);
        f("disc.l1.b", &self.discriminator.l1.bias);
        f("disc.l2.w", &self.discriminator.l2.weight);
        f("disc.l2.b", &self.discriminator.l2.bias);
        f("disc.l3.w", &self.discriminator.l3.weight);
        f("disc.l3.b", &self.discriminator.l3.bias);
    }

    /// Mutable variant of [`Self::for_each_tensor`], same order.
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (k, ext) in self.extractors.iter_mut().enumerate() {
            match ext {
                RegionExtractorParams::Linear(l) => {
                    f(&format!("extractor.{k}.w"), &mut l.weight);
                    f(&format!("extractor.{k}.b"), &mut l.bias);
                }
                RegionExtractorParams::Mlp { hidden, out } => {
                    f(&format!("extractor.{k}.hidden.w"), &mut hidden.weight);
                    f(&format!("extractor.{k}.hidden.b"), &mut hidden.bias);
                    f(&format!("extractor.{k}.out.w"), &mut out.weight);
                    f(&format!("extractor.{k}.out.b"), &mut out.bias);
                }
            }
        }
        for (l, layer) in self.intra_layers.iter_mut().enumerate() {
            f(&format!("gcn.intra.{l}.w"), &mut layer.weight);
        }
        for (l, layer) in self.inter_layers.iter_mut().enumerate() {
            f(&format!("gcn.inter.{l}.w"), &mut layer.weight);
        }
        f("adj.intra", &mut self.adjacency.intra);
        f("adj.inter", &mut self.adjacency.inter);
        f("classifier.w", &mut self.classifier.weight);
        f("classifier.b", &mut self.classifier.bias);
        f("disc.l1.w", &mut self.discriminator.l1.weight);
        f("disc.l1.b", &mut self.discriminator.l1.bias);
        f("disc.l2.w", &mut self.discriminator.l2.weight);
        f("disc.l2.b", &mut self.discriminator.l2.bias);
        f("disc.l3.w", &mut self.discriminator.l3.weight);
        f("disc.l3.b", &mut self.discriminator.l3.bias);
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_tensor(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// Map a tensor name to its verification group, e.g. `gcn.intra.0.w` to
    /// `w_intra_0`.
    pub fn group_of(name: &str) -> String {
        if name.starts_with("extractor.") {
            "extractor".into()
        } else if let Some(rest) = name.strip_prefix("gcn.intra.") {
            format!("w_intra_{}", rest.trim_end_matches(".w"))
        } else if let Some(rest) = name.strip_prefix("gcn.inter.") {
            format!("w_inter_{}", rest.trim_end_matches(".w"))
        } else if name == "adj.intra" {
            "adj_intra".into()
        } else if name == "adj.inter" {
            "adj_inter".into()
        } else if name.starts_with("classifier.") {
            "classifier".into()
        } else if name.starts_with("disc.") {
            "discriminator".into()
        } else {
            name.into()
        }
    }
}

/// Named gradient accumulator aligned with [`ModelParams`] tensor names.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    map: BTreeMap<String, Array2<f64>>,
}

impl Grads {
    pub fn new() -> Self {
        Grads::default()
    }

    /// Accumulation target for a named tensor, created zeroed on first use.
    pub fn entry(&mut self, name: &str, dim: (usize, usize)) -> &mut Array2<f64> {
        self.map
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(dim))
    }

    pub fn add(&mut self, name: &str, grad: &Array2<f64>) {
        let slot = self.entry(name, grad.dim());
        *slot += grad;
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn scale(&mut self, factor: f64) {
        for grad in self.map.values_mut() {
            grad.mapv_inplace(|v| v * factor);
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass with caches
// ---------------------------------------------------------------------------

/// Per-sample raw input and extracted feature for each region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSet {
    pub raw: Vec<Array1<f64>>,
    pub extracted: Vec<Array1<f64>>,
}

/// How the other domain's node rows are filled at initialization.
#[derive(Clone, Copy)]
pub enum NodeInit<'a> {
    /// Nearest-cluster means from the bank; the bank rows are constants.
    Bank(&'a ClassDistributionBank),
    /// The sample's own extracted features fill both domains' rows. Used
    /// before the bank exists (supervised pre-training stage).
    Mirror,
}

#[derive(Debug, Clone)]
enum ExtractorCache {
    Linear {
        input: Array2<f64>,
    },
    Mlp {
        input: Array2<f64>,
        hidden_pre: Array2<f64>,
        hidden: Array2<f64>,
    },
}

/// Every intermediate needed to run the backward pass for one batch.
pub struct ForwardCache {
    pub domain: Domain,
    pub batch: usize,
    ext_caches: Vec<ExtractorCache>,
    /// Extracted features per region, each batch x region_dim.
    pub extracted: Vec<Array2<f64>>,
    /// Region-concatenated extracted features, batch x (6 * region_dim).
    pub concat: Array2<f64>,
    /// Nearest other-domain cluster per sample (bank initialization only).
    pub assigned: Option<Vec<usize>>,
    mirror_init: bool,
    pub h0: Option<Array2<f64>>,
    intra_caches: Vec<GcnLayerCache>,
    inter_caches: Vec<GcnLayerCache>,
    pub h_intra: Option<Array2<f64>>,
    pub h_final: Option<Array2<f64>>,
    /// The model feature, batch x feature_dim.
    pub feature: Array2<f64>,
}

fn extractor_forward(
    params: &RegionExtractorParams,
    input: &Array2<f64>,
) -> (Array2<f64>, ExtractorCache) {
    match params {
        RegionExtractorParams::Linear(l) => {
            (l.forward(input), ExtractorCache::Linear { input: input.clone() })
        }
        RegionExtractorParams::Mlp { hidden, out } => {
            let hidden_pre = hidden.forward(input);
            let hidden_act = hidden_pre.mapv(|v| if v > 0.0 { v } else { 0.0 });
            let output = out.forward(&hidden_act);
            (
                output,
                ExtractorCache::Mlp {
                    input: input.clone(),
                    hidden_pre,
                    hidden: hidden_act,
                },
            )
        }
    }
}

fn linear_backward(
    layer: &LinearParams,
    input: &Array2<f64>,
    d_out: &Array2<f64>,
    names: (&str, &str),
    grads: &mut Grads,
) -> Array2<f64> {
    let (w_name, b_name) = names;
    let dw = grads.entry(w_name, layer.weight.dim());
    ndarray::linalg::general_mat_mul(1.0, &input.t(), d_out, 1.0, &mut dw.view_mut());
    let db = grads.entry(b_name, layer.bias.dim());
    let col_sum = d_out.sum_axis(Axis(0));
    let mut db_row = db.row_mut(0);
    db_row += &col_sum;
    d_out.dot(&layer.weight.t())
}

fn extractor_backward(
    params: &RegionExtractorParams,
    cache: &ExtractorCache,
    region: usize,
    d_out: &Array2<f64>,
    grads: &mut Grads,
) {
    match (params, cache) {
        (RegionExtractorParams::Linear(l), ExtractorCache::Linear { input }) => {
            let w_name = format!("extractor.{region}.w");
            let b_name = format!("extractor.{region}.b");
            linear_backward(l, input, d_out, (&w_name, &b_name), grads);
        }
        (
            RegionExtractorParams::Mlp { hidden, out },
            ExtractorCache::Mlp { input, hidden_pre, hidden: hidden_act },
        ) => {
            let ow = format!("extractor.{region}.out.w");
            let ob = format!("extractor.{region}.out.b");
            let mut d_hidden = linear_backward(out, hidden_act, d_out, (&ow, &ob), grads);
            d_hidden.zip_mut_with(hidden_pre, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let hw = format!("extractor.{region}.hidden.w");
            let hb = format!("extractor.{region}.hidden.b");
            linear_backward(hidden, input, &d_hidden, (&hw, &hb), grads);
        }
        _ => unreachable!("extractor cache kind mismatch"),
    }
}

fn concat_regions(extracted: &[Array2<f64>]) -> Array2<f64> {
    let batch = extracted[0].nrows();
    let d = extracted[0].ncols();
    let mut out = Array2::zeros((batch, REGION_COUNT * d));
    for (k, block) in extracted.iter().enumerate() {
        out.slice_mut(s![.., k * d..(k + 1) * d]).assign(block);
    }
    out
}

/// Rows of the sample's own domain, concatenated region-wise per sample.
fn gather_own_rows(h: &Array2<f64>, domain: Domain, batch: usize) -> Array2<f64> {
    let d = h.ncols();
    let offset = domain.index() * REGION_COUNT;
    let mut out = Array2::zeros((batch, REGION_COUNT * d));
    for b in 0..batch {
        for k in 0..REGION_COUNT {
            out.slice_mut(s![b, k * d..(k + 1) * d])
                .assign(&h.row(b * NODE_COUNT + offset + k));
        }
    }
    out
}

fn scatter_own_rows(d_feature: &Array2<f64>, domain: Domain, batch: usize, d: usize) -> Array2<f64> {
    let offset = domain.index() * REGION_COUNT;
    let mut d_h = Array2::zeros((batch * NODE_COUNT, d));
    for b in 0..batch {
        for k in 0..REGION_COUNT {
            d_h.row_mut(b * NODE_COUNT + offset + k)
                .assign(&d_feature.slice(s![b, k * d..(k + 1) * d]));
        }
    }
    d_h
}

/// Split a batch x (6 * d) gradient into per-region batch x d blocks.
fn split_regions(d_concat: &Array2<f64>, d: usize) -> Vec<Array2<f64>> {
    (0..REGION_COUNT)
        .map(|k| d_concat.slice(s![.., k * d..(k + 1) * d]).to_owned())
        .collect()
}

/// Run the feature path for one same-domain batch. `regions[k]` holds the
/// raw inputs of region `k`, one row per sample.
pub fn forward_batch(
    params: &ModelParams,
    regions: &[Array2<f64>],
    domain: Domain,
    init: NodeInit,
) -> Result<ForwardCache> {
    let config = &params.config;
    if regions.len() != REGION_COUNT {
        return Err(AgraError::Argument(format!(
            "expected {REGION_COUNT} region blocks, got {}",
            regions.len()
        )));
    }
    let batch = regions[0].nrows();
    for (k, block) in regions.iter().enumerate() {
        if block.dim() != (batch, config.raw_dim) {
            return Err(AgraError::Dimension(format!(
                "region {k} block is {:?}, expected ({batch}, {})",
                block.dim(),
                config.raw_dim
            )));
        }
    }

    let mut ext_caches = Vec::with_capacity(REGION_COUNT);
    let mut extracted = Vec::with_capacity(REGION_COUNT);
    for (block, extractor) in regions.iter().zip(&params.extractors) {
        let (out, cache) = extractor_forward(extractor, block);
        ext_caches.push(cache);
        extracted.push(out);
    }
    let concat = concat_regions(&extracted);

    if !config.feature_mode.uses_graph() {
        let feature = match config.feature_mode {
            FeatureMode::HfOnly => extracted[0].clone(),
            FeatureMode::HlfConcat => concat.clone(),
            _ => unreachable!(),
        };
        return Ok(ForwardCache {
            domain,
            batch,
            ext_caches,
            extracted,
            concat,
            assigned: None,
            mirror_init: false,
            h0: None,
            intra_caches: Vec::new(),
            inter_caches: Vec::new(),
            h_intra: None,
            h_final: None,
            feature,
        });
    }

    // Node initialization: own rows from the extracted features, other rows
    // from the bank's nearest-cluster means (constants) or mirrored.
    let d = config.region_dim;
    let own_offset = domain.index() * REGION_COUNT;
    let other_offset = domain.other().index() * REGION_COUNT;
    let mut h0 = Array2::zeros((batch * NODE_COUNT, d));
    let mut assigned = None;
    let mut mirror_init = false;
    match init {
        NodeInit::Bank(bank) => {
            if bank.region_dim() != d {
                return Err(AgraError::Dimension(format!(
                    "bank region dim {} does not match model region dim {d}",
                    bank.region_dim()
                )));
            }
            let mut picks = Vec::with_capacity(batch);
            for b in 0..batch {
                let cluster = assign_cluster(concat.row(b), bank, domain.other())?;
                picks.push(cluster);
                for k in 0..REGION_COUNT {
                    h0.row_mut(b * NODE_COUNT + own_offset + k)
                        .assign(&extracted[k].row(b));
                    h0.row_mut(b * NODE_COUNT + other_offset + k)
                        .assign(&bank.region_mean(domain.other(), cluster, k));
                }
            }
            assigned = Some(picks);
        }
        NodeInit::Mirror => {
            mirror_init = true;
            for b in 0..batch {
                for k in 0..REGION_COUNT {
                    h0.row_mut(b * NODE_COUNT + own_offset + k)
                        .assign(&extracted[k].row(b));
                    h0.row_mut(b * NODE_COUNT + other_offset + k)
                        .assign(&extracted[k].row(b));
                }
            }
        }
    }

    // Propagation.
    let single = config.feature_mode == FeatureMode::SingleGcn;
    let merged_adj = if single {
        Some(&params.adjacency.intra + &params.adjacency.inter)
    } else {
        None
    };
    let mut h = h0.clone();
    let mut intra_caches = Vec::new();
    let mut inter_caches = Vec::new();

    if config.feature_mode != FeatureMode::InterOnly {
        let adj = merged_adj.as_ref().unwrap_or(&params.adjacency.intra);
        for layer in &params.intra_layers {
            let (out, cache) = gcn_forward_batch(&h, adj, layer, NODE_COUNT);
            intra_caches.push(cache);
            h = out;
        }
    }
    let h_intra = h.clone();

    if matches!(config.feature_mode, FeatureMode::Full | FeatureMode::InterOnly) {
        for layer in &params.inter_layers {
            let (out, cache) = gcn_forward_batch(&h, &params.adjacency.inter, layer, NODE_COUNT);
            inter_caches.push(cache);
            h = out;
        }
    }
    let h_final = h;

    let feature = gather_own_rows(&h_final, domain, batch);
    Ok(ForwardCache {
        domain,
        batch,
        ext_caches,
        extracted,
        concat,
        assigned,
        mirror_init,
        h0: Some(h0),
        intra_caches,
        inter_caches,
        h_intra: Some(h_intra),
        h_final: Some(h_final),
        feature,
    })
}

/// Backpropagate a gradient at the model feature through the graph stacks
/// and the extractors, accumulating parameter gradients by name.
pub fn backward_feature(
    params: &ModelParams,
    cache: &ForwardCache,
    d_feature: &Array2<f64>,
    grads: &mut Grads,
) {
    let config = &params.config;
    let d = config.region_dim;

    let d_extracted: Vec<Array2<f64>> = if !config.feature_mode.uses_graph() {
        match config.feature_mode {
            FeatureMode::HfOnly => {
                let mut blocks: Vec<Array2<f64>> = (0..REGION_COUNT)
                    .map(|_| Array2::zeros((cache.batch, d)))
                    .collect();
                blocks[0] = d_feature.clone();
                blocks
            }
            FeatureMode::HlfConcat => split_regions(d_feature, d),
            _ => unreachable!(),
        }
    } else {
        let single = config.feature_mode == FeatureMode::SingleGcn;
        let merged_adj = if single {
            Some(&params.adjacency.intra + &params.adjacency.inter)
        } else {
            None
        };

        let out_dim = cache.h_final.as_ref().unwrap().ncols();
        let mut d_h = scatter_own_rows(d_feature, cache.domain, cache.batch, out_dim);

        if matches!(config.feature_mode, FeatureMode::Full | FeatureMode::InterOnly) {
            let mut d_adj_inter = Array2::zeros((NODE_COUNT, NODE_COUNT));
            for (idx, (layer, layer_cache)) in params
                .inter_layers
                .iter()
                .zip(&cache.inter_caches)
                .enumerate()
                .rev()
            {
                let mut d_w = Array2::zeros(layer.weight.raw_dim());
                d_h = gcn_backward_batch(
                    layer_cache,
                    &params.adjacency.inter,
                    layer,
                    d_h,
                    NODE_COUNT,
                    &mut d_w,
                    &mut d_adj_inter,
                );
                grads.add(&format!("gcn.inter.{idx}.w"), &d_w);
            }
            if !params.inter_layers.is_empty() {
                grads.add("adj.inter", &d_adj_inter);
            }
        }

        if config.feature_mode != FeatureMode::InterOnly {
            let adj = merged_adj.as_ref().unwrap_or(&params.adjacency.intra);
            let mut d_adj = Array2::zeros((NODE_COUNT, NODE_COUNT));
            for (idx, (layer, layer_cache)) in params
                .intra_layers
                .iter()
                .zip(&cache.intra_caches)
                .enumerate()
                .rev()
            {
                let mut d_w = Array2::zeros(layer.weight.raw_dim());
                d_h = gcn_backward_batch(
                    layer_cache,
                    adj,
                    layer,
                    d_h,
                    NODE_COUNT,
                    &mut d_w,
                    &mut d_adj,
                );
                grads.add(&format!("gcn.intra.{idx}.w"), &d_w);
            }
            if !params.intra_layers.is_empty() {
                grads.add("adj.intra", &d_adj);
                if single {
                    // The merged stack saw intra + inter, so both receive the
                    // same gradient.
                    grads.add("adj.inter", &d_adj);
                }
            }
        }

        // d_h is now the gradient at H0. Own rows feed the extractors; in
        // mirror mode the other domain's rows do too. Bank rows are constants.
        let own_offset = cache.domain.index() * REGION_COUNT;
        let other_offset = cache.domain.other().index() * REGION_COUNT;
        (0..REGION_COUNT)
            .map(|k| {
                let mut block = Array2::zeros((cache.batch, d));
                for b in 0..cache.batch {
                    let mut row = block.row_mut(b);
                    row += &d_h.row(b * NODE_COUNT + own_offset + k);
                    if cache.mirror_init {
                        row += &d_h.row(b * NODE_COUNT + other_offset + k);
                    }
                }
                block
            })
            .collect()
    };

    for k in 0..REGION_COUNT {
        extractor_backward(
            &params.extractors[k],
            &cache.ext_caches[k],
            k,
            &d_extracted[k],
            grads,
        );
    }
}

// ---------------------------------------------------------------------------
// Classifier and discriminator
// ---------------------------------------------------------------------------

/// Row-wise softmax probabilities and the logits they came from.
pub struct ClassifyCache {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

pub fn classify_batch(classifier: &LinearParams, features: &Array2<f64>) -> Result<ClassifyCache> {
    if features.ncols() != classifier.weight.nrows() {
        return Err(AgraError::Dimension(format!(
            "feature dim {} does not match classifier input {}",
            features.ncols(),
            classifier.weight.nrows()
        )));
    }
    let logits = classifier.forward(features);
    let probs = softmax_rows(&logits);
    Ok(ClassifyCache { logits, probs })
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Backpropagate a gradient at the logits; returns the feature gradient.
pub fn classifier_backward(
    classifier: &LinearParams,
    features: &Array2<f64>,
    d_logits: &Array2<f64>,
    grads: Option<&mut Grads>,
) -> Array2<f64> {
    if let Some(grads) = grads {
        linear_backward(
            classifier,
            features,
            d_logits,
            ("classifier.w", "classifier.b"),
            grads,
        )
    } else {
        d_logits.dot(&classifier.weight.t())
    }
}

/// Intermediates of one discriminator pass.
pub struct DiscCache {
    pub input: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    /// Pre-sigmoid score, batch x 1.
    pub score: Array2<f64>,
    /// Sigmoid output, batch x 1, strictly inside (0, 1).
    pub out: Array2<f64>,
}

fn sigmoid(v: f64) -> f64 {
    let raw = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    // Keep the output strictly inside (0, 1) even where the exact sigmoid
    // would round to an endpoint.
    let below_one = f64::from_bits(1.0f64.to_bits() - 1);
    raw.clamp(f64::MIN_POSITIVE, below_one)
}

pub fn discriminate_batch(disc: &DiscriminatorParams, features: &Array2<f64>) -> Result<DiscCache> {
    if features.ncols() != disc.l1.weight.nrows() {
        return Err(AgraError::Dimension(format!(
            "feature dim {} does not match discriminator input {}",
            features.ncols(),
            disc.l1.weight.nrows()
        )));
    }
    let z1 = disc.l1.forward(features);
    let a1 = z1.mapv(|v| if v > 0.0 { v } else { 0.0 });
    let z2 = disc.l2.forward(&a1);
    let a2 = z2.mapv(|v| if v > 0.0 { v } else { 0.0 });
    let score = disc.l3.forward(&a2);
    let out = score.mapv(sigmoid);
    Ok(DiscCache {
        input: features.clone(),
        z1,
        a1,
        z2,
        a2,
        score,
        out,
    })
}

/// Backpropagate a gradient at the pre-sigmoid score. Parameter gradients
/// are accumulated only when `grads` is provided (the feature-extractor
/// update treats the discriminator as frozen). Returns the feature gradient.
pub fn discriminator_backward(
    disc: &DiscriminatorParams,
    cache: &DiscCache,
    d_score: &Array2<f64>,
    mut grads: Option<&mut Grads>,
) -> Array2<f64> {
    let mut d_a2 = match grads.as_deref_mut() {
        Some(g) => linear_backward(&disc.l3, &cache.a2, d_score, ("disc.l3.w", "disc.l3.b"), g),
        None => d_score.dot(&disc.l3.weight.t()),
    };
    d_a2.zip_mut_with(&cache.z2, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let mut d_a1 = match grads.as_deref_mut() {
        Some(g) => linear_backward(&disc.l2, &cache.a1, &d_a2, ("disc.l2.w", "disc.l2.b"), g),
        None => d_a2.dot(&disc.l2.weight.t()),
    };
    d_a1.zip_mut_with(&cache.z1, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    match grads {
        Some(g) => linear_backward(&disc.l1, &cache.input, &d_a1, ("disc.l1.w", "disc.l1.b"), g),
        None => d_a1.dot(&disc.l1.weight.t()),
    }
}

// ---------------------------------------------------------------------------
// Single-sample operations
// ---------------------------------------------------------------------------

fn regions_as_batch(raw_regions: &[Array1<f64>]) -> Result<Vec<Array2<f64>>> {
    if raw_regions.len() != REGION_COUNT {
        return Err(AgraError::Argument(format!(
            "expected {REGION_COUNT} regions, got {}",
            raw_regions.len()
        )));
    }
    Ok(raw_regions
        .iter()
        .map(|r| r.view().insert_axis(Axis(0)).to_owned())
        .collect())
}

/// Apply each region's extractor to its raw vector.
pub fn extract(params: &ModelParams, raw_regions: &[Array1<f64>]) -> Result<RegionFeatureSet> {
    let blocks = regions_as_batch(raw_regions)?;
    for (k, block) in blocks.iter().enumerate() {
        if block.ncols() != params.config.raw_dim {
            return Err(AgraError::Argument(format!(
                "region {k} has dim {}, expected {}",
                block.ncols(),
                params.config.raw_dim
            )));
        }
    }
    let extracted = blocks
        .iter()
        .zip(&params.extractors)
        .map(|(block, ext)| extractor_forward(ext, block).0.row(0).to_owned())
        .collect();
    Ok(RegionFeatureSet {
        raw: raw_regions.to_vec(),
        extracted,
    })
}

/// Build the 12 x region_dim node matrix for one sample: the sample's own
/// domain rows carry its extracted features, the other domain's rows carry
/// the nearest cluster's bank means (constants, no gradient).
pub fn init_nodes(
    sample: &RegionFeatureSet,
    sample_domain: Domain,
    bank: &ClassDistributionBank,
) -> Result<Array2<f64>> {
    let d = bank.region_dim();
    if sample.extracted.len() != REGION_COUNT || sample.extracted[0].len() != d {
        return Err(AgraError::Dimension(format!(
            "extracted features must be {REGION_COUNT} x {d}"
        )));
    }
    let mut concat = Array1::zeros(REGION_COUNT * d);
    for (k, feat) in sample.extracted.iter().enumerate() {
        concat.slice_mut(s![k * d..(k + 1) * d]).assign(feat);
    }
    let cluster = assign_cluster(concat.view(), bank, sample_domain.other())?;

    let mut h0 = Array2::zeros((NODE_COUNT, d));
    for k in 0..REGION_COUNT {
        let own = GraphTopology::node_index(sample_domain, crate::graph::Region::ALL[k]);
        let other = GraphTopology::node_index(sample_domain.other(), crate::graph::Region::ALL[k]);
        h0.row_mut(own).assign(&sample.extracted[k]);
        h0.row_mut(other)
            .assign(&bank.region_mean(sample_domain.other(), cluster, k));
    }
    Ok(h0)
}

/// Feature output of the single-sample forward pass.
pub struct ForwardOutput {
    pub feature: Array1<f64>,
    pub h_intra: Option<Array2<f64>>,
    pub h_final: Option<Array2<f64>>,
}

/// Run the configured feature path for one sample. `bank` may be omitted
/// only for modes that skip node initialization or when mirroring is wanted.
pub fn forward(
    params: &ModelParams,
    raw_regions: &[Array1<f64>],
    domain: Domain,
    bank: Option<&ClassDistributionBank>,
) -> Result<ForwardOutput> {
    let blocks = regions_as_batch(raw_regions)?;
    let init = match bank {
        Some(b) => NodeInit::Bank(b),
        None => NodeInit::Mirror,
    };
    let cache = forward_batch(params, &blocks, domain, init)?;
    let feature = cache.feature.row(0).to_owned();
    let unbatch = |h: &Array2<f64>| h.slice(s![0..NODE_COUNT, ..]).to_owned();
    Ok(ForwardOutput {
        feature,
        h_intra: cache.h_intra.as_ref().map(unbatch),
        h_final: cache.h_final.as_ref().map(unbatch),
    })
}

/// Softmax class probabilities for one feature vector.
pub fn classify(classifier: &LinearParams, feature: &Array1<f64>) -> Result<Array1<f64>> {
    let batch = feature.view().insert_axis(Axis(0)).to_owned();
    let cache = classify_batch(classifier, &batch)?;
    Ok(cache.probs.row(0).to_owned())
}

/// Probability that the feature came from the source domain.
pub fn discriminate(disc: &DiscriminatorParams, feature: &Array1<f64>) -> Result<f64> {
    let batch = feature.view().insert_axis(Axis(0)).to_owned();
    let cache = discriminate_batch(disc, &batch)?;
    Ok(cache.out[[0, 0]])
}
