//! The 12-node holistic-local graph: topology, typed prior adjacency
//! construction, and the graph-convolution layer with its backward pass.
//!
//! Node layout is fixed everywhere (feature rows, adjacency axes,
//! serialization): indices 0-5 are the source-domain nodes, 6-11 the
//! target-domain nodes, each ordered `h, le, re, no, lm, rm`.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{AgraError, Result};

/// Regions per domain: one holistic node plus five local-region nodes.
pub const REGION_COUNT: usize = 6;
/// Total graph nodes (both domains).
pub const NODE_COUNT: usize = 2 * REGION_COUNT;

/// The six graph regions, in canonical row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Holistic,
    LeftEye,
    RightEye,
    Nose,
    LeftMouth,
    RightMouth,
}

impl Region {
    pub const ALL: [Region; REGION_COUNT] = [
        Region::Holistic,
        Region::LeftEye,
        Region::RightEye,
        Region::Nose,
        Region::LeftMouth,
        Region::RightMouth,
    ];

    pub fn index(self) -> usize {
        Region::ALL.iter().position(|r| *r == self).unwrap()
    }

    pub fn tag(self) -> &'static str {
        match self {
            Region::Holistic => "h",
            Region::LeftEye => "le",
            Region::RightEye => "re",
            Region::Nose => "no",
            Region::LeftMouth => "lm",
            Region::RightMouth => "rm",
        }
    }

    pub fn is_holistic(self) -> bool {
        self == Region::Holistic
    }
}

/// Which side of the adaptation problem a sample or node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "s")]
    Source,
    #[serde(rename = "t")]
    Target,
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "s",
            Domain::Target => "t",
        }
    }
}

/// The fixed 12-node topology. All functions are total over `0..NODE_COUNT`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GraphTopology;

impl GraphTopology {
    /// Row index of `(domain, region)` in node matrices and adjacency axes.
    pub fn node_index(domain: Domain, region: Region) -> usize {
        domain.index() * REGION_COUNT + region.index()
    }

    pub fn region_of(node: usize) -> Region {
        assert!(node < NODE_COUNT, "node index out of range: {node}");
        Region::ALL[node % REGION_COUNT]
    }

    pub fn domain_of(node: usize) -> Domain {
        assert!(node < NODE_COUNT, "node index out of range: {node}");
        if node < REGION_COUNT {
            Domain::Source
        } else {
            Domain::Target
        }
    }

    /// Canonical node identifiers, e.g. `s.h`, `t.lm`.
    pub fn node_ids() -> Vec<String> {
        (0..NODE_COUNT)
            .map(|i| format!("{}.{}", Self::domain_of(i).tag(), Self::region_of(i).tag()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Prior adjacency construction
// ---------------------------------------------------------------------------

/// Connection weights for the within-domain graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraEdgeValues {
    pub holistic_local: f64,
    pub local_local: f64,
    pub self_loop: f64,
}

impl Default for IntraEdgeValues {
    fn default() -> Self {
        IntraEdgeValues {
            holistic_local: 1.0,
            local_local: 0.5,
            self_loop: 1.0,
        }
    }
}

/// Connection weights for the cross-domain graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterEdgeValues {
    pub global_global: f64,
    pub global_local: f64,
    pub local_local: f64,
}

impl Default for InterEdgeValues {
    fn default() -> Self {
        InterEdgeValues {
            global_global: 1.0,
            global_local: 0.5,
            local_local: 0.75,
        }
    }
}

fn require_key(values: &HashMap<String, f64>, key: &str) -> Result<f64> {
    let v = *values
        .get(key)
        .ok_or_else(|| AgraError::Config(format!("missing connection-type key `{key}`")))?;
    if !v.is_finite() {
        return Err(AgraError::Config(format!(
            "connection-type `{key}` is not finite: {v}"
        )));
    }
    Ok(v)
}

/// Build the within-domain prior matrix from named connection types.
///
/// Requires keys `holistic_local`, `local_local`, `self_loop`. Every
/// cross-domain entry is zero and the result is symmetric.
pub fn build_prior_intra(edge_values: &HashMap<String, f64>) -> Result<Array2<f64>> {
    let values = IntraEdgeValues {
        holistic_local: require_key(edge_values, "holistic_local")?,
        local_local: require_key(edge_values, "local_local")?,
        self_loop: require_key(edge_values, "self_loop")?,
    };
    Ok(prior_intra(&values))
}

/// Typed variant of [`build_prior_intra`].
pub fn prior_intra(values: &IntraEdgeValues) -> Array2<f64> {
    let mut adj = Array2::zeros((NODE_COUNT, NODE_COUNT));
    for i in 0..NODE_COUNT {
        for j in 0..NODE_COUNT {
            if GraphTopology::domain_of(i) != GraphTopology::domain_of(j) {
                continue;
            }
            let (ri, rj) = (GraphTopology::region_of(i), GraphTopology::region_of(j));
            adj[[i, j]] = if i == j {
                values.self_loop
            } else if ri.is_holistic() || rj.is_holistic() {
                values.holistic_local
            } else {
                values.local_local
            };
        }
    }
    adj
}

/// Build the cross-domain prior matrix from named connection types.
///
/// Requires keys `global_global`, `global_local`, `local_local`. Local-local
/// edges connect same-region pairs only; every same-domain entry (including
/// the diagonal) is zero and the result is symmetric.
pub fn build_prior_inter(edge_values: &HashMap<String, f64>) -> Result<Array2<f64>> {
    let values = InterEdgeValues {
        global_global: require_key(edge_values, "global_global")?,
        global_local: require_key(edge_values, "global_local")?,
        local_local: require_key(edge_values, "local_local")?,
    };
    Ok(prior_inter(&values, false))
}

/// Typed variant of [`build_prior_inter`]. With `all_local_pairs` the
/// local-local value is applied to every cross-domain local pair instead of
/// same-region pairs only.
pub fn prior_inter(values: &InterEdgeValues, all_local_pairs: bool) -> Array2<f64> {
    let mut adj = Array2::zeros((NODE_COUNT, NODE_COUNT));
    for i in 0..NODE_COUNT {
        for j in 0..NODE_COUNT {
            if GraphTopology::domain_of(i) == GraphTopology::domain_of(j) {
                continue;
            }
            let (ri, rj) = (GraphTopology::region_of(i), GraphTopology::region_of(j));
            adj[[i, j]] = match (ri.is_holistic(), rj.is_holistic()) {
                (true, true) => values.global_global,
                (true, false) | (false, true) => values.global_local,
                (false, false) => {
                    if ri == rj || all_local_pairs {
                        values.local_local
                    } else {
                        0.0
                    }
                }
            };
        }
    }
    adj
}

/// The pair of learnable adjacency matrices, plus the priors they started
/// from. The priors are kept so frozen-adjacency runs and structure checks
/// can compare against the exact initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyParams {
    pub intra: Array2<f64>,
    pub inter: Array2<f64>,
    pub prior_intra: Array2<f64>,
    pub prior_inter: Array2<f64>,
}

impl AdjacencyParams {
    pub fn from_priors(intra: Array2<f64>, inter: Array2<f64>) -> Self {
        AdjacencyParams {
            prior_intra: intra.clone(),
            prior_inter: inter.clone(),
            intra,
            inter,
        }
    }

    /// Check the structural zeros of the priors: the within-domain matrix has
    /// no cross-domain entries and the cross-domain matrix has no same-domain
    /// entries.
    pub fn check_prior_structure(&self) -> Result<()> {
        for i in 0..NODE_COUNT {
            for j in 0..NODE_COUNT {
                let same = GraphTopology::domain_of(i) == GraphTopology::domain_of(j);
                if !same && self.prior_intra[[i, j]] != 0.0 {
                    return Err(AgraError::Config(format!(
                        "intra prior has nonzero cross-domain entry at ({i}, {j})"
                    )));
                }
                if same && self.prior_inter[[i, j]] != 0.0 {
                    return Err(AgraError::Config(format!(
                        "inter prior has nonzero same-domain entry at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Graph convolution
// ---------------------------------------------------------------------------

/// Elementwise activation applied after each propagation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Identity => z.clone(),
        }
    }

    /// Multiply `grad` by the activation derivative evaluated at
    /// pre-activation `z`, in place.
    pub fn backprop_inplace(self, z: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => grad.zip_mut_with(z, |g, &zv| {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Identity => {}
        }
    }
}

/// One graph-convolution layer: a weight matrix and its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayerParams {
    pub weight: Array2<f64>,
    pub activation: Activation,
}

impl GcnLayerParams {
    pub fn new(weight: Array2<f64>, activation: Activation) -> Self {
        GcnLayerParams { weight, activation }
    }
}

/// Layer counts and channel widths for the two propagation stacks.
///
/// `intra_dims` has `t_intra + 1` entries, `inter_dims` has `t_inter + 1`,
/// and the chains must join: the inter stack consumes the intra stack output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnStackConfig {
    pub t_intra: usize,
    pub t_inter: usize,
    pub intra_dims: Vec<usize>,
    pub inter_dims: Vec<usize>,
}

impl Default for GcnStackConfig {
    fn default() -> Self {
        GcnStackConfig {
            t_intra: 2,
            t_inter: 1,
            intra_dims: vec![64, 128, 64],
            inter_dims: vec![64, 64],
        }
    }
}

impl GcnStackConfig {
    /// Widths for arbitrary depths: the first layer expands to `hidden`, the
    /// last contracts back to `feature_dim`, middle layers stay at `hidden`.
    pub fn with_depths(t_intra: usize, t_inter: usize, feature_dim: usize, hidden: usize) -> Self {
        let ladder = |t: usize| -> Vec<usize> {
            let mut dims = vec![feature_dim];
            for layer in 0..t {
                dims.push(if layer + 1 == t { feature_dim } else { hidden });
            }
            dims
        };
        GcnStackConfig {
            t_intra,
            t_inter,
            intra_dims: ladder(t_intra),
            inter_dims: {
                let mut dims = vec![feature_dim];
                for layer in 0..t_inter {
                    dims.push(if layer + 1 == t_inter { feature_dim } else { hidden });
                }
                dims
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intra_dims.len() != self.t_intra + 1 {
            return Err(AgraError::Config(format!(
                "intra_dims must have t_intra + 1 = {} entries, got {}",
                self.t_intra + 1,
                self.intra_dims.len()
            )));
        }
        if self.inter_dims.len() != self.t_inter + 1 {
            return Err(AgraError::Config(format!(
                "inter_dims must have t_inter + 1 = {} entries, got {}",
                self.t_inter + 1,
                self.inter_dims.len()
            )));
        }
        if self.inter_dims[0] != *self.intra_dims.last().unwrap() {
            return Err(AgraError::Config(format!(
                "inter stack input dim {} does not match intra stack output dim {}",
                self.inter_dims[0],
                self.intra_dims.last().unwrap()
            )));
        }
        if self.intra_dims.iter().chain(&self.inter_dims).any(|&d| d == 0) {
            return Err(AgraError::Config("gcn dims must be nonzero".into()));
        }
        Ok(())
    }

    /// Node feature width after both stacks.
    pub fn output_dim(&self) -> usize {
        *self.inter_dims.last().unwrap()
    }
}

fn check_finite(name: &str, m: &ArrayView2<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(AgraError::Numeric(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// One propagation step: `activation(adjacency . features . weight)`,
/// computed exactly as written with no implicit normalization.
pub fn gcn_layer(
    features: &Array2<f64>,
    adjacency: &Array2<f64>,
    layer: &GcnLayerParams,
) -> Result<Array2<f64>> {
    let (n, d_in) = features.dim();
    if adjacency.dim() != (n, n) {
        return Err(AgraError::Dimension(format!(
            "adjacency is {:?}, expected ({n}, {n})",
            adjacency.dim()
        )));
    }
    if layer.weight.nrows() != d_in {
        return Err(AgraError::Dimension(format!(
            "weight is {:?}, expected ({d_in}, _)",
            layer.weight.dim()
        )));
    }
    check_finite("features", &features.view())?;
    check_finite("adjacency", &adjacency.view())?;
    check_finite("weight", &layer.weight.view())?;
    let z = adjacency.dot(&features.dot(&layer.weight));
    Ok(layer.activation.apply(&z))
}

/// Run both stacks over a single graph's node matrix. Returns the features
/// after the intra stack and after the inter stack. With `merged` a single
/// stack of the intra layers runs over `intra + inter` and the inter layers
/// are skipped; the first value then equals the final one.
pub fn propagate(
    h0: &Array2<f64>,
    adjacency: &AdjacencyParams,
    intra_layers: &[GcnLayerParams],
    inter_layers: &[GcnLayerParams],
    merged: bool,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if merged {
        let combined = &adjacency.intra + &adjacency.inter;
        let mut h = h0.clone();
        for layer in intra_layers {
            h = gcn_layer(&h, &combined, layer)?;
        }
        return Ok((h.clone(), h));
    }
    let mut h = h0.clone();
    for layer in intra_layers {
        h = gcn_layer(&h, &adjacency.intra, layer)?;
    }
    let h_intra = h.clone();
    for layer in inter_layers {
        h = gcn_layer(&h, &adjacency.inter, layer)?;
    }
    Ok((h_intra, h))
}

// ---------------------------------------------------------------------------
// Batched propagation (shared adjacency, per-sample node blocks)
// ---------------------------------------------------------------------------
//
// A batch of B graphs is stored as one (B * NODE_COUNT) x d matrix; the
// adjacency acts block-diagonally on the node blocks.

/// Per-sample left-multiply: `out[b] = adjacency . m[b]` for each node block.
pub fn block_adj_mul(adjacency: &Array2<f64>, m: &Array2<f64>, nodes: usize) -> Array2<f64> {
    let batch = m.nrows() / nodes;
    let mut out = Array2::zeros(m.raw_dim());
    for b in 0..batch {
        let rows = s![b * nodes..(b + 1) * nodes, ..];
        let block = m.slice(rows);
        ndarray::linalg::general_mat_mul(1.0, adjacency, &block, 0.0, &mut out.slice_mut(rows));
    }
    out
}

/// Per-sample left-multiply by the transpose: `out[b] = adjacency^T . g[b]`.
pub fn block_adj_mul_t(adjacency: &Array2<f64>, g: &Array2<f64>, nodes: usize) -> Array2<f64> {
    let batch = g.nrows() / nodes;
    let mut out = Array2::zeros(g.raw_dim());
    let adj_t = adjacency.t();
    for b in 0..batch {
        let rows = s![b * nodes..(b + 1) * nodes, ..];
        let block = g.slice(rows);
        ndarray::linalg::general_mat_mul(1.0, &adj_t, &block, 0.0, &mut out.slice_mut(rows));
    }
    out
}

/// Accumulate the adjacency gradient over a batch: `da += sum_b g[b] . m[b]^T`.
pub fn block_adj_grad(g: &Array2<f64>, m: &Array2<f64>, nodes: usize, da: &mut Array2<f64>) {
    let batch = m.nrows() / nodes;
    for b in 0..batch {
        let rows = s![b * nodes..(b + 1) * nodes, ..];
        let g_block = g.slice(rows);
        let m_block = m.slice(rows);
        ndarray::linalg::general_mat_mul(1.0, &g_block, &m_block.t(), 1.0, &mut da.view_mut());
    }
}

/// Cached intermediates for one batched propagation step.
#[derive(Debug, Clone)]
pub struct GcnLayerCache {
    /// Input node features, (B * nodes) x d_in.
    pub input: Array2<f64>,
    /// `input . weight`, before adjacency mixing.
    pub projected: Array2<f64>,
    /// Pre-activation `adjacency . projected` per block.
    pub pre_activation: Array2<f64>,
}

/// Batched forward step; returns the activated output and the cache needed
/// for the backward pass.
pub fn gcn_forward_batch(
    features: &Array2<f64>,
    adjacency: &Array2<f64>,
    layer: &GcnLayerParams,
    nodes: usize,
) -> (Array2<f64>, GcnLayerCache) {
    let projected = features.dot(&layer.weight);
    let pre_activation = block_adj_mul(adjacency, &projected, nodes);
    let out = layer.activation.apply(&pre_activation);
    (
        out,
        GcnLayerCache {
            input: features.clone(),
            projected,
            pre_activation,
        },
    )
}

/// Batched backward step. Consumes the upstream gradient and returns the
/// gradient w.r.t. the layer input; accumulates into the weight and
/// adjacency gradients.
pub fn gcn_backward_batch(
    cache: &GcnLayerCache,
    adjacency: &Array2<f64>,
    layer: &GcnLayerParams,
    mut d_out: Array2<f64>,
    nodes: usize,
    d_weight: &mut Array2<f64>,
    d_adjacency: &mut Array2<f64>,
) -> Array2<f64> {
    layer.activation.backprop_inplace(&cache.pre_activation, &mut d_out);
    // d_out is now the gradient at the pre-activation.
    block_adj_grad(&d_out, &cache.projected, nodes, d_adjacency);
    let d_projected = block_adj_mul_t(adjacency, &d_out, nodes);
    ndarray::linalg::general_mat_mul(
        1.0,
        &cache.input.t(),
        &d_projected,
        1.0,
        &mut d_weight.view_mut(),
    );
    d_projected.dot(&layer.weight.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(domain: Domain, region: Region) -> usize {
        GraphTopology::node_index(domain, region)
    }

    fn intra_map(hl: f64, ll: f64, sl: f64) -> HashMap<String, f64> {
        let mut m = HashMap::new();
        m.insert("holistic_local".into(), hl);
        m.insert("local_local".into(), ll);
        m.insert("self_loop".into(), sl);
        m
    }

    fn inter_map(gg: f64, gl: f64, ll: f64) -> HashMap<String, f64> {
        let mut m = HashMap::new();
        m.insert("global_global".into(), gg);
        m.insert("global_local".into(), gl);
        m.insert("local_local".into(), ll);
        m
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn topology_is_total_and_fixed() {
        assert_eq!(NODE_COUNT, 12);
        for i in 0..NODE_COUNT {
            let d = GraphTopology::domain_of(i);
            let r = GraphTopology::region_of(i);
            assert_eq!(GraphTopology::node_index(d, r), i);
        }
        let ids = GraphTopology::node_ids();
        assert_eq!(ids.len(), 12);
        assert_eq!(ids[0], "s.h");
        assert_eq!(ids[6], "t.h");
        assert_eq!(ids[11], "t.rm");
    }

    #[test]
    fn prior_intra_decision_table() {
        let adj = build_prior_intra(&intra_map(1.0, 0.5, 1.0)).unwrap();
        assert_eq!(adj[[node(Domain::Source, Region::Holistic), node(Domain::Source, Region::LeftEye)]], 1.0);
        assert_eq!(adj[[node(Domain::Source, Region::LeftEye), node(Domain::Source, Region::RightEye)]], 0.5);
        assert_eq!(adj[[node(Domain::Source, Region::Holistic), node(Domain::Target, Region::Holistic)]], 0.0);
        assert_eq!(adj[[node(Domain::Target, Region::Nose), node(Domain::Target, Region::Nose)]], 1.0);
    }

    #[test]
    fn prior_intra_is_symmetric() {
        let adj = build_prior_intra(&intra_map(0.3, -0.7, 2.0)).unwrap();
        assert_eq!(adj, adj.t().to_owned());
    }

    #[test]
    fn prior_intra_degenerates_to_identity() {
        let adj = build_prior_intra(&intra_map(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(adj, Array2::<f64>::eye(NODE_COUNT));
    }

    #[test]
    fn prior_intra_missing_key_is_config_error() {
        let mut m = intra_map(1.0, 0.5, 1.0);
        m.remove("self_loop");
        let err = build_prior_intra(&m).unwrap_err();
        assert!(matches!(err, AgraError::Config(_)), "{err}");
        assert!(err.to_string().contains("self_loop"));
    }

    #[test]
    fn prior_inter_decision_table() {
        let adj = build_prior_inter(&inter_map(1.0, 0.5, 0.75)).unwrap();
        assert_eq!(adj[[node(Domain::Source, Region::Holistic), node(Domain::Target, Region::Holistic)]], 1.0);
        assert_eq!(adj[[node(Domain::Source, Region::LeftEye), node(Domain::Target, Region::LeftEye)]], 0.75);
        assert_eq!(adj[[node(Domain::Source, Region::LeftEye), node(Domain::Target, Region::RightEye)]], 0.0);
        assert_eq!(adj[[node(Domain::Source, Region::Holistic), node(Domain::Source, Region::LeftEye)]], 0.0);
        assert_eq!(adj[[node(Domain::Source, Region::Holistic), node(Domain::Target, Region::Nose)]], 0.5);
    }

    #[test]
    fn prior_inter_is_symmetric_and_zero_diagonal() {
        let adj = build_prior_inter(&inter_map(0.9, 0.1, 0.4)).unwrap();
        assert_eq!(adj, adj.t().to_owned());
        for i in 0..NODE_COUNT {
            assert_eq!(adj[[i, i]], 0.0);
        }
    }

    #[test]
    fn prior_inter_all_pairs_flag() {
        let values = InterEdgeValues::default();
        let adj = prior_inter(&values, true);
        assert_eq!(adj[[node(Domain::Source, Region::LeftEye), node(Domain::Target, Region::RightEye)]], 0.75);
    }

    #[test]
    fn prior_structure_check_passes_on_defaults() {
        let adj = AdjacencyParams::from_priors(
            prior_intra(&IntraEdgeValues::default()),
            prior_inter(&InterEdgeValues::default(), false),
        );
        adj.check_prior_structure().unwrap();
    }

    #[test]
    fn gcn_layer_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Array2::from_shape_fn((NODE_COUNT, 5), |_| rng.random_range(0.0..1.0));
        let layer = GcnLayerParams::new(Array2::eye(5), Activation::Relu);
        let out = gcn_layer(&h, &Array2::eye(NODE_COUNT), &layer).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn gcn_layer_zero_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, NODE_COUNT, 8);
        let layer = GcnLayerParams::new(random_matrix(&mut rng, 8, 4), Activation::Relu);
        let out = gcn_layer(&h, &Array2::zeros((NODE_COUNT, NODE_COUNT)), &layer).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((NODE_COUNT, 4)));
    }

    #[test]
    fn gcn_layer_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let h = random_matrix(&mut rng, NODE_COUNT, 64);
            let adj = random_matrix(&mut rng, NODE_COUNT, NODE_COUNT);
            let w = random_matrix(&mut rng, 64, 16);
            let layer = GcnLayerParams::new(w.clone(), Activation::Relu);
            let out = gcn_layer(&h, &adj, &layer).unwrap();

            // Independent per-entry summation: out[i][o] = relu(sum_j sum_k A[i][j] H[j][k] W[k][o]).
            for i in 0..NODE_COUNT {
                for o in 0..16 {
                    let mut acc = 0.0;
                    for j in 0..NODE_COUNT {
                        for k in 0..64 {
                            acc += adj[[i, j]] * h[[j, k]] * w[[k, o]];
                        }
                    }
                    let expect = acc.max(0.0);
                    assert!(
                        (out[[i, o]] - expect).abs() <= 1e-9,
                        "entry ({i}, {o}): {} vs {}",
                        out[[i, o]],
                        expect
                    );
                }
            }
        }
    }

    #[test]
    fn gcn_layer_rejects_shape_mismatch() {
        let h = Array2::<f64>::zeros((NODE_COUNT, 8));
        let layer = GcnLayerParams::new(Array2::zeros((7, 4)), Activation::Relu);
        let err = gcn_layer(&h, &Array2::eye(NODE_COUNT), &layer).unwrap_err();
        assert!(matches!(err, AgraError::Dimension(_)));
    }

    #[test]
    fn gcn_layer_rejects_non_finite() {
        let mut h = Array2::<f64>::zeros((NODE_COUNT, 4));
        h[[0, 0]] = f64::NAN;
        let layer = GcnLayerParams::new(Array2::eye(4), Activation::Relu);
        let err = gcn_layer(&h, &Array2::eye(NODE_COUNT), &layer).unwrap_err();
        assert!(matches!(err, AgraError::Numeric(_)));
    }

    #[test]
    fn gcn_layer_is_linear_in_features_before_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = GcnLayerParams::new(random_matrix(&mut rng, 16, 8), Activation::Identity);
        let adj = random_matrix(&mut rng, NODE_COUNT, NODE_COUNT);
        let h1 = random_matrix(&mut rng, NODE_COUNT, 16);
        let h2 = random_matrix(&mut rng, NODE_COUNT, 16);
        let (alpha, beta) = (0.37, -1.21);
        let lhs = gcn_layer(&(alpha * &h1 + beta * &h2), &adj, &layer).unwrap();
        let rhs = alpha * &gcn_layer(&h1, &adj, &layer).unwrap()
            + beta * &gcn_layer(&h2, &adj, &layer).unwrap();
        let max_diff = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff <= 1e-9, "max diff {max_diff}");
    }

    #[test]
    fn gcn_layer_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = GcnLayerParams::new(random_matrix(&mut rng, 6, 6), Activation::Relu);
        let adj = random_matrix(&mut rng, NODE_COUNT, NODE_COUNT);
        let h = random_matrix(&mut rng, NODE_COUNT, 6);

        // A fixed permutation of the node indices.
        let perm: Vec<usize> = vec![4, 7, 0, 11, 2, 9, 5, 1, 10, 3, 8, 6];
        let mut p = Array2::zeros((NODE_COUNT, NODE_COUNT));
        for (i, &j) in perm.iter().enumerate() {
            p[[i, j]] = 1.0;
        }
        let ph = p.dot(&h);
        let pap = p.dot(&adj).dot(&p.t());
        let permuted_out = gcn_layer(&ph, &pap, &layer).unwrap();
        let out_permuted = p.dot(&gcn_layer(&h, &adj, &layer).unwrap());
        let max_diff = (&permuted_out - &out_permuted)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max_diff <= 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn propagate_empty_stacks_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h0 = random_matrix(&mut rng, NODE_COUNT, 8);
        let adj = AdjacencyParams::from_priors(
            prior_intra(&IntraEdgeValues::default()),
            prior_inter(&InterEdgeValues::default(), false),
        );
        let (h_intra, h_final) = propagate(&h0, &adj, &[], &[], false).unwrap();
        assert_eq!(h_intra, h0);
        assert_eq!(h_final, h0);
    }

    #[test]
    fn propagate_matches_manual_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h0 = random_matrix(&mut rng, NODE_COUNT, 10);
        let adj = AdjacencyParams::from_priors(
            random_matrix(&mut rng, NODE_COUNT, NODE_COUNT),
            random_matrix(&mut rng, NODE_COUNT, NODE_COUNT),
        );
        let intra = vec![
            GcnLayerParams::new(random_matrix(&mut rng, 10, 12), Activation::Relu),
            GcnLayerParams::new(random_matrix(&mut rng, 12, 10), Activation::Relu),
        ];
        let inter = vec![GcnLayerParams::new(random_matrix(&mut rng, 10, 10), Activation::Relu)];

        let (h_intra, h_final) = propagate(&h0, &adj, &intra, &inter, false).unwrap();

        let step1 = gcn_layer(&h0, &adj.intra, &intra[0]).unwrap();
        let step2 = gcn_layer(&step1, &adj.intra, &intra[1]).unwrap();
        let step3 = gcn_layer(&step2, &adj.inter, &inter[0]).unwrap();
        let d_intra = (&h_intra - &step2).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let d_final = (&h_final - &step3).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(d_intra <= 1e-9 && d_final <= 1e-9);
    }

    #[test]
    fn propagate_merged_uses_summed_adjacency() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h0 = random_matrix(&mut rng, NODE_COUNT, 6);
        let adj = AdjacencyParams::from_priors(
            random_matrix(&mut rng, NODE_COUNT, NODE_COUNT),
            random_matrix(&mut rng, NODE_COUNT, NODE_COUNT),
        );
        let intra = vec![
            GcnLayerParams::new(random_matrix(&mut rng, 6, 9), Activation::Relu),
            GcnLayerParams::new(random_matrix(&mut rng, 9, 6), Activation::Relu),
        ];
        let inter = vec![GcnLayerParams::new(random_matrix(&mut rng, 6, 6), Activation::Relu)];

        let (h_intra, h_final) = propagate(&h0, &adj, &intra, &inter, true).unwrap();
        assert_eq!(h_intra, h_final);

        let combined = &adj.intra + &adj.inter;
        let step1 = gcn_layer(&h0, &combined, &intra[0]).unwrap();
        let step2 = gcn_layer(&step1, &combined, &intra[1]).unwrap();
        assert_eq!(h_final, step2);
    }

    #[test]
    fn batched_ops_match_per_sample_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = 5;
        let adj = random_matrix(&mut rng, NODE_COUNT, NODE_COUNT);
        let m = random_matrix(&mut rng, batch * NODE_COUNT, 7);

        let fused = block_adj_mul(&adj, &m, NODE_COUNT);
        for b in 0..batch {
            let rows = s![b * NODE_COUNT..(b + 1) * NODE_COUNT, ..];
            let expect = adj.dot(&m.slice(rows).to_owned());
            let diff = (&fused.slice(rows) - &expect).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            assert!(diff <= 1e-12);
        }
    }

    #[test]
    fn gcn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch = 2;
        let h = random_matrix(&mut rng, batch * NODE_COUNT, 6);
        let adj = random_matrix(&mut rng, NODE_COUNT, NODE_COUNT);
        let layer = GcnLayerParams::new(random_matrix(&mut rng, 6, 5), Activation::Relu);
        // Fixed random co-gradient to make the scalar loss sensitive to all outputs.
        let co = random_matrix(&mut rng, batch * NODE_COUNT, 5);

        let loss = |h: &Array2<f64>, adj: &Array2<f64>, w: &Array2<f64>| -> f64 {
            let l = GcnLayerParams::new(w.clone(), Activation::Relu);
            let (out, _) = gcn_forward_batch(h, adj, &l, NODE_COUNT);
            (&out * &co).sum()
        };

        let (_, cache) = gcn_forward_batch(&h, &adj, &layer, NODE_COUNT);
        let mut d_w = Array2::zeros(layer.weight.raw_dim());
        let mut d_adj = Array2::zeros(adj.raw_dim());
        let d_h = gcn_backward_batch(&cache, &adj, &layer, co.clone(), NODE_COUNT, &mut d_w, &mut d_adj);

        let step = 1e-5;
        let check = |analytic: &Array2<f64>, numeric: &Array2<f64>, name: &str| {
            let scale = analytic
                .iter()
                .chain(numeric.iter())
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(1e-12);
            let err = (analytic - numeric).iter().fold(0.0f64, |m, v| m.max(v.abs())) / scale;
            assert!(err < 1e-4, "{name} gradient relative error {err}");
        };

        let mut num = Array2::zeros(d_h.raw_dim());
        for i in 0..h.nrows() {
            for j in 0..h.ncols() {
                let mut hp = h.clone();
                let mut hm = h.clone();
                hp[[i, j]] += step;
                hm[[i, j]] -= step;
                num[[i, j]] = (loss(&hp, &adj, &layer.weight) - loss(&hm, &adj, &layer.weight)) / (2.0 * step);
            }
        }
        check(&d_h, &num, "features");

        let mut num = Array2::zeros(d_w.raw_dim());
        for i in 0..layer.weight.nrows() {
            for j in 0..layer.weight.ncols() {
                let mut wp = layer.weight.clone();
                let mut wm = layer.weight.clone();
                wp[[i, j]] += step;
                wm[[i, j]] -= step;
                num[[i, j]] = (loss(&h, &adj, &wp) - loss(&h, &adj, &wm)) / (2.0 * step);
            }
        }
        check(&d_w, &num, "weight");

        let mut num = Array2::zeros(d_adj.raw_dim());
        for i in 0..NODE_COUNT {
            for j in 0..NODE_COUNT {
                let mut ap = adj.clone();
                let mut am = adj.clone();
                ap[[i, j]] += step;
                am[[i, j]] -= step;
                num[[i, j]] = (loss(&h, &ap, &layer.weight) - loss(&h, &am, &layer.weight)) / (2.0 * step);
            }
        }
        check(&d_adj, &num, "adjacency");
    }

    #[test]
    fn default_stack_output_is_node_by_64() {
        let cfg = GcnStackConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.output_dim(), 64);
    }
}
