//! Graph Attention Inter-block (GAI) module.
//!
//! Every encoder block output `F_i` becomes a node of a fully connected graph:
//!
//! 1. *Feature transformation*: a 1×1 convolution maps `F_i` to `C_out` channels,
//!    global average pooling yields the initial node vector `V_i^0`, and bilinear
//!    resizing yields the spatial feature `K_i` at the encoder output size.
//! 2. *Graph attention*: `M` rounds of single-head attention over all node pairs
//!    (self-loops included) refine the node vectors.
//! 3. *Relation mapping*: a two-layer perceptron per (task, node) turns `V_i^M` into a
//!    channel weight vector `e_{i,t}`, and the task feature is `z_t = Σ_i e_{i,t} ⊙ K_i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const STAGE_NODE_CONV: &str = "node_conv";
pub const STAGE_INTERPOLATION: &str = "interpolation";
pub const STAGE_NODE_TRANSFORM: &str = "node_transform";
pub const STAGE_ATTENTION_LOGITS: &str = "attention_logits";
pub const STAGE_AGGREGATION: &str = "aggregation";
pub const STAGE_RELATION_MAPPING: &str = "relation_mapping";
pub const STAGE_FUSION: &str = "fusion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GaiVariant {
    #[default]
    Full,
    /// Node updating disabled: relation mapping reads `V^0` directly.
    GaiW,
    /// Scaled dot-product self-attention in place of the graph attention layer.
    SimpAtt,
}

impl GaiVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            GaiVariant::Full => "full",
            GaiVariant::GaiW => "gai_w",
            GaiVariant::SimpAtt => "simp_att",
        }
    }
}

fn default_iterations() -> usize {
    1
}
fn default_c_rm() -> usize {
    256
}
fn default_slope() -> f64 {
    0.2
}
fn default_c_out() -> usize {
    512
}

/// Hyperparameters of the GAI module. The node count `N` comes from the encoder and
/// the task count `T` from the task list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaiConfig {
    #[serde(default = "default_c_out")]
    pub c_out: usize,
    /// Attention iterations `M`.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Hidden width of the relation-mapping perceptrons.
    #[serde(default = "default_c_rm")]
    pub c_rm: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default)]
    pub variant: GaiVariant,
    /// Learn a separate attention vector per iteration instead of one shared vector.
    #[serde(default)]
    pub per_iteration_attention: bool,
    /// Softmax the task-node weights over nodes, per channel.
    #[serde(default)]
    pub normalize_task_weights: bool,
}

impl Default for GaiConfig {
    fn default() -> Self {
        Self {
            c_out: default_c_out(),
            iterations: default_iterations(),
            c_rm: default_c_rm(),
            leaky_slope: default_slope(),
            variant: GaiVariant::Full,
            per_iteration_attention: false,
            normalize_task_weights: false,
        }
    }
}

impl GaiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_out == 0 || self.c_rm == 0 {
            return Err(Error::Config("GAI c_out and c_rm must be >= 1".into()));
        }
        if self.iterations == 0 && self.variant != GaiVariant::GaiW {
            return Err(Error::Config("GAI needs at least one attention iteration".into()));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        Ok(())
    }
}

/// Node vectors `V^m` as an `N×C_out` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub values: Tensor,
    pub iteration: usize,
}

impl NodeState {
    pub fn num_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let c = self.values.shape()[1];
        &self.values.data()[i * c..(i + 1) * c]
    }
}

#[derive(Debug, Clone)]
pub struct FeatureTransformParams {
    pub convs: Vec<Conv2d>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionIteration {
    pub u: ParamId,
    pub p: ParamId,
    pub a: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct SimpAttIteration {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Debug, Clone)]
pub enum AttentionParams {
    Graph(Vec<AttentionIteration>),
    Simple(Vec<SimpAttIteration>),
    Disabled,
}

/// `layers[t][i] = (Linear_{i1,t}, Linear_{i2,t})`.
#[derive(Debug, Clone)]
pub struct RelationMappingParams {
    pub layers: Vec<Vec<(Linear, Linear)>>,
}

#[derive(Debug, Clone)]
pub struct GaiModule {
    pub config: GaiConfig,
    pub num_nodes: usize,
    pub num_tasks: usize,
    pub transform: FeatureTransformParams,
    pub attention: AttentionParams,
    pub relation: RelationMappingParams,
}

/// Every intermediate product of one GAI forward pass.
#[derive(Debug, Clone)]
pub struct GaiTrace {
    pub v0: Var,
    pub v_final: Var,
    /// Attention matrices (`N×N`), one per iteration.
    pub attention: Vec<Var>,
    pub k: Vec<Var>,
    /// `e[t][i]`.
    pub e: Vec<Vec<Var>>,
    pub z: Vec<Var>,
}

impl GaiModule {
    /// `node_channels[i]` is `C_i`, the channel count of encoder block `i`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &GaiConfig,
        node_channels: &[usize],
        num_tasks: usize,
    ) -> Result<Self> {
        config.validate()?;
        if node_channels.is_empty() || num_tasks == 0 {
            return Err(Error::Config("GAI needs at least one node and one task".into()));
        }
        let c = config.c_out;
        let convs = node_channels
            .iter()
            .enumerate()
            .map(|(i, &ci)| Conv2d::new(store, &format!("{prefix}.transform{i}"), ci, c, 1, ConvGeom::UNIT))
            .collect();
        let attention = match config.variant {
            GaiVariant::Full => {
                let shared = (!config.per_iteration_attention)
                    .then(|| store.zeros(format!("{prefix}.attn.a"), &[2 * c]));
                AttentionParams::Graph(
                    (0..config.iterations)
                        .map(|m| AttentionIteration {
                            u: store.near_identity(format!("{prefix}.attn{m}.u"), c, 0.01),
                            p: store.near_identity(format!("{prefix}.attn{m}.p"), c, 0.01),
                            a: shared.unwrap_or_else(|| store.zeros(format!("{prefix}.attn{m}.a"), &[2 * c])),
                        })
                        .collect(),
                )
            }
            GaiVariant::SimpAtt => AttentionParams::Simple(
                (0..config.iterations)
                    .map(|m| SimpAttIteration {
                        w_q: store.glorot(format!("{prefix}.simp{m}.w_q"), &[c, c], c, c),
                        w_k: store.glorot(format!("{prefix}.simp{m}.w_k"), &[c, c], c, c),
                        w_v: store.near_identity(format!("{prefix}.simp{m}.w_v"), c, 0.01),
                    })
                    .collect(),
            ),
            GaiVariant::GaiW => AttentionParams::Disabled,
        };
        let layers = (0..num_tasks)
            .map(|t| {
                (0..node_channels.len())
                    .map(|i| {
                        (
                            Linear::new(store, &format!("{prefix}.rm.t{t}.n{i}.l1"), c, config.c_rm),
                            Linear::new(store, &format!("{prefix}.rm.t{t}.n{i}.l2"), config.c_rm, c),
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            num_nodes: node_channels.len(),
            num_tasks,
            transform: FeatureTransformParams { convs },
            attention,
            relation: RelationMappingParams { layers },
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.transform.convs.iter().flat_map(|c| c.params()).collect();
        match &self.attention {
            AttentionParams::Graph(its) => {
                for it in its {
                    v.extend([it.u, it.p]);
                    if !v.contains(&it.a) {
                        v.push(it.a);
                    }
                }
            }
            AttentionParams::Simple(its) => {
                for it in its {
                    v.extend([it.w_q, it.w_k, it.w_v]);
                }
            }
            AttentionParams::Disabled => {}
        }
        for row in &self.relation.layers {
            for (l1, l2) in row {
                v.extend(l1.params());
                v.extend(l2.params());
            }
        }
        v
    }

    /// Full module: feature transform, attention, relation mapping and fusion.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: &[Var], out_hw: (usize, usize)) -> Result<GaiTrace> {
        let (v0, k) = feature_transform(g, store, &self.transform, feats, self.config.c_out, out_hw)?;
        let (v_final, attention) = graph_attention_run(g, store, v0, &self.attention, self.config.leaky_slope)?;
        let mut e = relation_mapping(g, store, &self.relation, v_final)?;
        if self.config.normalize_task_weights {
            e = e
                .iter()
                .map(|row| normalize_over_nodes(g, row))
                .collect::<Result<_>>()?;
        }
        let z = e
            .iter()
            .map(|row| fuse_task_feature(g, row, &k))
            .collect::<Result<_>>()?;
        Ok(GaiTrace {
            v0,
            v_final,
            attention,
            k,
            e,
            z,
        })
    }
}

/// Returns `(V^0 as N×C_out, [K_1..K_N])`.
pub fn feature_transform(
    g: &mut Graph,
    store: &ParamStore,
    params: &FeatureTransformParams,
    feats: &[Var],
    c_out: usize,
    (out_h, out_w): (usize, usize),
) -> Result<(Var, Vec<Var>)> {
    if feats.len() != params.convs.len() {
        return Err(Error::shape(
            "feature_transform",
            format!("{} features for {} nodes", feats.len(), params.convs.len()),
        ));
    }
    let mut pooled = Vec::with_capacity(feats.len());
    let mut k = Vec::with_capacity(feats.len());
    for (&f, conv) in feats.iter().zip(&params.convs) {
        if conv.out_channels != c_out {
            return Err(Error::shape("feature_transform", "node conv does not produce C_out channels"));
        }
        g.set_flop_stage(Some(STAGE_NODE_CONV));
        let fp = conv.forward(g, store, f)?;
        g.set_flop_stage(None);
        pooled.push(g.global_avg_pool(fp)?);
        g.set_flop_stage(Some(STAGE_INTERPOLATION));
        k.push(g.bilinear_resize(fp, out_h, out_w)?);
        g.set_flop_stage(None);
    }
    Ok((g.stack(&pooled)?, k))
}

/// One graph-attention update on `V: N×C`. Returns `(V^m, attention matrix)`.
pub fn graph_attention_step(g: &mut Graph, v: Var, u: Var, p: Var, a: Var, slope: f64) -> Result<(Var, Var)> {
    g.set_flop_stage(Some(STAGE_NODE_TRANSFORM));
    let uv = g.linear(v, u, None)?;
    g.set_flop_stage(Some(STAGE_ATTENTION_LOGITS));
    let logits = g.pair_logits(uv, a)?;
    g.set_flop_stage(None);
    let logits = g.leaky_relu(logits, slope)?;
    let att = g.softmax(logits)?;
    g.set_flop_stage(Some(STAGE_NODE_TRANSFORM));
    let pv = g.linear(v, p, None)?;
    g.set_flop_stage(Some(STAGE_AGGREGATION));
    let agg = g.matmul(att, pv)?;
    g.set_flop_stage(None);
    Ok((g.relu(agg)?, att))
}

/// Scaled dot-product self-attention over node vectors, without a final nonlinearity.
pub fn simp_att_step(g: &mut Graph, v: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<(Var, Var)> {
    let c = g.shape(v)[1];
    g.set_flop_stage(Some(STAGE_NODE_TRANSFORM));
    let q = g.linear(v, w_q, None)?;
    let k = g.linear(v, w_k, None)?;
    let val = g.linear(v, w_v, None)?;
    g.set_flop_stage(Some(STAGE_ATTENTION_LOGITS));
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    g.set_flop_stage(None);
    let scores = g.scale(scores, 1.0 / (c as f64).sqrt())?;
    let att = g.softmax(scores)?;
    g.set_flop_stage(Some(STAGE_AGGREGATION));
    let out = g.matmul(att, val)?;
    g.set_flop_stage(None);
    Ok((out, att))
}

/// Applies every configured attention iteration. The disabled variant returns `v0`
/// itself.
pub fn graph_attention_run(
    g: &mut Graph,
    store: &ParamStore,
    v0: Var,
    params: &AttentionParams,
    slope: f64,
) -> Result<(Var, Vec<Var>)> {
    let mut v = v0;
    let mut atts = Vec::new();
    match params {
        AttentionParams::Graph(its) => {
            for it in its {
                let (u, p, a) = (g.param(store, it.u), g.param(store, it.p), g.param(store, it.a));
                let (nv, att) = graph_attention_step(g, v, u, p, a, slope)?;
                v = nv;
                atts.push(att);
            }
        }
        AttentionParams::Simple(its) => {
            for it in its {
                let (q, k, w) = (g.param(store, it.w_q), g.param(store, it.w_k), g.param(store, it.w_v));
                let (nv, att) = simp_att_step(g, v, q, k, w)?;
                v = nv;
                atts.push(att);
            }
        }
        AttentionParams::Disabled => {}
    }
    Ok((v, atts))
}

/// `e[t][i] = Linear_{i2,t}(ReLU(Linear_{i1,t}(V_i)))`, unnormalised.
pub fn relation_mapping(
    g: &mut Graph,
    store: &ParamStore,
    params: &RelationMappingParams,
    v: Var,
) -> Result<Vec<Vec<Var>>> {
    let n = g.shape(v)[0];
    if params.layers.iter().any(|row| row.len() != n) {
        return Err(Error::shape("relation_mapping", format!("parameters do not cover {n} nodes")));
    }
    let rows: Vec<Var> = (0..n).map(|i| g.row(v, i)).collect::<Result<_>>()?;
    let mut e = Vec::with_capacity(params.layers.len());
    for row in &params.layers {
        let mut et = Vec::with_capacity(n);
        for ((l1, l2), &vi) in row.iter().zip(&rows) {
            g.set_flop_stage(Some(STAGE_RELATION_MAPPING));
            let h = l1.forward(g, store, vi)?;
            g.set_flop_stage(None);
            let h = g.relu(h)?;
            g.set_flop_stage(Some(STAGE_RELATION_MAPPING));
            et.push(l2.forward(g, store, h)?);
            g.set_flop_stage(None);
        }
        e.push(et);
    }
    Ok(e)
}

/// Softmax over nodes, separately for each channel.
pub fn normalize_over_nodes(g: &mut Graph, e_t: &[Var]) -> Result<Vec<Var>> {
    let stacked = g.stack(e_t)?;
    let by_channel = g.transpose(stacked)?;
    let soft = g.softmax(by_channel)?;
    let back = g.transpose(soft)?;
    (0..e_t.len()).map(|i| g.row(back, i)).collect()
}

/// `z_t = Σ_i e_{i,t} ⊙ K_i` with channel-wise weighting.
pub fn fuse_task_feature(g: &mut Graph, e_t: &[Var], k: &[Var]) -> Result<Var> {
    if e_t.len() != k.len() {
        return Err(Error::shape("fuse_task_feature", "weights and features cover different nodes"));
    }
    g.set_flop_stage(Some(STAGE_FUSION));
    let weighted: Result<Vec<Var>> = e_t.iter().zip(k).map(|(&e, &ki)| g.channel_scale(ki, e)).collect();
    g.set_flop_stage(None);
    g.add_all(&weighted?)
}

pub fn node_state(g: &Graph, v: Var, iteration: usize) -> NodeState {
    NodeState {
        values: g.value(v).clone(),
        iteration,
    }
}

/// Analytic multiply counts of one GAI forward pass, per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlopBreakdown {
    pub node_conv: u64,
    pub interpolation: u64,
    pub node_transform: u64,
    pub attention_logits: u64,
    pub aggregation: u64,
    pub relation_mapping: u64,
    pub fusion: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.node_conv
            + self.interpolation
            + self.node_transform
            + self.attention_logits
            + self.aggregation
            + self.relation_mapping
            + self.fusion
    }

    pub fn stages(&self) -> [(&'static str, u64); 7] {
        [
            (STAGE_NODE_CONV, self.node_conv),
            (STAGE_INTERPOLATION, self.interpolation),
            (STAGE_NODE_TRANSFORM, self.node_transform),
            (STAGE_ATTENTION_LOGITS, self.attention_logits),
            (STAGE_AGGREGATION, self.aggregation),
            (STAGE_RELATION_MAPPING, self.relation_mapping),
            (STAGE_FUSION, self.fusion),
        ]
    }

    /// Reads the counters a [`Graph`] accumulated while running [`GaiModule::forward`].
    pub fn from_graph(g: &Graph) -> Self {
        let c = g.flop_counts();
        let get = |k: &str| c.get(k).copied().unwrap_or(0);
        Self {
            node_conv: get(STAGE_NODE_CONV),
            interpolation: get(STAGE_INTERPOLATION),
            node_transform: get(STAGE_NODE_TRANSFORM),
            attention_logits: get(STAGE_ATTENTION_LOGITS),
            aggregation: get(STAGE_AGGREGATION),
            relation_mapping: get(STAGE_RELATION_MAPPING),
            fusion: get(STAGE_FUSION),
        }
    }
}

/// Closed-form counts for the full variant: `block_shapes[i] = [C_i, H_i, W_i]`, output
/// resolution `H_out×W_out`.
pub fn flop_count_gai(
    config: &GaiConfig,
    num_tasks: usize,
    block_shapes: &[[usize; 3]],
    (out_h, out_w): (usize, usize),
) -> FlopBreakdown {
    let n = block_shapes.len() as u64;
    let t = num_tasks as u64;
    let c = config.c_out as u64;
    let m = config.iterations as u64;
    let hw = (out_h * out_w) as u64;
    FlopBreakdown {
        node_conv: block_shapes
            .iter()
            .map(|&[ci, hi, wi]| c * (hi * wi * ci) as u64)
            .sum(),
        interpolation: 9 * n * c * hw,
        node_transform: 2 * m * n * c * c,
        attention_logits: m * n * n * 2 * c,
        aggregation: m * n * n * c,
        relation_mapping: 2 * n * t * c * config.c_rm as u64,
        fusion: n * t * c * hw,
    }
}
