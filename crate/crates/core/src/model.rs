//! The full regressor: temporal video encoder, pre-fusion transformer,
//! manifold projections, geometry experts with attention, routing,
//! tangent fusion, refinement and the multi-task head.
//!
//! A batch of clips runs on one tape: token rows of all clips are stacked
//! and attention is kept within each clip by block masks.

use std::collections::{BTreeMap, HashMap};

use geomoe_tensor::{ParamScale, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureBundle, TARGETS};
use crate::error::{invalid, Result, StageExt};
use crate::experts::{
    euclidean_expert, hyperbolic_expert, intra_manifold_attention, spherical_expert, AttentionConfig, Geometry,
    LayerVars, ManifoldCtx,
};
use crate::losses::{
    corr_boost_loss, cov_align_loss, head_regularization, huber_loss, BalancerState, LossConfig, COMPONENTS,
};
use crate::manifolds::{Curvature, PoincareBall, Sphere};
use crate::nn::{block_mask, layer_norm_affine, linear, multi_head_attention, segment_mask, Activation, AttentionVars, Dropout, LN_EPS};
use crate::routing::{hard_route, load_balance_loss, refine, route, routing_entropy_loss, tangent_fuse, RefinerVars, RouterVars, RoutingMode, EXPERTS};

/// Which experts run. A single geometry bypasses the router with weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryMode {
    All,
    Hyperbolic,
    Spherical,
    Euclidean,
}

impl GeometryMode {
    pub fn single(self) -> Option<Geometry> {
        match self {
            GeometryMode::All => None,
            GeometryMode::Hyperbolic => Some(Geometry::Hyperbolic),
            GeometryMode::Spherical => Some(Geometry::Spherical),
            GeometryMode::Euclidean => Some(Geometry::Euclidean),
        }
    }

    fn runs(self, g: Geometry) -> bool {
        self.single().is_none_or(|s| s == g)
    }
}

impl std::str::FromStr for GeometryMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(GeometryMode::All),
            "hyperbolic" => Ok(GeometryMode::Hyperbolic),
            "spherical" => Ok(GeometryMode::Spherical),
            "euclidean" => Ok(GeometryMode::Euclidean),
            other => Err(format!("unknown geometry mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_e: usize,
    pub pre_layers: usize,
    pub pre_heads: usize,
    pub ffn_mult: usize,
    pub temporal_heads: usize,
    pub expert_layers: usize,
    pub expert_dropout: f64,
    pub attention: AttentionConfig,
    pub router_hidden: usize,
    pub refiner_hidden: usize,
    pub head_shared: usize,
    pub adapter_hidden: usize,
    pub targets: usize,
    pub curvature: f64,
    pub geometry: GeometryMode,
    pub routing: RoutingMode,
    /// Learning-rate multipliers per parameter group; absent groups use 1.
    pub group_lr: BTreeMap<String, f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 768,
            d_e: 128,
            pre_layers: 2,
            pre_heads: 4,
            ffn_mult: 4,
            temporal_heads: 4,
            expert_layers: 2,
            expert_dropout: 0.1,
            attention: AttentionConfig::default(),
            router_hidden: 64,
            refiner_hidden: 128,
            head_shared: 512,
            adapter_hidden: 64,
            targets: TARGETS,
            curvature: 1.0,
            geometry: GeometryMode::All,
            routing: RoutingMode::Learned,
            group_lr: BTreeMap::new(),
        }
    }
}

impl ModelConfig {
    /// Desk scale: `d_model = 64`, `d_e = 32`, head widths scaled with `d_e`.
    /// Four attention tokens keep two features per head; eight would leave
    /// scalar heads.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            d_e: 32,
            refiner_hidden: 64,
            head_shared: 128,
            adapter_hidden: 16,
            attention: AttentionConfig {
                heads: 4,
                temperature: 1.0,
                tokens: 4,
            },
            ..Self::default()
        }
    }

    /// Gradient-check scale: `d_model = 16`, `d_e = 8`, narrow head.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            d_e: 8,
            pre_heads: 2,
            ffn_mult: 2,
            temporal_heads: 2,
            attention: AttentionConfig {
                heads: 2,
                temperature: 1.0,
                tokens: 4,
            },
            router_hidden: 8,
            refiner_hidden: 8,
            head_shared: 16,
            adapter_hidden: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("d_model", self.d_model),
            ("d_e", self.d_e),
            ("pre_heads", self.pre_heads),
            ("ffn_mult", self.ffn_mult),
            ("temporal_heads", self.temporal_heads),
            ("expert_layers", self.expert_layers),
            ("router_hidden", self.router_hidden),
            ("refiner_hidden", self.refiner_hidden),
            ("head_shared", self.head_shared),
            ("adapter_hidden", self.adapter_hidden),
            ("targets", self.targets),
        ];
        for (name, v) in pos {
            if v == 0 {
                return invalid(format!("model config: {name} must be positive"));
            }
        }
        if self.d_model % 2 != 0 {
            return invalid("model config: d_model must be even (two LSTM directions of d_model/2)");
        }
        if self.d_model % self.pre_heads != 0 || self.d_model % self.temporal_heads != 0 {
            return invalid("model config: head counts must divide d_model");
        }
        if !(0.0..1.0).contains(&self.expert_dropout) {
            return invalid("model config: expert dropout must lie in [0, 1)");
        }
        self.attention.validate(self.d_e)?;
        Curvature::new(self.curvature)?;
        Ok(())
    }

    pub fn ball(&self) -> Result<PoincareBall> {
        Ok(PoincareBall::new(Curvature::new(self.curvature)?))
    }
}

/// Named parameter tensors in a fixed order, each tagged with its group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
    pub groups: Vec<String>,
    pub decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            groups: Vec::new(),
            decay: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: String, value: Tensor, group: &str, decay: bool) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group.to_string());
        self.decay.push(decay);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.values[i])
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn scales(&self, group_lr: &BTreeMap<String, f64>) -> Vec<ParamScale> {
        self.groups
            .iter()
            .zip(&self.decay)
            .map(|(g, &decay)| ParamScale {
                lr: group_lr.get(g).copied().unwrap_or(1.0),
                decay,
            })
            .collect()
    }

    /// Trainable leaves (or constants) for every parameter, in order.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect()
    }

    /// Replaces values from `(name, tensor)` pairs; names and shapes must
    /// match this store exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.len() {
            return invalid(format!("checkpoint has {} parameters, model has {}", entries.len(), self.len()));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.values[i].shape() {
                return invalid(format!(
                    "checkpoint parameter {i} is {name} {:?}, model expects {} {:?}",
                    t.shape(),
                    self.names[i],
                    self.values[i].shape()
                ));
            }
            self.values[i] = t;
        }
        Ok(())
    }
}

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: [usize; 2], bound: f64, group: &str) {
        let data = (0..shape[0] * shape[1]).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.push(name, Tensor::new(shape.to_vec(), data).expect("shape"), group, true);
    }

    /// `out × in` weight, `U(±scale/√in)`.
    fn weight(&mut self, name: String, out: usize, inp: usize, scale: f64, group: &str) {
        self.uniform(name, [out, inp], scale / (inp as f64).sqrt(), group);
    }

    fn zeros(&mut self, name: String, shape: [usize; 2], group: &str) {
        self.store.push(name, Tensor::zeros(shape.to_vec()), group, false);
    }

    fn ones(&mut self, name: String, shape: [usize; 2], group: &str) {
        self.store.push(name, Tensor::ones(shape.to_vec()), group, false);
    }
}

fn expert_tag(g: Geometry) -> &'static str {
    match g {
        Geometry::Hyperbolic => "hyp",
        Geometry::Spherical => "sph",
        Geometry::Euclidean => "euc",
    }
}

fn expert_activation(g: Geometry) -> Activation {
    match g {
        Geometry::Hyperbolic | Geometry::Spherical => Activation::Tanh,
        Geometry::Euclidean => Activation::Relu,
    }
}

/// Per-batch summaries of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean tangent-vector norm per geometry (0 for skipped experts).
    pub tangent_norms: [f64; 3],
    /// Mean fused routing weights.
    pub routing_mean: [f64; 3],
    /// Mean routing entropy, in `[0, ln 3]`.
    pub routing_entropy: f64,
}

pub struct Forward<'t> {
    /// `B × targets`.
    pub pred: Var<'t>,
    /// Weights used for fusion, `B × 3`.
    pub routing: Var<'t>,
    /// Router softmax before any hard or fixed override, `B × 3`.
    pub routing_soft: Var<'t>,
    /// Adapter weights subject to head regularization.
    pub adapters: [Var<'t>; 2],
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crmf {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

struct View<'a, 't> {
    vars: &'a [Var<'t>],
    store: &'a ParamStore,
}

impl<'t> View<'_, 't> {
    fn p(&self, name: &str) -> Var<'t> {
        let i = self.store.position(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }
}

/// Row offsets of consecutive blocks of the given sizes.
fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &s in sizes {
        out.push(acc);
        acc += s;
    }
    out
}

fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
    for t in parts {
        if t.cols() != cols {
            return invalid("feature widths differ within a batch");
        }
        data.extend_from_slice(t.data());
    }
    let rows = data.len() / cols;
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// `softmax(wᵀh_i) · H` within each segment, `N × d → segments × d`.
pub fn attention_pool<'t>(tape: &'t Tape, x: Var<'t>, w: Var<'t>, seg: &[usize], segments: usize) -> Result<Var<'t>> {
    let n = x.shape()[0];
    let scores = x.matmul_t(w)?.reshape(vec![1, n])?;
    let logits = scores.add(tape.constant(segment_mask(seg, segments)))?;
    Ok(logits.softmax().matmul(x)?)
}

impl Crmf {
    fn view<'a, 't>(&'a self, vars: &'a [Var<'t>]) -> View<'a, 't> {
        View {
            vars,
            store: &self.params,
        }
    }

    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: &mut store,
        };
        let (d, h, e) = (cfg.d_model, cfg.d_model / 2, cfg.d_e);
        for dir in ["fwd", "bwd"] {
            init.weight(format!("lstm.{dir}.w_ih"), 4 * h, d, 1.0, "temporal");
            init.weight(format!("lstm.{dir}.w_hh"), 4 * h, h, 1.0, "temporal");
            init.zeros(format!("lstm.{dir}.b"), [1, 4 * h], "temporal");
        }
        for m in ["q", "k", "v", "o"] {
            init.weight(format!("tattn.w{m}"), d, d, 1.0, "temporal");
            // a key bias shifts every logit of a query equally and is omitted
            if m != "k" {
                init.zeros(format!("tattn.b{m}"), [1, d], "temporal");
            }
        }
        init.uniform("conv.kernel".into(), [3, d], 1.0 / 3f64.sqrt(), "temporal");
        init.zeros("conv.bias".into(), [1, d], "temporal");
        init.weight("tproj.w".into(), d, d, 1.0, "temporal");
        init.zeros("tproj.b".into(), [1, d], "temporal");

        init.uniform("prefuse.modality".into(), [3, d], 0.1, "prefusion");
        let f = cfg.ffn_mult * d;
        for l in 0..cfg.pre_layers {
            for m in ["q", "k", "v", "o"] {
                init.weight(format!("pre{l}.w{m}"), d, d, 1.0, "prefusion");
                if m != "k" {
                    init.zeros(format!("pre{l}.b{m}"), [1, d], "prefusion");
                }
            }
            init.ones(format!("pre{l}.ln1.g"), [1, d], "prefusion");
            init.zeros(format!("pre{l}.ln1.b"), [1, d], "prefusion");
            init.weight(format!("pre{l}.ff1.w"), f, d, 1.0, "prefusion");
            init.zeros(format!("pre{l}.ff1.b"), [1, f], "prefusion");
            init.weight(format!("pre{l}.ff2.w"), d, f, 1.0, "prefusion");
            init.zeros(format!("pre{l}.ff2.b"), [1, d], "prefusion");
            init.ones(format!("pre{l}.ln2.g"), [1, d], "prefusion");
            init.zeros(format!("pre{l}.ln2.b"), [1, d], "prefusion");
        }
        init.weight("pool.w".into(), 1, d, 1.0, "prefusion");

        // projections start inside the ball's well-conditioned core
        let shrink = 1.0 / (e as f64).sqrt();
        init.weight("proj.h".into(), e, d, shrink, "experts");
        init.weight("proj.s".into(), e, d, 1.0, "experts");
        init.weight("proj.e".into(), e, d, 1.0, "experts");
        let dt = cfg.attention.token_width(e);
        for g in Geometry::ALL {
            let tag = expert_tag(g);
            for l in 0..cfg.expert_layers {
                init.weight(format!("expert.{tag}.{l}.w"), e, e, 1.0, "experts");
                init.zeros(format!("expert.{tag}.{l}.b"), [1, e], "experts");
            }
            for m in ["q", "k", "v"] {
                init.weight(format!("attn.{tag}.{m}"), dt, dt, 1.0, "experts");
            }
        }

        init.weight("router.w1".into(), cfg.router_hidden, d, 1.0, "router");
        init.zeros("router.b1".into(), [1, cfg.router_hidden], "router");
        init.weight("router.w2".into(), EXPERTS, cfg.router_hidden, 1.0, "router");
        init.zeros("router.b2".into(), [1, EXPERTS], "router");

        init.weight("refiner.w1".into(), cfg.refiner_hidden, e, 1.0, "refiner");
        init.zeros("refiner.b1".into(), [1, cfg.refiner_hidden], "refiner");
        init.weight("refiner.w2".into(), e, cfg.refiner_hidden, 1.0, "refiner");
        init.zeros("refiner.b2".into(), [1, e], "refiner");

        let (s, a, k) = (cfg.head_shared, cfg.adapter_hidden, cfg.targets);
        init.weight("head.w1".into(), s, e, 1.0, "head");
        init.zeros("head.b1".into(), [1, s], "head");
        init.weight("head.w2".into(), s, s, 1.0, "head");
        init.zeros("head.b2".into(), [1, s], "head");
        init.weight("adapt.w1".into(), k * a, s, 1.0, "head");
        init.zeros("adapt.b1".into(), [1, k * a], "head");
        init.uniform("adapt.w2".into(), [1, k * a], 1.0 / (a as f64).sqrt(), "head");
        init.zeros("adapt.b".into(), [1, k], "head");

        init.zeros("balancer.alpha".into(), [1, COMPONENTS.len()], "balancer");
        Ok(Self { cfg, params: store })
    }

    /// BiLSTM, masked self-attention and depthwise convolution over each
    /// clip's frames; returns `Proj(F_lstm + F_attn + F_conv)` stacked.
    pub fn temporal<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], videos: &[&Tensor]) -> Result<Var<'t>> {
        let w = &self.view(vars);
        let h = self.cfg.d_model / 2;
        let lens: Vec<usize> = videos.iter().map(|v| v.rows()).collect();
        let off = offsets(&lens);
        let total: usize = lens.iter().sum();
        let v = tape.constant(stack_rows(videos)?);

        // clips of equal length share LSTM steps
        let mut by_len: Vec<(usize, Vec<usize>)> = Vec::new();
        for (b, &t) in lens.iter().enumerate() {
            match by_len.iter_mut().find(|(l, _)| *l == t) {
                Some((_, clips)) => clips.push(b),
                None => by_len.push((t, vec![b])),
            }
        }
        let mut blocks = Vec::new();
        let mut position = vec![0usize; total];
        let mut row = 0;
        for (t_len, clips) in &by_len {
            let run = |dir: &str, order: Vec<usize>| -> Result<Vec<Var<'t>>> {
                let w_ih = w.p(&format!("lstm.{dir}.w_ih"));
                let w_hh = w.p(&format!("lstm.{dir}.w_hh"));
                let bias = w.p(&format!("lstm.{dir}.b"));
                let mut state: Option<(Var<'t>, Var<'t>)> = None;
                let mut outs = vec![None; *t_len];
                for t in order {
                    let idx: Vec<usize> = clips.iter().map(|&b| off[b] + t).collect();
                    let x = v.gather_rows(&idx)?;
                    let mut gates = linear(x, w_ih, Some(bias))?;
                    if let Some((hp, _)) = state {
                        gates = gates.add(hp.matmul_t(w_hh)?)?;
                    }
                    let i = gates.slice(1, 0, h)?.sigmoid();
                    let f = gates.slice(1, h, h)?.sigmoid();
                    let g = gates.slice(1, 2 * h, h)?.tanh();
                    let o = gates.slice(1, 3 * h, h)?.sigmoid();
                    let c = match state {
                        Some((_, cp)) => f.mul(cp)?.add(i.mul(g)?)?,
                        None => i.mul(g)?,
                    };
                    let hn = o.mul(c.tanh())?;
                    state = Some((hn, c));
                    outs[t] = Some(hn);
                }
                Ok(outs.into_iter().map(|o| o.expect("every step visited")).collect())
            };
            let fwd = run("fwd", (0..*t_len).collect())?;
            let bwd = run("bwd", (0..*t_len).rev().collect())?;
            for t in 0..*t_len {
                blocks.push(Var::concat(&[fwd[t], bwd[t]], 1)?);
                for (j, &b) in clips.iter().enumerate() {
                    position[off[b] + t] = row + j;
                }
                row += clips.len();
            }
        }
        let grouped = if blocks.len() == 1 { blocks[0] } else { Var::concat(&blocks, 0)? };
        let f_lstm = grouped.gather_rows(&position)?;

        let seg: Vec<usize> = lens.iter().enumerate().flat_map(|(b, &t)| std::iter::repeat_n(b, t)).collect();
        let mask = block_mask(&seg).map(|m| tape.constant(m));
        let att = AttentionVars {
            wq: w.p("tattn.wq"),
            wk: w.p("tattn.wk"),
            wv: w.p("tattn.wv"),
            bq: Some(w.p("tattn.bq")),
            bk: None,
            bv: Some(w.p("tattn.bv")),
            out: Some((w.p("tattn.wo"), w.p("tattn.bo"))),
        };
        let f_attn = multi_head_attention(f_lstm, &att, self.cfg.temporal_heads, 1.0, mask)?;

        // kernel-3 depthwise convolution with zero padding at clip edges
        let mut prev = Vec::with_capacity(total);
        let mut next = Vec::with_capacity(total);
        let mut has_prev = Vec::with_capacity(total);
        let mut has_next = Vec::with_capacity(total);
        for (b, &t_len) in lens.iter().enumerate() {
            for t in 0..t_len {
                let r = off[b] + t;
                prev.push(if t > 0 { r - 1 } else { r });
                next.push(if t + 1 < t_len { r + 1 } else { r });
                has_prev.push(if t > 0 { 1.0 } else { 0.0 });
                has_next.push(if t + 1 < t_len { 1.0 } else { 0.0 });
            }
        }
        let kernel = w.p("conv.kernel");
        let left = f_attn
            .gather_rows(&prev)?
            .mul(tape.constant(Tensor::column(&has_prev)))?
            .mul(kernel.slice(0, 0, 1)?)?;
        let centre = f_attn.mul(kernel.slice(0, 1, 1)?)?;
        let right = f_attn
            .gather_rows(&next)?
            .mul(tape.constant(Tensor::column(&has_next)))?
            .mul(kernel.slice(0, 2, 1)?)?;
        let f_conv = left.add(centre)?.add(right)?.add(w.p("conv.bias"))?;

        let sum = f_lstm.add(f_attn)?.add(f_conv)?;
        linear(sum, w.p("tproj.w"), Some(w.p("tproj.b")))
    }

    /// Modality embeddings, post-norm encoder layers and attention pooling.
    pub fn prefuse<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        texts: &[&Tensor],
        audios: &[&Tensor],
        h_v: Var<'t>,
        video_lens: &[usize],
    ) -> Result<Var<'t>> {
        let w = &self.view(vars);
        let b = texts.len();
        let nt: Vec<usize> = texts.iter().map(|t| t.rows()).collect();
        let na: Vec<usize> = audios.iter().map(|t| t.rows()).collect();
        let (ot, oa, ov) = (offsets(&nt), offsets(&na), offsets(video_lens));
        let (st, sa) = (nt.iter().sum::<usize>(), na.iter().sum::<usize>());
        let mut order = Vec::new();
        let mut modality = Vec::new();
        let mut seg = Vec::new();
        for c in 0..b {
            for (base, start, len, m) in [
                (0, ot[c], nt[c], 0),
                (st, oa[c], na[c], 1),
                (st + sa, ov[c], video_lens[c], 2),
            ] {
                for r in 0..len {
                    order.push(base + start + r);
                    modality.push(m);
                    seg.push(c);
                }
            }
        }
        let n = order.len();
        let cat = Var::concat(&[tape.constant(stack_rows(texts)?), tape.constant(stack_rows(audios)?), h_v], 0)?;
        let mut onehot = Tensor::zeros(vec![n, 3]);
        for (i, &m) in modality.iter().enumerate() {
            onehot.set(i, m, 1.0);
        }
        let emb = tape.constant(onehot).matmul(w.p("prefuse.modality"))?;
        let mut x = cat.gather_rows(&order)?.add(emb)?;

        let mask = block_mask(&seg).map(|m| tape.constant(m));
        for l in 0..self.cfg.pre_layers {
            let q = |m: &str| w.p(&format!("pre{l}.{m}"));
            let att = AttentionVars {
                wq: q("wq"),
                wk: q("wk"),
                wv: q("wv"),
                bq: Some(q("bq")),
                bk: None,
                bv: Some(q("bv")),
                out: Some((q("wo"), q("bo"))),
            };
            let a = multi_head_attention(x, &att, self.cfg.pre_heads, 1.0, mask)?;
            x = layer_norm_affine(x.add(a)?, q("ln1.g"), q("ln1.b"))?;
            let ff = linear(linear(x, q("ff1.w"), Some(q("ff1.b")))?.gelu(), q("ff2.w"), Some(q("ff2.b")))?;
            x = layer_norm_affine(x.add(ff)?, q("ln2.g"), q("ln2.b"))?;
        }
        attention_pool(tape, x, w.p("pool.w"), &seg, b)
    }

    /// Shared stack and per-target adapters, `B × d_e → B × targets`.
    pub fn head<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        let w = &self.view(vars);
        let h1 = linear(z, w.p("head.w1"), Some(w.p("head.b1")))?.layer_norm(LN_EPS).gelu();
        let h2 = linear(h1, w.p("head.w2"), Some(w.p("head.b2")))?.layer_norm(LN_EPS).gelu();
        let a = linear(h2, w.p("adapt.w1"), Some(w.p("adapt.b1")))?.gelu();
        let (k, hid) = (self.cfg.targets, self.cfg.adapter_hidden);
        let mut blocks = Tensor::zeros(vec![k * hid, k]);
        for j in 0..k * hid {
            blocks.set(j, j / hid, 1.0);
        }
        Ok(a.mul(w.p("adapt.w2"))?.matmul(tape.constant(blocks))?.add(w.p("adapt.b"))?)
    }

    /// Forward pass over a batch. `vars` are the bound parameters (see
    /// [`ParamStore::bind`]); `dropout` switches on training-mode dropout.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        batch: &[&FeatureBundle],
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward<'t>> {
        if batch.is_empty() {
            return invalid("forward: empty batch");
        }
        if vars.len() != self.params.len() {
            return invalid(format!("forward: {} bound parameters, model has {}", vars.len(), self.params.len()));
        }
        for b in batch {
            b.validate(self.cfg.d_model)?;
        }
        let w = self.view(vars);
        let cfg = &self.cfg;
        let bsz = batch.len();
        let videos: Vec<&Tensor> = batch.iter().map(|b| &b.video).collect();
        let texts: Vec<&Tensor> = batch.iter().map(|b| &b.text).collect();
        let audios: Vec<&Tensor> = batch.iter().map(|b| &b.audio).collect();
        let video_lens: Vec<usize> = videos.iter().map(|v| v.rows()).collect();

        let h_v = self.temporal(tape, vars, &videos).stage("temporal")?;
        let z = self.prefuse(tape, vars, &texts, &audios, h_v, &video_lens).stage("prefusion")?;

        let ball = cfg.ball()?;
        let ctx = ManifoldCtx::new(tape, ball, cfg.d_e);
        let mut dropout = match dropout {
            Some(rng) if cfg.expert_dropout > 0.0 => Dropout::train(cfg.expert_dropout, rng),
            _ => Dropout::off(),
        };
        let mut tangents: [Option<Var<'t>>; 3] = [None; 3];
        let mut norms = [0.0; 3];
        for g in Geometry::ALL {
            if !cfg.geometry.runs(g) {
                continue;
            }
            let tag = expert_tag(g);
            let layers: Vec<LayerVars<'t>> = (0..cfg.expert_layers)
                .map(|l| LayerVars {
                    w: w.p(&format!("expert.{tag}.{l}.w")),
                    b: w.p(&format!("expert.{tag}.{l}.b")),
                })
                .collect();
            let act = expert_activation(g);
            let stage = match g {
                Geometry::Hyperbolic => "hyperbolic expert",
                Geometry::Spherical => "spherical expert",
                Geometry::Euclidean => "euclidean expert",
            };
            let out = (|| -> Result<Var<'t>> {
                let x = match g {
                    Geometry::Hyperbolic => {
                        let p = ball.exp0(z.matmul_t(w.p("proj.h"))?)?;
                        hyperbolic_expert(&ball, p, &layers, act, &mut dropout)?
                    }
                    Geometry::Spherical => {
                        let p = Sphere.project(z.matmul_t(w.p("proj.s"))?)?;
                        spherical_expert(ctx.pole, p, &layers, act, &mut dropout)?
                    }
                    Geometry::Euclidean => {
                        euclidean_expert(z.matmul_t(w.p("proj.e"))?, &layers, act, &mut dropout)?
                    }
                };
                let qkv = ["q", "k", "v"].map(|m| w.p(&format!("attn.{tag}.{m}")));
                let x = intra_manifold_attention(tape, g, &ctx, x, qkv, &cfg.attention)?;
                ctx.to_tangent(g, x)
            })()
            .stage(stage)?;
            norms[g.index()] = out.norm_last().mean().item();
            tangents[g.index()] = Some(out);
        }

        let soft = route(
            z,
            &RouterVars {
                w1: w.p("router.w1"),
                b1: w.p("router.b1"),
                w2: w.p("router.w2"),
                b2: w.p("router.b2"),
            },
        )
        .stage("router")?;
        let (fused, routing) = match cfg.geometry.single() {
            Some(g) => {
                let mut onehot = Tensor::zeros(vec![bsz, 3]);
                for i in 0..bsz {
                    onehot.set(i, g.index(), 1.0);
                }
                (tangents[g.index()].expect("chosen expert ran"), tape.constant(onehot))
            }
            None => {
                let r = match cfg.routing {
                    RoutingMode::Learned => soft,
                    RoutingMode::Uniform => tape.constant(Tensor::full(vec![bsz, 3], 1.0 / 3.0)),
                    RoutingMode::Hard => hard_route(soft)?,
                };
                let t = tangents.map(|t| t.expect("all experts ran"));
                (tangent_fuse(t, r).stage("fusion")?, r)
            }
        };
        let refined = refine(
            fused,
            &RefinerVars {
                w1: w.p("refiner.w1"),
                b1: w.p("refiner.b1"),
                w2: w.p("refiner.w2"),
                b2: w.p("refiner.b2"),
            },
        )
        .stage("refiner")?;
        let pred = self.head(tape, vars, refined).stage("head")?;

        let rv = routing.tensor();
        let mut mean = [0.0; 3];
        let mut entropy = 0.0;
        for row in rv.data().chunks(3) {
            for j in 0..3 {
                mean[j] += row[j] / bsz as f64;
                if row[j] > 0.0 {
                    entropy -= row[j] * row[j].ln() / bsz as f64;
                }
            }
        }
        Ok(Forward {
            pred,
            routing,
            routing_soft: soft,
            adapters: [w.p("adapt.w1"), w.p("adapt.w2")],
            diagnostics: Diagnostics {
                tangent_norms: norms,
                routing_mean: mean,
                routing_entropy: entropy.max(0.0),
            },
        })
    }

    /// Eval-mode predictions, `batch` clips per tape.
    pub fn predict(&self, bundles: &[FeatureBundle], batch: usize) -> Result<(Vec<Vec<f64>>, Vec<[f64; 3]>)> {
        let mut preds = Vec::with_capacity(bundles.len());
        let mut routes = Vec::with_capacity(bundles.len());
        for chunk in bundles.chunks(batch.max(1)) {
            let tape = Tape::new();
            let vars = self.params.bind(&tape, false);
            let refs: Vec<&FeatureBundle> = chunk.iter().collect();
            let f = self.forward(&tape, &vars, &refs, None)?;
            let p = f.pred.tensor();
            let r = f.routing.tensor();
            for i in 0..chunk.len() {
                preds.push(p.row_slice(i).to_vec());
                routes.push([r.at(i, 0), r.at(i, 1), r.at(i, 2)]);
            }
        }
        Ok((preds, routes))
    }
}

/// The six balanced loss components in [`COMPONENTS`] order.
pub fn loss_components<'t>(f: &Forward<'t>, target: Var<'t>, cfg: &LossConfig) -> Result<Vec<Var<'t>>> {
    Ok(vec![
        huber_loss(f.pred, target, cfg.huber_delta)?,
        corr_boost_loss(f.pred, target, cfg.lambda_corr)?,
        cov_align_loss(f.pred, target, cfg.lambda_cov)?,
        routing_entropy_loss(f.routing_soft, cfg.lambda_ent)?,
        load_balance_loss(f.routing_soft, cfg.lambda_bal)?,
        head_regularization(&f.adapters, cfg.head_reg)?,
    ])
}

/// Balanced total loss of a batch given targets (`B × K`).
pub fn total_loss<'t>(
    model: &Crmf,
    vars: &[Var<'t>],
    f: &Forward<'t>,
    target: Var<'t>,
    cfg: &LossConfig,
    balancer: &BalancerState,
) -> Result<(Var<'t>, Vec<f64>)> {
    let comps = loss_components(f, target, cfg)?;
    let values: Vec<f64> = comps.iter().map(|c| c.item()).collect();
    let alpha = vars[model.params.position("balancer.alpha").expect("balancer logits")];
    Ok((balancer.total(&comps, alpha, &cfg.balancer)?, values))
}
