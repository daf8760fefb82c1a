//! Graph encoders: GCN, gated graph network (GRU update) and graph LSTM.
//!
//! Node states are stacked row-wise into a `|V| x D` matrix; row `i` belongs
//! to node id `i + 1`. Messages only travel along graph edges, so after `t`
//! recurrent steps a node has seen exactly its `t`-hop neighbourhood. A GCN
//! layer multiplies by the adjacency twice and therefore covers two hops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{to_adjacency, AdjacencyMatrix, EdgeKind, ProsodyGraph};
use crate::params::{bundle, Bundle, Leaf, Parameters};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GnnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("parameters do not match the {0:?} encoder config")]
    ParamMismatch(EncoderKind),
}

pub type Result<T> = std::result::Result<T, GnnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Gcn,
    Ggnn,
    Glstm,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(EncoderKind::Gcn),
            "ggnn" => Ok(EncoderKind::Ggnn),
            "glstm" | "g-lstm" => Ok(EncoderKind::Glstm),
            other => Err(format!("unknown encoder {other:?} (expected gcn, ggnn or glstm)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Node embedding width.
    pub dim: usize,
    /// Propagation steps per layer; GCN layers ignore it.
    pub steps: usize,
    pub layers: usize,
    /// One GGNN message matrix per edge kind instead of a shared one.
    pub per_kind_weights: bool,
    /// GCN only: use `D^-1/2 (A + I) D^-1/2` instead of the raw adjacency.
    pub normalize: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: EncoderKind::Ggnn, dim: 8, steps: 3, layers: 2, per_kind_weights: false, normalize: false }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(GnnError::InvalidConfig("dim must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(GnnError::InvalidConfig("steps must be at least 1".into()));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(GnnError::InvalidConfig(format!("layers must be 1..=3, got {}", self.layers)));
        }
        Ok(())
    }

    /// Hops a single node's perturbation can travel through the full encoder.
    pub fn receptive_hops(&self) -> usize {
        match self.kind {
            EncoderKind::Gcn => 2 * self.layers,
            EncoderKind::Ggnn | EncoderKind::Glstm => self.steps * self.layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnWeights<T> {
    pub w0: T,
    pub w1: T,
}
bundle!(GcnWeights { w0, w1 });

#[derive(Debug, Clone, PartialEq)]
pub struct GgnnWeights<T> {
    pub bias: T,
    pub wz: T,
    pub uz: T,
    pub wr: T,
    pub ur: T,
    pub wh: T,
    pub uh: T,
    /// Either one shared matrix or one per [`EdgeKind::ALL`] entry.
    pub message: Vec<Leaf<T>>,
}
bundle!(GgnnWeights { bias, wz, uz, wr, ur, wh, uh } nested { message });

#[derive(Debug, Clone, PartialEq)]
pub struct GlstmWeights<T> {
    pub ui: T,
    pub vi: T,
    pub bi: T,
    pub uf: T,
    pub vf: T,
    pub bf: T,
    pub uo: T,
    pub vo: T,
    pub bo: T,
    pub uu: T,
    pub vu: T,
    pub bu: T,
}
bundle!(GlstmWeights { ui, vi, bi, uf, vf, bf, uo, vo, bo, uu, vu, bu });

pub type GcnParams = GcnWeights<Tensor>;
pub type GgnnParams = GgnnWeights<Tensor>;
pub type GlstmParams = GlstmWeights<Tensor>;

/// Stacked layers of one encoder kind.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderWeights<T> {
    Gcn(Vec<GcnWeights<T>>),
    Ggnn(Vec<GgnnWeights<T>>),
    Glstm(Vec<GlstmWeights<T>>),
}

pub type EncoderParams = EncoderWeights<Tensor>;

impl<T> Bundle<T> for EncoderWeights<T> {
    type Mapped<U> = EncoderWeights<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> EncoderWeights<U> {
        match self {
            EncoderWeights::Gcn(l) => EncoderWeights::Gcn(l.map(f)),
            EncoderWeights::Ggnn(l) => EncoderWeights::Ggnn(l.map(f)),
            EncoderWeights::Glstm(l) => EncoderWeights::Glstm(l.map(f)),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
        match self {
            EncoderWeights::Gcn(l) => l.visit(f),
            EncoderWeights::Ggnn(l) => l.visit(f),
            EncoderWeights::Glstm(l) => l.visit(f),
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut T)) {
        match self {
            EncoderWeights::Gcn(l) => l.visit_mut(f),
            EncoderWeights::Ggnn(l) => l.visit_mut(f),
            EncoderWeights::Glstm(l) => l.visit_mut(f),
        }
    }
}

impl<T> EncoderWeights<T> {
    pub fn kind(&self) -> EncoderKind {
        match self {
            EncoderWeights::Gcn(_) => EncoderKind::Gcn,
            EncoderWeights::Ggnn(_) => EncoderKind::Ggnn,
            EncoderWeights::Glstm(_) => EncoderKind::Glstm,
        }
    }

    pub fn layer_count(&self) -> usize {
        match self {
            EncoderWeights::Gcn(l) => l.len(),
            EncoderWeights::Ggnn(l) => l.len(),
            EncoderWeights::Glstm(l) => l.len(),
        }
    }
}

impl GcnParams {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_hid: usize, d_out: usize, scale: f64, rng: &mut R) -> Self {
        Self { w0: Tensor::uniform(d_in, d_hid, scale, rng), w1: Tensor::uniform(d_hid, d_out, scale, rng) }
    }
}

impl GgnnParams {
    /// Square `dim x dim` matrices uniform in `[-scale, scale]`; zero bias.
    pub fn init<R: Rng + ?Sized>(dim: usize, per_kind: bool, scale: f64, rng: &mut R) -> Self {
        let mut m = || Tensor::uniform(dim, dim, scale, rng);
        let (wz, uz, wr, ur, wh, uh) = (m(), m(), m(), m(), m(), m());
        let n_msg = if per_kind { EdgeKind::ALL.len() } else { 1 };
        let message = (0..n_msg).map(|_| Leaf(m())).collect();
        Self { bias: Tensor::zeros(1, dim), wz, uz, wr, ur, wh, uh, message }
    }
}

impl GlstmParams {
    /// Square matrices uniform in `[-scale, scale]`; zero biases.
    pub fn init<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut m = || Tensor::uniform(dim, dim, scale, rng);
        let b = || Tensor::zeros(1, dim);
        Self {
            ui: m(),
            vi: m(),
            bi: b(),
            uf: m(),
            vf: m(),
            bf: b(),
            uo: m(),
            vo: m(),
            bo: b(),
            uu: m(),
            vu: m(),
            bu: b(),
        }
    }
}

impl EncoderParams {
    /// Fresh weights for `cfg`, uniform in `±1/sqrt(dim)`.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let scale = 1.0 / (d as f64).sqrt();
        Ok(match cfg.kind {
            EncoderKind::Gcn => {
                EncoderWeights::Gcn((0..cfg.layers).map(|_| GcnParams::init(d, d, d, scale, rng)).collect())
            }
            EncoderKind::Ggnn => EncoderWeights::Ggnn(
                (0..cfg.layers).map(|_| GgnnParams::init(d, cfg.per_kind_weights, scale, rng)).collect(),
            ),
            EncoderKind::Glstm => {
                EncoderWeights::Glstm((0..cfg.layers).map(|_| GlstmParams::init(d, scale, rng)).collect())
            }
        })
    }

    pub fn seeded(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        Self::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Random initial node states, uniform in `[-0.1, 0.1]`, reproducible per seed.
pub fn init_node_embeddings(graph: &ProsodyGraph, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(graph.node_count(), dim, 0.1, &mut rng)
}

/// Fixed propagation operators derived from one graph.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    /// Raw 0/1 adjacency over all edge kinds.
    pub adjacency: Tensor,
    /// Adjacency restricted to each of [`EdgeKind::ALL`].
    pub by_kind: Vec<Tensor>,
    /// Row-normalised adjacency (neighbour mean).
    pub mean: Tensor,
    pub normalized: Tensor,
}

impl GraphOperators {
    pub fn new(graph: &ProsodyGraph) -> Self {
        let all: AdjacencyMatrix = to_adjacency(graph, &EdgeKind::ALL);
        Self {
            by_kind: EdgeKind::ALL.iter().map(|k| to_adjacency(graph, &[*k]).into_tensor()).collect(),
            mean: all.row_mean(),
            normalized: all.normalized(),
            adjacency: all.into_tensor(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundOperators<'t> {
        BoundOperators {
            adjacency: tape.var(self.adjacency.clone()),
            by_kind: self.by_kind.iter().map(|a| tape.var(a.clone())).collect(),
            mean: tape.var(self.mean.clone()),
            normalized: tape.var(self.normalized.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundOperators<'t> {
    pub adjacency: Var<'t>,
    pub by_kind: Vec<Var<'t>>,
    pub mean: Var<'t>,
    pub normalized: Var<'t>,
}

fn check_rows(op: &'static str, h: Var<'_>, n: usize) -> Result<()> {
    let shape = h.shape();
    if shape.0 != n {
        return Err(TensorError::ShapeMismatch { op, lhs: shape, rhs: (n, n) }.into());
    }
    Ok(())
}

/// `A · ReLU(A · X · W0) · W1` on the tape.
pub fn gcn_layer<'t>(x: Var<'t>, a: Var<'t>, p: &GcnWeights<Var<'t>>) -> Result<Var<'t>> {
    let hidden = a.matmul(x.matmul(p.w0)?)?.relu()?;
    Ok(a.matmul(hidden.matmul(p.w1)?)?)
}

/// One gated propagation step:
///
/// ```text
/// a = Σ_k A_k H W_k + b
/// z = σ(a Wz + H Uz)      r = σ(a Wr + H Ur)
/// h̃ = tanh(a Wh + (r ⊙ H) Uh)
/// H' = (1 − z) ⊙ H + z ⊙ h̃
/// ```
pub fn ggnn_step_var<'t>(h: Var<'t>, ops: &BoundOperators<'t>, p: &GgnnWeights<Var<'t>>) -> Result<Var<'t>> {
    check_rows("ggnn_step", h, ops.adjacency.shape().0)?;
    let mut msg: Option<Var<'t>> = None;
    let kinds: Vec<Var<'t>> = if p.message.len() == 1 { vec![ops.adjacency] } else { ops.by_kind.clone() };
    if kinds.len() != p.message.len() {
        return Err(GnnError::ParamMismatch(EncoderKind::Ggnn));
    }
    for (a_k, Leaf(w_k)) in kinds.iter().zip(&p.message) {
        let term = a_k.matmul(h.matmul(*w_k)?)?;
        msg = Some(match msg {
            Some(m) => m.add(term)?,
            None => term,
        });
    }
    let a = msg.expect("at least one message matrix").add_row(p.bias)?;
    let z = a.matmul(p.wz)?.add(h.matmul(p.uz)?)?.sigmoid()?;
    let r = a.matmul(p.wr)?.add(h.matmul(p.ur)?)?.sigmoid()?;
    let candidate = a.matmul(p.wh)?.add(r.hadamard(h)?.matmul(p.uh)?)?.tanh()?;
    // (1 − z) ⊙ h + z ⊙ h̃  ==  h + z ⊙ (h̃ − h)
    Ok(h.add(z.hadamard(candidate.sub(h)?)?)?)
}

/// One graph-LSTM step with neighbour-mean context `M = mean(H_neighbours)`:
///
/// ```text
/// i, f, o = σ(H U + M V + b)     u = tanh(H Uu + M Vu + bu)
/// C' = f ⊙ C + i ⊙ u             H' = o ⊙ tanh(C')
/// ```
pub fn glstm_step_var<'t>(
    h: Var<'t>,
    c: Var<'t>,
    ops: &BoundOperators<'t>,
    p: &GlstmWeights<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    check_rows("glstm_step", h, ops.adjacency.shape().0)?;
    if h.shape() != c.shape() {
        return Err(TensorError::ShapeMismatch { op: "glstm_step", lhs: h.shape(), rhs: c.shape() }.into());
    }
    let m = ops.mean.matmul(h)?;
    let gate =
        |u: Var<'t>, v: Var<'t>, b: Var<'t>| -> Result<Var<'t>> { Ok(h.matmul(u)?.add(m.matmul(v)?)?.add_row(b)?) };
    let i = gate(p.ui, p.vi, p.bi)?.sigmoid()?;
    let f = gate(p.uf, p.vf, p.bf)?.sigmoid()?;
    let o = gate(p.uo, p.vo, p.bo)?.sigmoid()?;
    let u = gate(p.uu, p.vu, p.bu)?.tanh()?;
    let c_next = f.hadamard(c)?.add(i.hadamard(u)?)?;
    let h_next = o.hadamard(c_next.tanh()?)?;
    Ok((h_next, c_next))
}

/// Runs every layer of the encoder on the tape.
pub fn encode_var<'t>(
    x: Var<'t>,
    ops: &BoundOperators<'t>,
    cfg: &EncoderConfig,
    weights: &EncoderWeights<Var<'t>>,
) -> Result<Var<'t>> {
    cfg.validate()?;
    if weights.kind() != cfg.kind || weights.layer_count() != cfg.layers {
        return Err(GnnError::ParamMismatch(cfg.kind));
    }
    let mut h = x;
    match weights {
        EncoderWeights::Gcn(layers) => {
            let a = if cfg.normalize { ops.normalized } else { ops.adjacency };
            for p in layers {
                h = gcn_layer(h, a, p)?;
            }
        }
        EncoderWeights::Ggnn(layers) => {
            for p in layers {
                for _ in 0..cfg.steps {
                    h = ggnn_step_var(h, ops, p)?;
                }
            }
        }
        EncoderWeights::Glstm(layers) => {
            for p in layers {
                let (rows, cols) = h.shape();
                let mut c = h.tape().var(Tensor::zeros(rows, cols));
                for _ in 0..cfg.steps {
                    (h, c) = glstm_step_var(h, c, ops, p)?;
                }
            }
        }
    }
    Ok(h)
}

/// Evaluates `A · ReLU(A · X · W0) · W1`.
pub fn gcn_forward(x: &Tensor, a: &AdjacencyMatrix, p: &GcnParams) -> Result<Tensor> {
    let tape = Tape::new();
    let out = gcn_layer(tape.var(x.clone()), tape.var(a.as_tensor().clone()), &p.bind(&tape))?;
    Ok(out.value())
}

pub fn ggnn_step(h: &Tensor, graph: &ProsodyGraph, p: &GgnnParams) -> Result<Tensor> {
    let tape = Tape::new();
    let ops = GraphOperators::new(graph).bind(&tape);
    Ok(ggnn_step_var(tape.var(h.clone()), &ops, &p.bind(&tape))?.value())
}

pub fn glstm_step(h: &Tensor, c: &Tensor, graph: &ProsodyGraph, p: &GlstmParams) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let ops = GraphOperators::new(graph).bind(&tape);
    let (h, c) = glstm_step_var(tape.var(h.clone()), tape.var(c.clone()), &ops, &p.bind(&tape))?;
    Ok((h.value(), c.value()))
}

/// Encodes given initial node states.
pub fn encode_from(x: &Tensor, graph: &ProsodyGraph, cfg: &EncoderConfig, params: &EncoderParams) -> Result<Tensor> {
    let tape = Tape::new();
    let ops = GraphOperators::new(graph).bind(&tape);
    Ok(encode_var(tape.var(x.clone()), &ops, cfg, &params.bind(&tape))?.value())
}

/// Encodes a graph from seeded random node states; returns `H_PB`.
pub fn encode(graph: &ProsodyGraph, cfg: &EncoderConfig, params: &EncoderParams, seed: u64) -> Result<Tensor> {
    encode_from(&init_node_embeddings(graph, cfg.dim, seed), graph, cfg, params)
}

/// Repeatedly applies the first layer and records `‖H(t+1) − H(t)‖` for
/// `t = 1..=steps`. Also emitted at debug level on the `graphpb::drift` target.
pub fn propagation_drift(
    graph: &ProsodyGraph,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    seed: u64,
    steps: usize,
) -> Result<Vec<f64>> {
    let single = EncoderConfig { steps: 1, layers: 1, ..*cfg };
    let first = match params {
        EncoderWeights::Gcn(l) => EncoderWeights::Gcn(l[..1].to_vec()),
        EncoderWeights::Ggnn(l) => EncoderWeights::Ggnn(l[..1].to_vec()),
        EncoderWeights::Glstm(l) => EncoderWeights::Glstm(l[..1].to_vec()),
    };
    let ops = GraphOperators::new(graph);
    let mut h = init_node_embeddings(graph, cfg.dim, seed);
    let mut c = Tensor::zeros(h.rows(), h.cols());
    let mut drift = Vec::with_capacity(steps);
    for t in 1..=steps {
        let tape = Tape::new();
        let bound_ops = ops.bind(&tape);
        let hv = tape.var(h.clone());
        let next = match &first.bind(&tape) {
            EncoderWeights::Glstm(l) => {
                let (hn, cn) = glstm_step_var(hv, tape.var(c.clone()), &bound_ops, &l[0])?;
                c = cn.value();
                hn
            }
            w => encode_var(hv, &bound_ops, &single, w)?,
        }
        .value();
        let d = next.sub(&h)?.norm();
        log::debug!(target: "graphpb::drift", "t={t} drift={d:.6e}");
        drift.push(d);
        h = next;
    }
    Ok(drift)
}
