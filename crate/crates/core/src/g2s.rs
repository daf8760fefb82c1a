//! Graph-to-sequence acoustic model.
//!
//! The prosody graph is encoded into `H_PB`; optionally a second encoder runs
//! over the phoneme chain and its output is fused into the attention memory.
//! A GRU decoder with additive attention emits one mel frame per step.

use std::io::{self, BufRead, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::{
    self, encode_var, EncoderConfig, EncoderKind, EncoderParams, EncoderWeights, GnnError, GraphOperators,
};
use crate::graph::{GraphError, ProsodyGraph};
use crate::params::{bundle, collect_grads, Parameters};
use crate::tensor::{adam_step, AdamState, LrSchedule, Tape, Tensor, TensorError, Var};

pub const MEL_DIM: usize = 80;
pub const FRAME_LENGTH_MS: f64 = 50.0;
pub const FRAME_SHIFT_MS: f64 = 12.5;

#[derive(Debug, Error)]
pub enum G2sError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] GnnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("sequential encoder input is not a phoneme chain")]
    NotAChain,
    #[error("word spans do not cover the {phonemes} phonemes: {detail}")]
    SpanCoverage { phonemes: usize, detail: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, G2sError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Memory is `H_PB` alone.
    #[default]
    PbOnly,
    /// Row `v` is `H_PB[v] ⊕ mean(Θ over the phonemes of word v)`.
    Concat,
    /// `H_PB` rows and `Θ` rows stacked as separate memory entries, each
    /// zero-padded to the common width `D + D_seq`.
    AppendRows,
}

impl std::str::FromStr for FusionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pb_only" => Ok(FusionMode::PbOnly),
            "concat" => Ok(FusionMode::Concat),
            "append_rows" => Ok(FusionMode::AppendRows),
            other => Err(format!("unknown fusion mode {other:?} (expected pb_only, concat or append_rows)")),
        }
    }
}

/// Attention keys/values and the prosodic word each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingMemory {
    pub memory: Tensor,
    /// 1-based word index per memory row.
    pub source_spans: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub frames: Tensor,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl MelSpec {
    pub fn new(frames: Tensor) -> Self {
        Self { frames, frame_length_ms: FRAME_LENGTH_MS, frame_shift_ms: FRAME_SHIFT_MS }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.rows()
    }
}

/// Phoneme index range of every word, derived from per-node phoneme tokens
/// when present and from character counts otherwise.
pub fn word_spans(graph: &ProsodyGraph) -> Vec<Range<usize>> {
    let mut start = 0;
    graph
        .nodes()
        .iter()
        .map(|n| {
            let len = n.phonemes.as_ref().map_or_else(|| n.text.chars().count(), Vec::len);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// `|V| x P` matrix averaging the phoneme rows of each word.
pub fn pooling_matrix(spans: &[Range<usize>], phonemes: usize) -> Result<Tensor> {
    let err = |detail: String| G2sError::SpanCoverage { phonemes, detail };
    let mut expected = 0;
    for (v, s) in spans.iter().enumerate() {
        if s.start != expected {
            return Err(err(format!("word {} starts at {} instead of {expected}", v + 1, s.start)));
        }
        if s.is_empty() {
            return Err(err(format!("word {} has no phonemes", v + 1)));
        }
        expected = s.end;
    }
    if expected != phonemes {
        return Err(err(format!("spans end at {expected}")));
    }
    let mut p = Tensor::zeros(spans.len(), phonemes);
    for (v, s) in spans.iter().enumerate() {
        let w = 1.0 / s.len() as f64;
        for j in s.clone() {
            p[(v, j)] = w;
        }
    }
    Ok(p)
}

pub fn fuse_var<'t>(
    h_pb: Var<'t>,
    theta: Option<Var<'t>>,
    spans: &[Range<usize>],
    mode: FusionMode,
) -> Result<Var<'t>> {
    let tape = h_pb.tape();
    let theta = match (mode, theta) {
        (FusionMode::PbOnly, _) => return Ok(h_pb),
        (_, Some(t)) => t,
        (_, None) => return Err(G2sError::InvalidConfig("fusion mode needs a sequential encoding".into())),
    };
    let (n_words, d) = h_pb.shape();
    let (n_ph, d_seq) = theta.shape();
    if spans.len() != n_words {
        return Err(G2sError::SpanCoverage {
            phonemes: n_ph,
            detail: format!("{} spans for {n_words} words", spans.len()),
        });
    }
    let pool = pooling_matrix(spans, n_ph)?;
    Ok(match mode {
        FusionMode::Concat => h_pb.concat_cols(tape.var(pool).matmul(theta)?)?,
        _ => {
            let top = h_pb.concat_cols(tape.var(Tensor::zeros(n_words, d_seq)))?;
            let bottom = tape.var(Tensor::zeros(n_ph, d)).concat_cols(theta)?;
            top.concat_rows(bottom)?
        }
    })
}

pub fn fuse(h_pb: &Tensor, theta: Option<&Tensor>, spans: &[Range<usize>], mode: FusionMode) -> Result<EncodingMemory> {
    let tape = Tape::new();
    let m = fuse_var(tape.var(h_pb.clone()), theta.map(|t| tape.var(t.clone())), spans, mode)?;
    let mut source_spans: Vec<usize> = (1..=h_pb.rows()).collect();
    if mode == FusionMode::AppendRows {
        for (v, s) in spans.iter().enumerate() {
            source_spans.extend(std::iter::repeat_n(v + 1, s.len()));
        }
    }
    Ok(EncodingMemory { memory: m.value(), source_spans })
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Initial phoneme states: every occurrence of a token gets the same row,
/// uniform in `[-0.1, 0.1]`, reproducible per seed.
pub fn embed_tokens<S: AsRef<str>>(tokens: &[S], dim: usize, seed: u64) -> Tensor {
    let mut out = Tensor::zeros(0, dim);
    for tok in tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok.as_ref()) ^ seed.rotate_left(29));
        out = out.concat_rows(&Tensor::uniform(1, dim, 0.1, &mut rng)).expect("same width");
    }
    out
}

fn check_sequential(chain: &ProsodyGraph, cfg: &EncoderConfig) -> Result<()> {
    if !chain.is_chain() || chain.node_count() == 0 {
        return Err(G2sError::NotAChain);
    }
    if cfg.kind == EncoderKind::Gcn {
        return Err(G2sError::InvalidConfig("sequential encoder must be ggnn or glstm".into()));
    }
    Ok(())
}

/// Encodes the phoneme chain (node texts are the phoneme tokens) into `Θ`.
pub fn graph_sequential_encode(
    chain: &ProsodyGraph,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    seed: u64,
) -> Result<Tensor> {
    check_sequential(chain, cfg)?;
    let tokens: Vec<&str> = chain.nodes().iter().map(|n| n.text.as_str()).collect();
    let x = embed_tokens(&tokens, cfg.dim, seed);
    Ok(gnn::encode_from(&x, chain, cfg, params)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub attention: usize,
    pub mel_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { hidden: 16, attention: 16, mel_dim: MEL_DIM }
    }
}

/// Additive attention, a GRU cell over `[previous frame ⊕ context]` and a
/// linear frame projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights<T> {
    pub att_query: T,
    pub att_memory: T,
    pub att_bias: T,
    pub att_score: T,
    pub wz: T,
    pub uz: T,
    pub bz: T,
    pub wr: T,
    pub ur: T,
    pub br: T,
    pub wh: T,
    pub uh: T,
    pub bh: T,
    pub out: T,
    pub out_bias: T,
}
bundle!(DecoderWeights {
    att_query,
    att_memory,
    att_bias,
    att_score,
    wz,
    uz,
    bz,
    wr,
    ur,
    br,
    wh,
    uh,
    bh,
    out,
    out_bias
});

pub type DecoderParams = DecoderWeights<Tensor>;

impl DecoderParams {
    pub fn init(cfg: &DecoderConfig, memory_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let (h, a, mel) = (cfg.hidden, cfg.attention, cfg.mel_dim);
        let input = mel + memory_dim;
        let mut u = |r: usize, c: usize| Tensor::uniform(r, c, 1.0 / (r as f64).sqrt(), rng);
        Self {
            att_query: u(h, a),
            att_memory: u(memory_dim, a),
            att_bias: Tensor::zeros(1, a),
            att_score: u(a, 1),
            wz: u(input, h),
            uz: u(h, h),
            bz: Tensor::zeros(1, h),
            wr: u(input, h),
            ur: u(h, h),
            br: Tensor::zeros(1, h),
            wh: u(input, h),
            uh: u(h, h),
            bh: Tensor::zeros(1, h),
            out: u(h, mel),
            out_bias: Tensor::zeros(1, mel),
        }
    }
}

pub struct DecodeTrace<'t> {
    /// `T x mel_dim`.
    pub frames: Var<'t>,
    /// One `1 x rows(memory)` weight row per step.
    pub attention: Vec<Var<'t>>,
}

/// Runs the decoder for `frames` steps. With `teacher`, step `t` is fed
/// ground-truth frame `t − 1` instead of its own previous output.
pub fn decode_var<'t>(
    memory: Var<'t>,
    p: &DecoderWeights<Var<'t>>,
    frames: usize,
    teacher: Option<&Tensor>,
) -> Result<DecodeTrace<'t>> {
    let tape = memory.tape();
    if frames == 0 {
        return Err(G2sError::InvalidConfig("frame count must be at least 1".into()));
    }
    let hidden = p.uz.shape().0;
    let mel = p.out.shape().1;
    if let Some(t) = teacher {
        if t.rows() < frames - 1 || t.cols() != mel {
            return Err(TensorError::ShapeMismatch { op: "decode teacher", lhs: t.shape(), rhs: (frames, mel) }.into());
        }
    }
    let keys = memory.matmul(p.att_memory)?.add_row(p.att_bias)?;
    let mut state = tape.var(Tensor::zeros(1, hidden));
    let mut prev = tape.var(Tensor::zeros(1, mel));
    let mut out: Option<Var<'t>> = None;
    let mut attention = Vec::with_capacity(frames);
    for t in 0..frames {
        let query = state.matmul(p.att_query)?;
        let scores = keys.add_row(query)?.tanh()?.matmul(p.att_score)?;
        let alpha = scores.transpose()?.softmax_rows()?;
        let context = alpha.matmul(memory)?;
        let x = prev.concat_cols(context)?;
        let z = x.matmul(p.wz)?.add(state.matmul(p.uz)?)?.add_row(p.bz)?.sigmoid()?;
        let r = x.matmul(p.wr)?.add(state.matmul(p.ur)?)?.add_row(p.br)?.sigmoid()?;
        let cand = x.matmul(p.wh)?.add(r.hadamard(state)?.matmul(p.uh)?)?.add_row(p.bh)?.tanh()?;
        state = state.add(z.hadamard(cand.sub(state)?)?)?;
        let frame = state.matmul(p.out)?.add_row(p.out_bias)?;
        out = Some(match out {
            Some(o) => o.concat_rows(frame)?,
            None => frame,
        });
        attention.push(alpha);
        prev = match teacher {
            Some(target) => tape.var(target.slice_rows(t, t + 1)?),
            None => frame,
        };
    }
    Ok(DecodeTrace { frames: out.expect("frames >= 1"), attention })
}

/// Free-running (or teacher-forced) decode; returns the mel frames and the
/// `T x rows(memory)` attention matrix.
pub fn decode(
    memory: &EncodingMemory,
    p: &DecoderParams,
    frames: usize,
    teacher: Option<&Tensor>,
) -> Result<(MelSpec, Tensor)> {
    let tape = Tape::new();
    let trace = decode_var(tape.var(memory.memory.clone()), &p.bind(&tape), frames, teacher)?;
    let mut att = Tensor::zeros(0, memory.memory.rows());
    for a in &trace.attention {
        att = att.concat_rows(&a.value())?;
    }
    Ok((MelSpec::new(trace.frames.value()), att))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub seq_encoder: EncoderConfig,
    pub fusion: FusionMode,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self { encoder, seq_encoder: encoder, fusion: FusionMode::PbOnly, decoder: DecoderConfig::default() }
    }
}

impl ModelConfig {
    pub fn memory_dim(&self) -> usize {
        match self.fusion {
            FusionMode::PbOnly => self.encoder.dim,
            FusionMode::Concat | FusionMode::AppendRows => self.encoder.dim + self.seq_encoder.dim,
        }
    }

    pub fn uses_phonemes(&self) -> bool {
        self.fusion != FusionMode::PbOnly
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.uses_phonemes() {
            self.seq_encoder.validate()?;
            if self.seq_encoder.kind == EncoderKind::Gcn {
                return Err(G2sError::InvalidConfig("sequential encoder must be ggnn or glstm".into()));
            }
        }
        let d = &self.decoder;
        if d.hidden == 0 || d.attention == 0 || d.mel_dim == 0 {
            return Err(G2sError::InvalidConfig("decoder dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub encoder: EncoderWeights<T>,
    pub seq_encoder: Option<EncoderWeights<T>>,
    pub decoder: DecoderWeights<T>,
}
bundle!(ModelWeights {} nested { encoder, seq_encoder, decoder });

pub type ModelParams = ModelWeights<Tensor>;

/// One training utterance: prosody graph, phoneme tokens and target frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub graph: ProsodyGraph,
    pub phonemes: Vec<String>,
    pub mel: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2sModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Seed for the random initial node and phoneme states.
    pub seed: u64,
}

/// Everything one forward pass produced on a tape.
pub struct Forward<'t> {
    pub memory: Var<'t>,
    pub trace: DecodeTrace<'t>,
}

impl G2sModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&config.encoder, &mut rng)?;
        let seq_encoder =
            if config.uses_phonemes() { Some(EncoderParams::init(&config.seq_encoder, &mut rng)?) } else { None };
        let decoder = DecoderParams::init(&config.decoder, config.memory_dim(), &mut rng);
        Ok(Self { config, params: ModelWeights { encoder, seq_encoder, decoder }, seed })
    }

    /// Builds the full computation for one utterance on `weights`' tape.
    pub fn forward<'t>(
        config: &ModelConfig,
        seed: u64,
        weights: &ModelWeights<Var<'t>>,
        graph: &ProsodyGraph,
        phonemes: &[String],
        frames: usize,
        teacher: Option<&Tensor>,
    ) -> Result<Forward<'t>> {
        let tape = weights.decoder.out.tape();
        let ops = GraphOperators::new(graph).bind(tape);
        let x = tape.var(gnn::init_node_embeddings(graph, config.encoder.dim, seed));
        let h_pb = encode_var(x, &ops, &config.encoder, &weights.encoder)?;
        let theta = match &weights.seq_encoder {
            Some(w) if config.uses_phonemes() => {
                let chain = crate::graph::phoneme_chain(phonemes);
                check_sequential(&chain, &config.seq_encoder)?;
                let chain_ops = GraphOperators::new(&chain).bind(tape);
                let px = tape.var(embed_tokens(phonemes, config.seq_encoder.dim, seed));
                Some(encode_var(px, &chain_ops, &config.seq_encoder, w)?)
            }
            _ => None,
        };
        let memory = fuse_var(h_pb, theta, &word_spans(graph), config.fusion)?;
        let trace = decode_var(memory, &weights.decoder, frames, teacher)?;
        Ok(Forward { memory, trace })
    }

    /// Teacher-forced mean squared error on one example, on a tape.
    pub fn loss_var<'t>(&self, weights: &ModelWeights<Var<'t>>, ex: &Example) -> Result<Var<'t>> {
        let fwd =
            Self::forward(&self.config, self.seed, weights, &ex.graph, &ex.phonemes, ex.mel.rows(), Some(&ex.mel))?;
        let target = weights.decoder.out.tape().var(ex.mel.clone());
        Ok(fwd.trace.frames.mse_loss(target)?)
    }

    pub fn loss(&self, ex: &Example) -> Result<f64> {
        let tape = Tape::new();
        Ok(self.loss_var(&self.params.bind(&tape), ex)?.value().item())
    }

    pub fn mean_loss(&self, data: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        for ex in data {
            total += self.loss(ex)?;
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// Free-running synthesis of `frames` mel frames plus attention weights.
    pub fn predict(&self, graph: &ProsodyGraph, phonemes: &[String], frames: usize) -> Result<(MelSpec, Tensor)> {
        let tape = Tape::new();
        let w = self.params.bind(&tape);
        let fwd = Self::forward(&self.config, self.seed, &w, graph, phonemes, frames, None)?;
        let rows = fwd.memory.shape().0;
        let mut att = Tensor::zeros(0, rows);
        for a in &fwd.trace.attention {
            att = att.concat_rows(&a.value())?;
        }
        Ok((MelSpec::new(fwd.trace.frames.value()), att))
    }

    /// Mean loss over `batch` and its gradient for every parameter, in
    /// visit order.
    pub fn loss_and_grads(&self, batch: &[&Example]) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let w = self.params.bind(&tape);
        let mut total: Option<Var<'_>> = None;
        for ex in batch {
            let l = self.loss_var(&w, ex)?;
            total = Some(match total {
                Some(t) => t.add(l)?,
                None => l,
            });
        }
        let loss =
            total.ok_or_else(|| G2sError::InvalidConfig("empty batch".into()))?.scale(1.0 / batch.len() as f64)?;
        let grads = loss.backward()?;
        Ok((loss.value().item(), collect_grads(&w, &grads)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            iterations: 500,
            batch_size: 4,
            schedule: LrSchedule::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Batch loss before each update.
    pub records: Vec<TrainRecord>,
    /// Mean loss over the whole dataset before the first update.
    pub initial_loss: f64,
    /// Mean loss over the whole dataset after the last update.
    pub final_loss: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,lr\n");
        for r in &self.records {
            out.push_str(&format!("{},{:.12e},{:.6e}\n", r.iteration, r.loss, r.lr));
        }
        out
    }
}

/// Minimises teacher-forced MSE with Adam; batches cycle through the data in
/// order, so a run is fully determined by its config and data.
pub fn train_toy(dataset: &[Example], cfg: &TrainConfig) -> Result<(G2sModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(G2sError::InvalidConfig("empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(G2sError::InvalidConfig("batch_size must be at least 1".into()));
    }
    for ex in dataset {
        if !ex.mel.is_finite() || ex.mel.cols() != cfg.model.decoder.mel_dim || ex.mel.rows() == 0 {
            return Err(G2sError::InvalidConfig(format!(
                "example {:?}: target must be finite with shape (T >= 1, {})",
                ex.id, cfg.model.decoder.mel_dim
            )));
        }
    }
    let mut model = G2sModel::new(cfg.model, cfg.seed)?;
    let mut report = TrainReport { initial_loss: model.mean_loss(dataset)?, ..Default::default() };
    let mut adam = AdamState::default();
    let bs = cfg.batch_size.min(dataset.len());
    for it in 0..cfg.iterations {
        let batch: Vec<&Example> = (0..bs).map(|k| &dataset[(it * bs + k) % dataset.len()]).collect();
        let (loss, grads) = model.loss_and_grads(&batch)?;
        let lr = cfg.schedule.lr(it);
        adam_step(&mut model.params.tensors_mut(), &grads, &mut adam, lr)?;
        log::trace!(target: "graphpb::train", "it={it} loss={loss:.6e} lr={lr:.3e}");
        report.records.push(TrainRecord { iteration: it, loss, lr });
    }
    report.final_loss = model.mean_loss(dataset)?;
    Ok((model, report))
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    id: String,
    graph: ProsodyGraph,
    phonemes: Vec<String>,
    mel: Vec<Vec<f64>>,
}

/// Reads a JSONL dataset: one `{id, graph, phonemes, mel}` object per line.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| G2sError::Dataset { line: i + 1, message };
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let mel = Tensor::from_rows(&rec.mel).map_err(|e| err(e.to_string()))?;
        out.push(Example { id: rec.id, graph: rec.graph, phonemes: rec.phonemes, mel });
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(mut writer: W, data: &[Example]) -> Result<()> {
    for ex in data {
        let rec = DatasetRecord {
            id: ex.id.clone(),
            graph: ex.graph.clone(),
            phonemes: ex.phonemes.clone(),
            mel: ex.mel.to_rows(),
        };
        serde_json::to_writer(&mut writer, &rec).map_err(io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{phoneme_chain, EdgeKind};

    fn small_decoder() -> DecoderConfig {
        DecoderConfig { hidden: 4, attention: 3, mel_dim: 5 }
    }

    #[test]
    fn pb_only_is_identity() {
        let h = Tensor::uniform(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let m = fuse(&h, None, &[], FusionMode::PbOnly).unwrap();
        assert_eq!(m.memory, h);
        assert_eq!(m.source_spans, [1, 2, 3]);
    }

    #[test]
    fn concat_shapes_and_zero_passthrough() {
        let h = Tensor::uniform(2, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let theta = Tensor::zeros(5, 2);
        let m = fuse(&h, Some(&theta), &[0..2, 2..5], FusionMode::Concat).unwrap();
        assert_eq!(m.memory.shape(), (2, 6));
        assert_eq!(m.memory.slice_cols(0, 4).unwrap(), h);
        assert_eq!(m.memory.slice_cols(4, 6).unwrap(), Tensor::zeros(2, 2));
    }

    #[test]
    fn concat_pools_mean_per_word() {
        let h = Tensor::zeros(2, 1);
        let theta = Tensor::from_rows(&[[1.0], [3.0], [10.0]]).unwrap();
        let m = fuse(&h, Some(&theta), &[0..2, 2..3], FusionMode::Concat).unwrap();
        assert_eq!(m.memory.to_rows(), [[0.0, 2.0], [0.0, 10.0]]);
    }

    #[test]
    fn append_rows_layout() {
        let h = Tensor::filled(2, 2, 1.0);
        let theta = Tensor::filled(3, 1, 7.0);
        let m = fuse(&h, Some(&theta), &[0..1, 1..3], FusionMode::AppendRows).unwrap();
        assert_eq!(m.memory.shape(), (5, 3));
        assert_eq!(m.memory.row(0), &[1.0, 1.0, 0.0]);
        assert_eq!(m.memory.row(4), &[0.0, 0.0, 7.0]);
        assert_eq!(m.source_spans, [1, 2, 1, 2, 2]);
    }

    #[test]
    fn span_coverage_errors() {
        let h = Tensor::zeros(2, 2);
        let theta = Tensor::zeros(4, 2);
        for spans in [vec![0..2, 2..3], vec![0..2, 3..4], vec![0..4; 1], vec![0..0, 0..4]] {
            assert!(
                matches!(fuse(&h, Some(&theta), &spans, FusionMode::Concat), Err(G2sError::SpanCoverage { .. })),
                "{spans:?}"
            );
        }
    }

    #[test]
    fn single_row_memory_attends_fully() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DecoderParams::init(&small_decoder(), 4, &mut rng);
        let mem = EncodingMemory { memory: Tensor::uniform(1, 4, 1.0, &mut rng), source_spans: vec![1] };
        let (mel, att) = decode(&mem, &p, 4, None).unwrap();
        assert_eq!(mel.frames.shape(), (4, 5));
        assert_eq!(att.to_rows(), vec![vec![1.0]; 4]);
        assert_eq!((mel.frame_length_ms, mel.frame_shift_ms), (50.0, 12.5));
    }

    #[test]
    fn identical_rows_split_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DecoderParams::init(&small_decoder(), 3, &mut rng);
        let row = Tensor::uniform(1, 3, 1.0, &mut rng);
        let mem = EncodingMemory { memory: row.concat_rows(&row).unwrap(), source_spans: vec![1, 2] };
        let (_, att) = decode(&mem, &p, 1, None).unwrap();
        assert_eq!(att.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DecoderParams::init(&small_decoder(), 3, &mut rng);
        let mem = EncodingMemory { memory: Tensor::uniform(6, 3, 2.0, &mut rng), source_spans: (1..=6).collect() };
        let (_, att) = decode(&mem, &p, 8, None).unwrap();
        for t in 0..8 {
            assert!((att.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(att.row(t).iter().all(|&a| a > 0.0));
        }
    }

    #[test]
    fn decode_rejects_bad_teacher_and_zero_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = DecoderParams::init(&small_decoder(), 3, &mut rng);
        let mem = EncodingMemory { memory: Tensor::zeros(2, 3), source_spans: vec![1, 2] };
        assert!(decode(&mem, &p, 0, None).is_err());
        assert!(decode(&mem, &p, 3, Some(&Tensor::zeros(3, 4))).is_err());
    }

    #[test]
    fn teacher_forcing_changes_later_frames_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = DecoderParams::init(&small_decoder(), 3, &mut rng);
        let mem = EncodingMemory { memory: Tensor::uniform(2, 3, 1.0, &mut rng), source_spans: vec![1, 2] };
        let target = Tensor::filled(3, 5, 0.7);
        let (free, _) = decode(&mem, &p, 3, None).unwrap();
        let (forced, _) = decode(&mem, &p, 3, Some(&target)).unwrap();
        assert_eq!(free.frames.row(0), forced.frames.row(0));
        assert_ne!(free.frames.row(1), forced.frames.row(1));
    }

    #[test]
    fn sequential_encoder_checks_input() {
        let cfg = EncoderConfig { dim: 3, ..Default::default() };
        let params = EncoderParams::seeded(&cfg, 1).unwrap();
        let chain = phoneme_chain(&["a"]);
        assert_eq!(graph_sequential_encode(&chain, &cfg, &params, 1).unwrap().shape(), (1, 3));

        let mut broken = phoneme_chain(&["a", "b", "c"]);
        broken.add_edge(1, 3, EdgeKind::Seq).unwrap();
        assert!(matches!(graph_sequential_encode(&broken, &cfg, &params, 1), Err(G2sError::NotAChain)));

        let gcn = EncoderConfig { kind: EncoderKind::Gcn, ..cfg };
        let gp = EncoderParams::seeded(&gcn, 1).unwrap();
        assert!(graph_sequential_encode(&chain, &gcn, &gp, 1).is_err());
    }

    #[test]
    fn token_embeddings_follow_tokens() {
        let e = embed_tokens(&["a", "b", "a"], 4, 9);
        assert_eq!(e.row(0), e.row(2));
        assert_ne!(e.row(0), e.row(1));
        assert_ne!(embed_tokens(&["a"], 4, 10), embed_tokens(&["a"], 4, 9));
    }

    #[test]
    fn dataset_roundtrip() {
        let mut g = ProsodyGraph::with_nodes(["ab", "c"]);
        g.add_edge(1, 2, EdgeKind::Pph).unwrap();
        let ex = Example {
            id: "u1".into(),
            graph: g,
            phonemes: vec!["a".into(), "b".into(), "c".into()],
            mel: Tensor::filled(2, 3, 0.25),
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, std::slice::from_ref(&ex)).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), [ex]);
        assert!(matches!(read_dataset("{\"id\":1}\n".as_bytes()), Err(G2sError::Dataset { line: 1, .. })));
    }

    #[test]
    fn model_config_checks() {
        let mut cfg = ModelConfig { fusion: FusionMode::Concat, ..Default::default() };
        cfg.seq_encoder.kind = EncoderKind::Gcn;
        assert!(G2sModel::new(cfg, 1).is_err());
        cfg.seq_encoder.kind = EncoderKind::Glstm;
        cfg.seq_encoder.dim = 3;
        assert_eq!(cfg.memory_dim(), 11);
        assert!(G2sModel::new(cfg, 1).is_ok());
    }
}
