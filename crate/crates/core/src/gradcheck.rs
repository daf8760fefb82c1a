//! Central finite-difference checks of tape gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::fixtures::{char_phonemes, seeded_rng, smooth_target};
use crate::g2s::{decode_var, DecoderConfig, DecoderParams, Example, FusionMode, G2sError, G2sModel, ModelConfig};
use crate::gnn::{
    gcn_layer, ggnn_step_var, glstm_step_var, EncoderConfig, EncoderKind, GcnParams, GgnnParams, GlstmParams,
    GraphOperators,
};
use crate::graph::{EdgeKind, ProsodyGraph};
use crate::params::{collect_grads, Leaf, Parameters};
use crate::tensor::{Tape, Tensor};

pub const TOLERANCE: f64 = 1e-4;

/// Central difference stencils.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(L(θ+h) − L(θ−h)) / 2h`, error `O(h²)`.
    TwoPoint,
    /// `(−L(θ+2h) + 8L(θ+h) − 8L(θ−h) + L(θ−2h)) / 12h`, error `O(h⁴)`.
    FourPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteDifference {
    pub step: f64,
    pub stencil: Stencil,
}

impl Default for FiniteDifference {
    fn default() -> Self {
        Self { step: 1e-5, stencil: Stencil::TwoPoint }
    }
}

/// What the layer suite uses. Composite losses carry gradient entries of
/// 1e-7 or less, where two-point rounding noise (~ε·L/h) alone exceeds the
/// tolerance; the wider four-point stencil keeps both rounding and
/// truncation below 1e-11.
pub const SUITE_FD: FiniteDifference = FiniteDifference { step: 1e-3, stencil: Stencil::FourPoint };

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the analytic gradient returned by `loss_and_grads` with a
/// central difference for every scalar in `params`. Only the loss value of
/// the perturbed evaluations is used.
pub fn check_gradients<P, E>(
    name: &str,
    params: &mut P,
    fd: FiniteDifference,
    loss_and_grads: impl Fn(&P) -> Result<(f64, Vec<Tensor>), E>,
) -> Result<GradCheck, E>
where
    P: Parameters,
{
    let (_, analytic) = loss_and_grads(params)?;
    let mut max_rel_error: f64 = 0.0;
    let mut entries = 0;
    for (i, grad) in analytic.iter().enumerate() {
        for k in 0..grad.data().len() {
            let orig = params.tensors()[i].data()[k];
            let mut at = |offset: f64| {
                params.tensors_mut()[i].data_mut()[k] = orig + offset * fd.step;
                loss_and_grads(params).map(|r| r.0)
            };
            let numeric = match fd.stencil {
                Stencil::TwoPoint => (at(1.0)? - at(-1.0)?) / (2.0 * fd.step),
                Stencil::FourPoint => (-at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?) / (12.0 * fd.step),
            };
            params.tensors_mut()[i].data_mut()[k] = orig;
            max_rel_error = max_rel_error.max(relative_error(grad.data()[k], numeric));
            entries += 1;
        }
    }
    Ok(GradCheck { name: name.to_owned(), max_rel_error, entries })
}

fn test_graph() -> ProsodyGraph {
    let mut g = ProsodyGraph::with_nodes(["a", "bc", "d"]);
    g.add_edge(1, 2, EdgeKind::Pph).unwrap();
    g.add_edge(2, 3, EdgeKind::Seq).unwrap();
    g
}

fn weighted_sum<'t>(out: crate::tensor::Var<'t>, weights: &Tensor) -> crate::tensor::Result<crate::tensor::Var<'t>> {
    out.hadamard(out.tape().var(weights.clone()))?.sum()
}

fn randomize<P: Parameters>(p: &mut P, scale: f64, rng: &mut ChaCha8Rng) {
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..=scale);
        }
    }
}

pub fn check_ggnn_step(dim: usize, seed: u64, fd: FiniteDifference) -> Result<GradCheck, G2sError> {
    let mut rng = seeded_rng(seed);
    let graph = test_graph();
    let mut p = GgnnParams::init(dim, true, 0.5, &mut rng);
    randomize(&mut p, 0.5, &mut rng);
    let mut bundle = (p, Leaf(Tensor::uniform(3, dim, 1.0, &mut rng)));
    let w = Tensor::uniform(3, dim, 1.0, &mut rng);
    let ops = GraphOperators::new(&graph);
    check_gradients("ggnn_step", &mut bundle, fd, |b| {
        let tape = Tape::new();
        let bound = b.bind(&tape);
        let out = ggnn_step_var(bound.1 .0, &ops.bind(&tape), &bound.0)?;
        let loss = weighted_sum(out, &w)?;
        Ok::<_, G2sError>((loss.value().item(), collect_grads(&bound, &loss.backward()?)?))
    })
}

pub fn check_glstm_step(dim: usize, seed: u64, fd: FiniteDifference) -> Result<GradCheck, G2sError> {
    let mut rng = seeded_rng(seed);
    let graph = test_graph();
    let mut p = GlstmParams::init(dim, 0.5, &mut rng);
    randomize(&mut p, 0.5, &mut rng);
    let state = (Leaf(Tensor::uniform(3, dim, 1.0, &mut rng)), Leaf(Tensor::uniform(3, dim, 1.0, &mut rng)));
    let mut bundle = (p, state);
    let wh = Tensor::uniform(3, dim, 1.0, &mut rng);
    let wc = Tensor::uniform(3, dim, 1.0, &mut rng);
    let ops = GraphOperators::new(&graph);
    check_gradients("glstm_step", &mut bundle, fd, |b| {
        let tape = Tape::new();
        let bound = b.bind(&tape);
        let (h, c) = glstm_step_var(bound.1 .0 .0, bound.1 .1 .0, &ops.bind(&tape), &bound.0)?;
        let loss = weighted_sum(h, &wh)?.add(weighted_sum(c, &wc)?)?;
        Ok::<_, G2sError>((loss.value().item(), collect_grads(&bound, &loss.backward()?)?))
    })
}

pub fn check_gcn_layer(dim: usize, seed: u64, fd: FiniteDifference) -> Result<GradCheck, G2sError> {
    let mut rng = seeded_rng(seed);
    let graph = test_graph();
    let p = GcnParams::init(dim, dim, dim, 1.0, &mut rng);
    let mut bundle = (p, Leaf(Tensor::uniform(3, dim, 1.0, &mut rng)));
    let w = Tensor::uniform(3, dim, 1.0, &mut rng);
    let ops = GraphOperators::new(&graph);
    check_gradients("gcn_layer", &mut bundle, fd, |b| {
        let tape = Tape::new();
        let bound = b.bind(&tape);
        let out = gcn_layer(bound.1 .0, ops.bind(&tape).adjacency, &bound.0)?;
        let loss = weighted_sum(out, &w)?;
        Ok::<_, G2sError>((loss.value().item(), collect_grads(&bound, &loss.backward()?)?))
    })
}

/// Attention plus decoder over three teacher-forced frames, memory included.
pub fn check_decoder(dim: usize, seed: u64, fd: FiniteDifference) -> Result<GradCheck, G2sError> {
    let mut rng = seeded_rng(seed);
    let cfg = DecoderConfig { hidden: dim, attention: dim, mel_dim: 4 };
    let mut p = DecoderParams::init(&cfg, dim, &mut rng);
    randomize(&mut p, 0.6, &mut rng);
    let mut bundle = (p, Leaf(Tensor::uniform(4, dim, 1.0, &mut rng)));
    let target = smooth_target(3, 4, 0.8, 0.3);
    check_gradients("attention_decoder", &mut bundle, fd, |b| {
        let tape = Tape::new();
        let bound = b.bind(&tape);
        let trace = decode_var(bound.1 .0, &bound.0, 3, Some(&target))?;
        let loss = trace.frames.mse_loss(tape.var(target.clone()))?;
        Ok::<_, G2sError>((loss.value().item(), collect_grads(&bound, &loss.backward()?)?))
    })
}

/// Full model with a fused sequential encoder on a two-word utterance.
pub fn check_end_to_end(dim: usize, seed: u64, fd: FiniteDifference) -> Result<GradCheck, G2sError> {
    let mut graph = ProsodyGraph::with_nodes(["今天", "好"]);
    graph.add_edge(1, 2, EdgeKind::Pph)?;
    let ex = Example { id: "e2e".into(), phonemes: char_phonemes(&graph), graph, mel: smooth_target(3, 4, 0.8, 0.1) };
    let enc = EncoderConfig { kind: EncoderKind::Ggnn, dim, steps: 2, layers: 1, ..Default::default() };
    let seq =
        EncoderConfig { kind: EncoderKind::Glstm, dim: dim.div_ceil(2), steps: 2, layers: 1, ..Default::default() };
    let config = ModelConfig {
        encoder: enc,
        seq_encoder: seq,
        fusion: FusionMode::Concat,
        decoder: DecoderConfig { hidden: dim, attention: dim, mel_dim: 4 },
    };
    let mut model = G2sModel::new(config, seed)?;
    let mut rng = seeded_rng(seed ^ 0x5eed);
    randomize(&mut model.params, 0.6, &mut rng);
    let (cfg, model_seed) = (model.config, model.seed);
    check_gradients("end_to_end", &mut model.params, fd, |p| {
        let m = G2sModel { config: cfg, params: p.clone(), seed: model_seed };
        m.loss_and_grads(&[&ex])
    })
}

/// Every layer check at width `dim`.
pub fn run_suite(dim: usize, seed: u64) -> Result<Vec<GradCheck>, G2sError> {
    Ok(vec![
        check_gcn_layer(dim, seed, SUITE_FD)?,
        check_ggnn_step(dim, seed, SUITE_FD)?,
        check_glstm_step(dim, seed, SUITE_FD)?,
        check_decoder(dim, seed, SUITE_FD)?,
        check_end_to_end(dim, seed, SUITE_FD)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_clamps_denominator() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn two_point_noise_floor_on_tiny_entries() {
        // Documents why the suite uses the four-point stencil: the two-point
        // estimate at h = 1e-5 is dominated by rounding on small entries.
        let wide = check_end_to_end(4, 0, FiniteDifference::default()).unwrap();
        let fine = check_end_to_end(4, 0, SUITE_FD).unwrap();
        assert!(fine.max_rel_error < wide.max_rel_error);
    }

    #[test]
    fn suite_passes_across_widths_and_seeds() {
        for dim in [2, 4, 8] {
            for seed in 0..3 {
                for c in run_suite(dim, seed).unwrap() {
                    assert!(c.passed(TOLERANCE), "dim {dim} seed {seed}: {c:?}");
                }
            }
        }
    }

    #[test]
    fn suite_passes_at_small_width() {
        for c in run_suite(3, 1).unwrap() {
            assert!(c.passed(TOLERANCE), "{c:?}");
            assert!(c.entries > 0);
        }
    }
}
