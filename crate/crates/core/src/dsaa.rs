//! The two trainable stages: attribute prefix adapter and K/V modulator.
//!
//! The adapter turns each attribute token embedding into a prefix row
//! through a bottleneck MLP with a residual, rescaled so the output norm
//! equals the input norm. The modulator pools the attribute embeddings
//! into a condition vector and emits near-identity per-channel scale
//! vectors for Keys and Values, bounded inside (1-gamma, 1+gamma) by a
//! tanh. Both start as exact identities: the second linear layer of every
//! MLP is zero-initialized.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, Tensor};
use crate::text::AttributeSpanSet;

#[derive(Debug, Clone, PartialEq)]
pub enum DsaaError {
    /// Modulation needs at least one attribute span.
    EmptySpans,
    SpanOutOfRange { index: usize, rows: usize },
    BadConfig { detail: String },
    Numerics(NumericsError),
}

impl From<NumericsError> for DsaaError {
    fn from(e: NumericsError) -> Self {
        DsaaError::Numerics(e)
    }
}

impl core::fmt::Display for DsaaError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DsaaError::EmptySpans => write!(f, "no attribute spans to modulate with"),
            DsaaError::SpanOutOfRange { index, rows } => {
                write!(f, "span token index {index} outside sequence of {rows} rows")
            }
            DsaaError::BadConfig { detail } => write!(f, "invalid adapter config: {detail}"),
            DsaaError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for DsaaError {}

const INIT_STD: f64 = 0.02;

/// Prefix adapter parameters. `w1` is `[d, D]`, `w2` `[D, d]` with the
/// bottleneck `d < D`; the layer norm acts on the bottleneck space.
#[derive(Debug, Clone)]
pub struct ApaWeights {
    pub w1: Tensor,
    pub w2: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub ln_eps: f64,
}

impl ApaWeights {
    /// `w2` starts at zero so the adapter is the identity map.
    pub fn init<R: Rng + ?Sized>(dim: usize, bottleneck: usize, rng: &mut R) -> Self {
        ApaWeights {
            w1: Tensor::randn(vec![bottleneck, dim], INIT_STD, rng).with_grad(),
            w2: Tensor::zeros(vec![dim, bottleneck]).with_grad(),
            ln_gamma: Tensor::new(vec![bottleneck], vec![1.0; bottleneck])
                .expect("shape matches data")
                .with_grad(),
            ln_beta: Tensor::zeros(vec![bottleneck]).with_grad(),
            ln_eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn bottleneck(&self) -> usize {
        self.w1.rows()
    }

    pub fn validate(&self) -> Result<(), DsaaError> {
        let (d, big_d) = (self.bottleneck(), self.dim());
        if d == 0 || big_d == 0 || d >= big_d {
            return Err(DsaaError::BadConfig {
                detail: format!("bottleneck {d} must be in 1..dim ({big_d})"),
            });
        }
        if self.w2.shape() != [big_d, d] {
            return Err(DsaaError::BadConfig {
                detail: format!("w2 shape {:?} does not mirror w1", self.w2.shape()),
            });
        }
        Ok(())
    }
}

/// K/V modulator parameters; the gammas bound the scale band and are
/// fixed hyperparameters, not trained.
#[derive(Debug, Clone)]
pub struct ModulatorWeights {
    pub wk1: Tensor,
    pub wk2: Tensor,
    pub wv1: Tensor,
    pub wv2: Tensor,
    pub gamma_k: f64,
    pub gamma_v: f64,
}

impl ModulatorWeights {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        bottleneck: usize,
        gamma_k: f64,
        gamma_v: f64,
        rng: &mut R,
    ) -> Self {
        ModulatorWeights {
            wk1: Tensor::randn(vec![bottleneck, dim], INIT_STD, rng).with_grad(),
            wk2: Tensor::zeros(vec![dim, bottleneck]).with_grad(),
            wv1: Tensor::randn(vec![bottleneck, dim], INIT_STD, rng).with_grad(),
            wv2: Tensor::zeros(vec![dim, bottleneck]).with_grad(),
            gamma_k,
            gamma_v,
        }
    }

    pub fn validate(&self) -> Result<(), DsaaError> {
        if !(self.gamma_k > 0.0) || !(self.gamma_v > 0.0) {
            return Err(DsaaError::BadConfig {
                detail: format!(
                    "gammas must be positive, got {} and {}",
                    self.gamma_k, self.gamma_v
                ),
            });
        }
        if self.wk1.rows() == 0 {
            return Err(DsaaError::BadConfig {
                detail: "modulator bottleneck must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Everything training updates, as one unit.
#[derive(Debug, Clone)]
pub struct DsaaWeights {
    pub apa: ApaWeights,
    pub modulator: ModulatorWeights,
}

impl DsaaWeights {
    /// Both bottlenecks default to `dim / 4`, gammas to 0.1.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let b = (dim / 4).max(1);
        DsaaWeights {
            apa: ApaWeights::init(dim, b, rng),
            modulator: ModulatorWeights::init(dim, b, 0.1, 0.1, rng),
        }
    }

    pub fn validate(&self) -> Result<(), DsaaError> {
        self.apa.validate()?;
        self.modulator.validate()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        vec![
            (String::from("dsaa/apa/w1"), self.apa.w1.clone()),
            (String::from("dsaa/apa/w2"), self.apa.w2.clone()),
            (String::from("dsaa/apa/ln_gamma"), self.apa.ln_gamma.clone()),
            (String::from("dsaa/apa/ln_beta"), self.apa.ln_beta.clone()),
            (String::from("dsaa/mod/wk1"), self.modulator.wk1.clone()),
            (String::from("dsaa/mod/wk2"), self.modulator.wk2.clone()),
            (String::from("dsaa/mod/wv1"), self.modulator.wv1.clone()),
            (String::from("dsaa/mod/wv2"), self.modulator.wv2.clone()),
        ]
    }

    pub fn from_named(
        gamma_k: f64,
        gamma_v: f64,
        ln_eps: f64,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self, DsaaError> {
        let mut get = |name: &str| {
            lookup(name)
                .map(|t| t.with_grad())
                .ok_or(DsaaError::BadConfig {
                    detail: format!("checkpoint is missing parameter {name}"),
                })
        };
        let out = DsaaWeights {
            apa: ApaWeights {
                w1: get("dsaa/apa/w1")?,
                w2: get("dsaa/apa/w2")?,
                ln_gamma: get("dsaa/apa/ln_gamma")?,
                ln_beta: get("dsaa/apa/ln_beta")?,
                ln_eps,
            },
            modulator: ModulatorWeights {
                wk1: get("dsaa/mod/wk1")?,
                wk2: get("dsaa/mod/wk2")?,
                wv1: get("dsaa/mod/wv1")?,
                wv2: get("dsaa/mod/wv2")?,
                gamma_k,
                gamma_v,
            },
        };
        out.validate()?;
        Ok(out)
    }
}

/// Per-channel K and V scale vectors, shared by every attribute token of a
/// caption. Components live strictly inside the gamma band around 1.
#[derive(Debug, Clone)]
pub struct ScalePair {
    pub s_k: Tensor,
    pub s_v: Tensor,
}

/// Pooled attribute context the modulator conditions on.
#[derive(Debug, Clone)]
pub struct ConditionVector {
    pub c: Tensor,
}

pub struct ApaTapeWeights {
    pub w1: NodeId,
    pub w2: NodeId,
    pub ln_gamma: NodeId,
    pub ln_beta: NodeId,
    pub ln_eps: f64,
}

pub struct ModulatorTapeWeights {
    pub wk1: NodeId,
    pub wk2: NodeId,
    pub wv1: NodeId,
    pub wv2: NodeId,
    pub gamma_k: f64,
    pub gamma_v: f64,
}

pub struct DsaaTapeWeights {
    pub apa: ApaTapeWeights,
    pub modulator: ModulatorTapeWeights,
}

impl DsaaTapeWeights {
    /// `trainable` registers parameters as gradient leaves; otherwise they
    /// enter as constants.
    pub fn register(tape: &mut Tape, w: &DsaaWeights, trainable: bool) -> Self {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        };
        DsaaTapeWeights {
            apa: ApaTapeWeights {
                w1: reg(&w.apa.w1),
                w2: reg(&w.apa.w2),
                ln_gamma: reg(&w.apa.ln_gamma),
                ln_beta: reg(&w.apa.ln_beta),
                ln_eps: w.apa.ln_eps,
            },
            modulator: ModulatorTapeWeights {
                wk1: reg(&w.modulator.wk1),
                wk2: reg(&w.modulator.wk2),
                wv1: reg(&w.modulator.wv1),
                wv2: reg(&w.modulator.wv2),
                gamma_k: w.modulator.gamma_k,
                gamma_v: w.modulator.gamma_v,
            },
        }
    }

    /// Leaf ids in `DsaaWeights::to_named` order, for gradient readout.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        vec![
            self.apa.w1,
            self.apa.w2,
            self.apa.ln_gamma,
            self.apa.ln_beta,
            self.modulator.wk1,
            self.modulator.wk2,
            self.modulator.wv1,
            self.modulator.wv2,
        ]
    }
}

/// One prefix row from one attribute embedding row `a` of shape `[1, D]`.
///
/// Returns the output node and whether the zero-norm degenerate branch was
/// taken (the input passes through unchanged in that case).
pub fn apa_prefix_on_tape(
    tape: &mut Tape,
    w: &ApaTapeWeights,
    a: NodeId,
) -> Result<(NodeId, bool), NumericsError> {
    let norm_sq: f64 = tape.value(a).iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        return Ok((a, true));
    }
    let h = tape.matmul_nt(a, w.w1)?;
    let g = tape.gelu(h);
    let n = tape.layer_norm(g, w.ln_gamma, w.ln_beta, w.ln_eps)?;
    let r = tape.matmul_nt(n, w.w2)?;
    let p = tape.add(a, r)?;
    let p_norm = tape.l2_norm(p);
    let a_norm = tape.l2_norm(a);
    // Single division: when p equals a bitwise the ratio is exactly 1 and
    // the rescale is a no-op.
    let ratio = tape.div(a_norm, p_norm)?;
    let out = tape.mul_scalar(p, ratio)?;
    Ok((out, false))
}

/// Prefix block for a caption: one row per attribute token index, ascending.
/// `None` when the span set is empty (the fallback path attaches nothing).
pub fn build_prefixes_on_tape(
    tape: &mut Tape,
    w: &ApaTapeWeights,
    embeds: &Tensor,
    spans: &AttributeSpanSet,
) -> Result<Option<NodeId>, DsaaError> {
    let indices = spans.attr_indices();
    if indices.is_empty() {
        return Ok(None);
    }
    let rows = embeds.rows();
    let d = embeds.cols();
    let mut parts = Vec::with_capacity(indices.len());
    let mut zero_rows = 0usize;
    for &idx in &indices {
        if idx == 0 || idx > rows {
            return Err(DsaaError::SpanOutOfRange { index: idx, rows });
        }
        let row = Tensor::new(vec![1, d], embeds.row(idx - 1).to_vec())?;
        let a = tape.constant(&row);
        let (p, degenerate) = apa_prefix_on_tape(tape, w, a)?;
        if degenerate {
            zero_rows += 1;
        }
        parts.push(p);
    }
    if zero_rows > 0 {
        log::warn!("{zero_rows} zero-norm attribute embeddings passed through unadapted");
    }
    Ok(Some(tape.concat_rows(&parts)?))
}

/// Span-length-weighted mean of span prototypes. Spans are disjoint by
/// construction, so this is the plain mean over covered rows. `[1, D]`.
pub fn condition_vector_on_tape(
    tape: &mut Tape,
    embeds: NodeId,
    spans: &AttributeSpanSet,
) -> Result<NodeId, DsaaError> {
    let indices = spans.attr_indices();
    if indices.is_empty() {
        return Err(DsaaError::EmptySpans);
    }
    let rows = tape.shape(embeds)[0];
    let d = tape.shape(embeds)[1];
    let mut zero_based = Vec::with_capacity(indices.len());
    for &idx in &indices {
        if idx == 0 || idx > rows {
            return Err(DsaaError::SpanOutOfRange { index: idx, rows });
        }
        zero_based.push(idx - 1);
    }
    let m = tape.row_mean_subset(embeds, &zero_based)?;
    Ok(tape.reshape(m, vec![1, d])?)
}

/// K and V scale nodes, each `[1, D]`, from a `[1, D]` condition vector.
pub fn modulation_scales_on_tape(
    tape: &mut Tape,
    w: &ModulatorTapeWeights,
    c: NodeId,
) -> Result<(NodeId, NodeId), NumericsError> {
    let branch = |tape: &mut Tape, w1, w2, gamma| -> Result<NodeId, NumericsError> {
        let h = tape.matmul_nt(c, w1)?;
        let g = tape.gelu(h);
        let t = tape.matmul_nt(g, w2)?;
        let th = tape.tanh(t);
        let scaled = tape.scale(th, gamma);
        Ok(tape.add_const(scaled, 1.0))
    };
    let s_k = branch(tape, w.wk1, w.wk2, w.gamma_k)?;
    let s_v = branch(tape, w.wv1, w.wv2, w.gamma_v)?;
    Ok((s_k, s_v))
}

fn as_row(t: &Tensor) -> Result<Tensor, NumericsError> {
    Tensor::new(vec![1, t.len()], t.data().to_vec())
}

/// Value-level adapter application; shape of `a` is preserved.
pub fn apa_prefix(w: &ApaWeights, a: &Tensor) -> Result<Tensor, DsaaError> {
    let mut tape = Tape::new();
    let weights = DsaaTapeWeights::register(
        &mut tape,
        &DsaaWeights {
            apa: w.clone(),
            modulator: ModulatorWeights {
                wk1: Tensor::zeros(vec![1, w.dim()]),
                wk2: Tensor::zeros(vec![w.dim(), 1]),
                wv1: Tensor::zeros(vec![1, w.dim()]),
                wv2: Tensor::zeros(vec![w.dim(), 1]),
                gamma_k: 0.1,
                gamma_v: 0.1,
            },
        },
        false,
    );
    let row = as_row(a)?;
    let node = tape.constant(&row);
    let (out, _) = apa_prefix_on_tape(&mut tape, &weights.apa, node)?;
    let mut t = tape.value_tensor(out);
    t = Tensor::new(a.shape().to_vec(), t.data().to_vec())?;
    Ok(t)
}

/// Value-level prefix block; empty spans give a `[0, D]` tensor.
pub fn build_prefixes(
    w: &ApaWeights,
    embeds: &Tensor,
    spans: &AttributeSpanSet,
) -> Result<Tensor, DsaaError> {
    let mut tape = Tape::new();
    let w1 = tape.constant(&w.w1);
    let w2 = tape.constant(&w.w2);
    let ln_gamma = tape.constant(&w.ln_gamma);
    let ln_beta = tape.constant(&w.ln_beta);
    let tw = ApaTapeWeights {
        w1,
        w2,
        ln_gamma,
        ln_beta,
        ln_eps: w.ln_eps,
    };
    match build_prefixes_on_tape(&mut tape, &tw, embeds, spans)? {
        Some(node) => Ok(tape.value_tensor(node)),
        None => Ok(Tensor::new(vec![0, embeds.cols()], Vec::new())?),
    }
}

pub fn condition_vector(
    embeds: &Tensor,
    spans: &AttributeSpanSet,
) -> Result<ConditionVector, DsaaError> {
    let mut tape = Tape::new();
    let e = tape.constant(embeds);
    let node = condition_vector_on_tape(&mut tape, e, spans)?;
    let v = tape.value_tensor(node);
    Ok(ConditionVector {
        c: Tensor::new(vec![v.len()], v.data().to_vec())?,
    })
}

pub fn modulation_scales(
    w: &ModulatorWeights,
    c: &ConditionVector,
) -> Result<ScalePair, DsaaError> {
    let mut tape = Tape::new();
    let tw = ModulatorTapeWeights {
        wk1: tape.constant(&w.wk1),
        wk2: tape.constant(&w.wk2),
        wv1: tape.constant(&w.wv1),
        wv2: tape.constant(&w.wv2),
        gamma_k: w.gamma_k,
        gamma_v: w.gamma_v,
    };
    let row = as_row(&c.c)?;
    let cn = tape.constant(&row);
    let (sk, sv) = modulation_scales_on_tape(&mut tape, &tw, cn)?;
    let flat = |t: Tensor| Tensor::new(vec![t.len()], t.data().to_vec());
    Ok(ScalePair {
        s_k: flat(tape.value_tensor(sk))?,
        s_v: flat(tape.value_tensor(sv))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::stream;
    use crate::text::AttrSpan;

    fn spanset(indices: &[&[usize]]) -> AttributeSpanSet {
        AttributeSpanSet {
            spans: indices
                .iter()
                .enumerate()
                .map(|(i, idxs)| AttrSpan {
                    phrase: format!("attr{i}"),
                    token_indices: idxs.to_vec(),
                })
                .collect(),
            unmatched: Vec::new(),
        }
    }

    #[test]
    fn zero_weights_is_exact_identity() {
        let mut rng = stream(3, "test.apa");
        let mut w = ApaWeights::init(8, 2, &mut rng);
        w.w1 = Tensor::zeros(vec![2, 8]);
        let a = Tensor::randn(vec![8], 1.0, &mut rng);
        let out = apa_prefix(&w, &a).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&a));
    }

    #[test]
    fn zero_w2_alone_is_exact_identity() {
        let mut rng = stream(4, "test.apa");
        let w = ApaWeights::init(8, 2, &mut rng);
        assert!(w.w2.data().iter().all(|&v| v == 0.0));
        let a = Tensor::randn(vec![8], 1.0, &mut rng);
        let out = apa_prefix(&w, &a).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&a));
    }

    #[test]
    fn norm_preserved_under_random_weights() {
        let mut rng = stream(5, "test.apa.norm");
        for _ in 0..200 {
            let mut w = ApaWeights::init(8, 2, &mut rng);
            w.w2 = Tensor::randn(vec![8, 2], 0.5, &mut rng);
            let a = Tensor::randn(vec![8], 1.0, &mut rng);
            let out = apa_prefix(&w, &a).unwrap();
            assert!((out.l2() - a.l2()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_norm_input_passes_through() {
        let mut rng = stream(6, "test.apa");
        let w = ApaWeights::init(8, 2, &mut rng);
        let a = Tensor::zeros(vec![8]);
        let out = apa_prefix(&w, &a).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apa_gradients_match_finite_differences() {
        let mut rng = stream(7, "test.apa.grad");
        let mut w = ApaWeights::init(6, 2, &mut rng);
        w.w2 = Tensor::randn(vec![6, 2], 0.3, &mut rng).with_grad();
        let a = Tensor::randn(vec![1, 6], 1.0, &mut rng);
        let probe = Tensor::randn(vec![1, 6], 1.0, &mut rng);
        let leaves = [w.w1.clone(), w.w2.clone(), w.ln_gamma.clone(), w.ln_beta.clone()];
        let report = check_gradients(&leaves, |tape, ls| {
            let tw = ApaTapeWeights {
                w1: tape.leaf(&ls[0]),
                w2: tape.leaf(&ls[1]),
                ln_gamma: tape.leaf(&ls[2]),
                ln_beta: tape.leaf(&ls[3]),
                ln_eps: 1e-5,
            };
            let an = tape.constant(&a);
            let (out, _) = apa_prefix_on_tape(tape, &tw, an).unwrap();
            let pn = tape.constant(&probe);
            let loss = tape.dot(out, pn).unwrap();
            (vec![tw.w1, tw.w2, tw.ln_gamma, tw.ln_beta], loss)
        });
        assert!(report.within(1e-4, 1e-7), "worst: {:?}", report);
    }

    #[test]
    fn prefixes_follow_ascending_indices() {
        let mut rng = stream(8, "test.apa");
        let w = ApaWeights::init(8, 2, &mut rng);
        let embeds = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let spans = spanset(&[&[4], &[2]]);
        let block = build_prefixes(&w, &embeds, &spans).unwrap();
        assert_eq!(block.shape(), [2, 8]);
        let p2 = apa_prefix(&w, &Tensor::new(vec![8], embeds.row(1).to_vec()).unwrap()).unwrap();
        let p4 = apa_prefix(&w, &Tensor::new(vec![8], embeds.row(3).to_vec()).unwrap()).unwrap();
        assert_eq!(block.row(0), p2.data());
        assert_eq!(block.row(1), p4.data());
    }

    #[test]
    fn empty_spans_give_empty_prefix_block() {
        let mut rng = stream(9, "test.apa");
        let w = ApaWeights::init(8, 2, &mut rng);
        let embeds = Tensor::randn(vec![3, 8], 1.0, &mut rng);
        let block = build_prefixes(&w, &embeds, &spanset(&[])).unwrap();
        assert_eq!(block.shape(), [0, 8]);
    }

    #[test]
    fn condition_vector_matches_weighted_prototype_form() {
        let mut rng = stream(10, "test.cond");
        let embeds = Tensor::randn(vec![7, 4], 1.0, &mut rng);
        // Spans of length 1 and 3: c = (p + 3q) / 4.
        let spans = spanset(&[&[2], &[4, 5, 6]]);
        let got = condition_vector(&embeds, &spans).unwrap();
        let p = embeds.row(1);
        let q: Vec<f64> = (0..4)
            .map(|j| (embeds.row(3)[j] + embeds.row(4)[j] + embeds.row(5)[j]) / 3.0)
            .collect();
        for j in 0..4 {
            let want = (1.0 * p[j] + 3.0 * q[j]) / 4.0;
            assert!((got.c.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn condition_vector_single_span_is_span_mean() {
        let embeds = Tensor::new(
            vec![3, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let got = condition_vector(&embeds, &spanset(&[&[2, 3]])).unwrap();
        assert_eq!(got.c.data(), &[4.0, 5.0]);
    }

    #[test]
    fn condition_vector_rejects_empty_spans() {
        let embeds = Tensor::zeros(vec![3, 2]);
        assert_eq!(
            condition_vector(&embeds, &spanset(&[])).unwrap_err(),
            DsaaError::EmptySpans
        );
    }

    #[test]
    fn zero_modulator_weights_give_unit_scales() {
        let mut rng = stream(11, "test.mod");
        let w = ModulatorWeights::init(8, 2, 0.1, 0.1, &mut rng);
        let c = ConditionVector {
            c: Tensor::randn(vec![8], 1.0, &mut rng),
        };
        let sp = modulation_scales(&w, &c).unwrap();
        assert!(sp.s_k.data().iter().all(|&v| v == 1.0));
        assert!(sp.s_v.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scales_stay_strictly_inside_gamma_band() {
        let mut rng = stream(12, "test.mod.band");
        for _ in 0..200 {
            let mut w = ModulatorWeights::init(8, 2, 0.1, 0.1, &mut rng);
            w.wk2 = Tensor::randn(vec![8, 2], 5.0, &mut rng);
            w.wv2 = Tensor::randn(vec![8, 2], 5.0, &mut rng);
            let c = ConditionVector {
                c: Tensor::randn(vec![8], 3.0, &mut rng),
            };
            let sp = modulation_scales(&w, &c).unwrap();
            for &v in sp.s_k.data() {
                assert!(v > 1.0 - w.gamma_k && v < 1.0 + w.gamma_k);
            }
            for &v in sp.s_v.data() {
                assert!(v > 1.0 - w.gamma_v && v < 1.0 + w.gamma_v);
            }
        }
    }

    #[test]
    fn modulator_gradients_match_finite_differences() {
        let mut rng = stream(13, "test.mod.grad");
        let mut w = ModulatorWeights::init(6, 2, 0.1, 0.1, &mut rng);
        w.wk2 = Tensor::randn(vec![6, 2], 0.5, &mut rng).with_grad();
        w.wv2 = Tensor::randn(vec![6, 2], 0.5, &mut rng).with_grad();
        let c = Tensor::randn(vec![1, 6], 1.0, &mut rng);
        let probe = Tensor::randn(vec![1, 6], 1.0, &mut rng);
        let leaves = [w.wk1.clone(), w.wk2.clone(), w.wv1.clone(), w.wv2.clone()];
        let report = check_gradients(&leaves, |tape, ls| {
            let tw = ModulatorTapeWeights {
                wk1: tape.leaf(&ls[0]),
                wk2: tape.leaf(&ls[1]),
                wv1: tape.leaf(&ls[2]),
                wv2: tape.leaf(&ls[3]),
                gamma_k: 0.1,
                gamma_v: 0.1,
            };
            let cn = tape.constant(&c);
            let (sk, sv) = modulation_scales_on_tape(tape, &tw, cn).unwrap();
            let pn = tape.constant(&probe);
            let lk = tape.dot(sk, pn).unwrap();
            let lv = tape.dot(sv, pn).unwrap();
            let loss = tape.add(lk, lv).unwrap();
            (vec![tw.wk1, tw.wk2, tw.wv1, tw.wv2], loss)
        });
        assert!(report.within(1e-4, 1e-7), "worst: {:?}", report);
    }

    #[test]
    fn named_roundtrip() {
        let mut rng = stream(14, "test.dsaa");
        let w = DsaaWeights::init(16, &mut rng);
        let named = w.to_named();
        let mut map: alloc::collections::BTreeMap<String, Tensor> = named.into_iter().collect();
        let back = DsaaWeights::from_named(0.1, 0.1, 1e-5, |n| map.remove(n)).unwrap();
        assert_eq!(back.apa.w1.data(), w.apa.w1.data());
        assert_eq!(back.modulator.wv1.data(), w.modulator.wv1.data());
        assert!(back.apa.w1.requires_grad);
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut rng = stream(15, "test.dsaa");
        let mut w = DsaaWeights::init(16, &mut rng);
        assert!(w.validate().is_ok());
        w.modulator.gamma_k = 0.0;
        assert!(matches!(w.validate(), Err(DsaaError::BadConfig { .. })));
        let mut w2 = ApaWeights::init(8, 8, &mut rng);
        w2.ln_eps = 1e-5;
        assert!(matches!(w2.validate(), Err(DsaaError::BadConfig { .. })));
    }
}
