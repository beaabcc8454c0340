//! Multi-modality fusion, cross-stage alignment and guideline scoring.
//!
//! Fusion attends from a single learnable query `Q` over the available stage
//! features plus the query itself:
//!
//! ```text
//! K = V = [f¹, …, fᵏ, Q]
//! f_r = Q + FFW(Q + ATT(Q, K, V))
//! ```
//!
//! with multi-head attention and no positional encoding, so the result does
//! not depend on the order of the stage features.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::{GuidelineCriterion, SubType};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::scalar::Scalar;

/// Floor applied to the label probability before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A per-stage feature vector of the shared stage dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeature<T> {
    pub stage: u8,
    pub values: Vec<T>,
}

/// Fused feature `f_r` at a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature<T> {
    pub stage: u8,
    pub values: Vec<T>,
}

/// Handle to the learnable query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionQuery(pub ParamId);

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    query: FusionQuery,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ffw: Mlp,
    heads: usize,
    d: usize,
}

fn row<T: Scalar>(v: &[T]) -> Array2<T> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        ffw_width: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "d must divide into heads");
        let q = store.add(
            format!("{name}.query"),
            crate::nn::he_normal(rng, d, 1, 0.5).reversed_axes(),
        );
        Self {
            query: FusionQuery(q),
            wq: Linear::new(store, &format!("{name}.wq"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, rng),
            ffw: Mlp::new(store, &format!("{name}.ffw"), &[d, ffw_width, d], rng),
            heads,
            d,
        }
    }

    pub fn query(&self) -> FusionQuery {
        self.query
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Fuses `features` (each `n × d`) into `n × d`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: &[Var]) -> Var {
        assert!(!features.is_empty());
        let n = tape.shape(features[0]).0;
        let q_row = tape.param(store, self.query.0);
        let q = tape.repeat_rows(q_row, n);

        let mut tokens: Vec<Var> = features.to_vec();
        tokens.push(q);
        let qp = self.wq.forward(tape, store, q);
        let keys: Vec<Var> = tokens.iter().map(|&t| self.wk.forward(tape, store, t)).collect();
        let values: Vec<Var> = tokens.iter().map(|&t| self.wv.forward(tape, store, t)).collect();

        let dh = self.d / self.heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(qp, h * dh, dh);
            let scores: Vec<Var> = keys
                .iter()
                .map(|&k| {
                    let kh = tape.slice_cols(k, h * dh, dh);
                    let prod = tape.mul(qh, kh);
                    let s = tape.row_sum(prod);
                    tape.scale(s, scale)
                })
                .collect();
            let scores = tape.concat_cols(&scores);
            let attn = tape.softmax_rows(scores);
            let mut out: Option<Var> = None;
            for (j, &v) in values.iter().enumerate() {
                let vh = tape.slice_cols(v, h * dh, dh);
                let a = tape.slice_cols(attn, j, 1);
                let weighted = tape.mul_col(vh, a);
                out = Some(match out {
                    Some(o) => tape.add(o, weighted),
                    None => weighted,
                });
            }
            head_outs.push(out.expect("at least one token"));
        }
        let att = tape.concat_cols(&head_outs);
        let att = self.wo.forward(tape, store, att);
        let inner = tape.add(q, att);
        let ff = self.ffw.forward(tape, store, inner);
        tape.add(q, ff)
    }

    pub fn fuse<T: Scalar>(&self, store: &ParamStore<T>, features: &[StageFeature<T>]) -> Result<FusedFeature<T>> {
        if features.is_empty() || features.len() > 3 {
            return Err(Error::Input(format!(
                "fusion takes 1 to 3 stage features, got {}",
                features.len()
            )));
        }
        if let Some(f) = features.iter().find(|f| f.values.len() != self.d) {
            return Err(Error::shape(
                format!("stage-{} feature", f.stage),
                self.d,
                f.values.len(),
            ));
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = features.iter().map(|f| tape.constant(row(&f.values))).collect();
        let out = self.forward(&mut tape, store, &vars);
        Ok(FusedFeature {
            stage: features.len() as u8,
            values: tape.value(out).iter().copied().collect(),
        })
    }
}

/// Alternative to attention fusion: zero-padded concatenation of the three
/// stage slots followed by a linear map to `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatFusion {
    proj: Linear,
    d: usize,
}

impl ConcatFusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, name, 3 * d, d, rng),
            d,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: &[Var]) -> Var {
        let n = tape.shape(features[0]).0;
        let mut slots = features.to_vec();
        while slots.len() < 3 {
            slots.push(tape.constant(Array2::zeros((n, self.d))));
        }
        let x = tape.concat_cols(&slots);
        self.proj.forward(tape, store, x)
    }
}

/// Per-row `mean((a - stopgrad(b))²)` as n × 1.
pub fn mse_rows<T: Scalar>(tape: &mut Tape<T>, earlier: Var, later: Var) -> Var {
    let d = tape.shape(earlier).1;
    let target = tape.stop_grad(later);
    let diff = tape.sub(earlier, target);
    let sq = tape.square(diff);
    let s = tape.row_sum(sq);
    tape.scale(s, T::one() / T::of(d as f64))
}

/// Sum of consecutive-stage MSEs with the later feature held constant.
pub fn alignment_loss<T: Scalar>(
    f1: &StageFeature<T>,
    f2: Option<&StageFeature<T>>,
    f3: Option<&StageFeature<T>>,
) -> Result<T> {
    let d = f1.values.len();
    for f in [f2, f3].into_iter().flatten() {
        if f.values.len() != d {
            return Err(Error::shape(format!("stage-{} feature", f.stage), d, f.values.len()));
        }
    }
    if f3.is_some() && f2.is_none() {
        return Err(Error::Input("stage-3 feature without stage-2 feature".into()));
    }
    let mut tape = Tape::new();
    let chain: Vec<Var> = std::iter::once(f1)
        .chain(f2)
        .chain(f3)
        .map(|f| tape.constant(row(&f.values)))
        .collect();
    let mut total = T::zero();
    for w in chain.windows(2) {
        let m = mse_rows(&mut tape, w[0], w[1]);
        total += tape.scalar(m);
    }
    Ok(total)
}

/// Guideline criteria projected into the stage space, one unit row per
/// sub-type (4 × d).
#[derive(Clone, Debug, PartialEq)]
pub struct CriterionEmbedding<T> {
    pub rows: Array2<T>,
}

/// Learnable linear map from frozen criterion-text embeddings to `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct CriteriaProjection {
    proj: Linear,
}

/// Frozen text embeddings of the corpus, `4 × d_text`, in sub-type order.
pub fn criteria_text_matrix<T: Scalar>(encoder: &TextEncoder, corpus: &[GuidelineCriterion]) -> Result<Array2<T>> {
    let mut sorted: Vec<&GuidelineCriterion> = corpus.iter().collect();
    sorted.sort_by_key(|c| c.subtype.code());
    if sorted.len() != SubType::COUNT || sorted.iter().enumerate().any(|(i, c)| c.subtype.code() != i) {
        return Err(Error::Input(
            "guideline corpus must hold exactly one criterion per sub-type".into(),
        ));
    }
    let mut m = Array2::zeros((SubType::COUNT, encoder.dim()));
    for (i, c) in sorted.iter().enumerate() {
        let e = encoder.encode(&c.text)?;
        for (j, &x) in e.as_slice().iter().enumerate() {
            m[[i, j]] = T::of(x);
        }
    }
    Ok(m)
}

impl CriteriaProjection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_text: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(store, name, d_text, d, rng),
        }
    }

    /// `text` is the constant `4 × d_text` criteria matrix; returns unit rows.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, text: Var) -> Var {
        let p = self.proj.forward(tape, store, text);
        tape.normalize_rows(p)
    }

    pub fn encode_criteria<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        encoder: &TextEncoder,
        corpus: &[GuidelineCriterion],
    ) -> Result<CriterionEmbedding<T>> {
        let m = criteria_text_matrix(encoder, corpus)?;
        let mut tape = Tape::new();
        let x = tape.constant(m);
        let y = self.forward(&mut tape, store, x);
        Ok(CriterionEmbedding {
            rows: tape.value(y).clone(),
        })
    }
}

/// Softmax over `cos(f_r, criterion_j) / τ`; `criteria` rows must be unit.
pub fn scores_node<T: Scalar>(tape: &mut Tape<T>, fused: Var, criteria: Var, temperature: T) -> Var {
    let f = tape.normalize_rows(fused);
    let ct = tape.transpose(criteria);
    let logits = tape.matmul(f, ct);
    let logits = tape.scale(logits, T::one() / temperature);
    tape.softmax_rows(logits)
}

pub fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

pub fn contrastive_scores<T: Scalar>(
    fused: &FusedFeature<T>,
    criteria: &CriterionEmbedding<T>,
    temperature: f64,
) -> Result<[f64; 4]> {
    check_temperature(temperature)?;
    if fused.values.len() != criteria.rows.ncols() {
        return Err(Error::shape("fused feature", criteria.rows.ncols(), fused.values.len()));
    }
    let mut tape = Tape::new();
    let f = tape.constant(row(&fused.values));
    let c = tape.constant(criteria.rows.clone());
    let p = scores_node(&mut tape, f, c, T::of(temperature));
    let v = tape.value(p);
    Ok([0, 1, 2, 3].map(|j| v[[0, j]].as_f64()))
}

/// `-ln p[label]`, with the probability floored at [`PROB_FLOOR`].
pub fn guideline_contrastive_loss(probs: &[f64; 4], label: SubType) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-8 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Input(format!("not a probability vector: {probs:?}")));
    }
    let p = probs[label.code()];
    if p < PROB_FLOOR {
        log::warn!("label probability {p:e} clamped to {PROB_FLOOR:e}");
    }
    Ok(-p.max(PROB_FLOOR).ln())
}
