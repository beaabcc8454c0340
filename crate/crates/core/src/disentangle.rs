//! Text disentanglement: each adapted text feature is split into a common
//! part (shared template content) and a specific part (subject content) by
//! two encoders shared across the personal, health and dementia texts.
//!
//! Two penalties shape the split. The orthogonal loss pulls common parts of
//! different texts together and pushes specific parts apart:
//!
//! ```text
//! L_O = ½ Σ_{a ≠ b} [ −cos(c_a, c_b) + |cos(s_a, s_b)| ]
//! ```
//!
//! over ordered pairs of present texts. The mutual-information term is
//! realised as the squared Frobenius norm of the cross-covariance between
//! column-standardised common and specific features over a batch, summed over
//! the three texts.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::data::TextComponent;
use crate::encoders::AdapterOutput;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::scalar::Scalar;

/// Common and specific halves of one adapted text feature.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledPair<T> {
    pub common: Vec<T>,
    pub specific: Vec<T>,
    pub source: TextComponent,
}

impl<T: Scalar> DisentangledPair<T> {
    /// `[common, specific]`.
    pub fn concatenated(&self) -> Vec<T> {
        self.common.iter().chain(&self.specific).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Feature<T> {
    pub values: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Disentangler {
    common: Mlp,
    specific: Mlp,
    d_a: usize,
}

impl Disentangler {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_a: usize,
        d_common: usize,
        d_specific: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            common: Mlp::new(store, &format!("{name}.common"), &[d_a, d_common, d_common], rng),
            specific: Mlp::new(store, &format!("{name}.specific"), &[d_a, d_specific, d_specific], rng),
            d_a,
        }
    }

    pub fn d_common(&self) -> usize {
        self.common.d_out()
    }

    pub fn d_specific(&self) -> usize {
        self.specific.d_out()
    }

    /// Batched split of `n × d_a` into `(n × d_c, n × d_s)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let c = self.common.forward(tape, store, x);
        let s = self.specific.forward(tape, store, x);
        (c, s)
    }

    pub fn disentangle<T: Scalar>(&self, store: &ParamStore<T>, f: &AdapterOutput<T>) -> Result<DisentangledPair<T>> {
        if f.values.len() != self.d_a {
            return Err(Error::shape("adapter output", self.d_a, f.values.len()));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Array2::from_shape_vec((1, self.d_a), f.values.clone()).expect("length checked"));
        let (c, s) = self.forward(&mut tape, store, x);
        Ok(DisentangledPair {
            common: tape.value(c).iter().copied().collect(),
            specific: tape.value(s).iter().copied().collect(),
            source: f.component,
        })
    }
}

/// Maps the three per-text blocks (`3 * d_a`, absent blocks zeroed) to the
/// stage dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Projection {
    proj: Linear,
    block: usize,
}

impl Stage1Projection {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        block: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(store, name, 3 * block, d, rng),
            block,
        }
    }

    pub fn block(&self) -> usize {
        self.block
    }

    /// `blocks` are `n × block` in (personal, health, dementia) order and
    /// already masked.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, blocks: [Var; 3]) -> Var {
        let x = tape.concat_cols(&blocks);
        self.proj.forward(tape, store, x)
    }

    /// Pre-projection vector: `[c_p, s_p, c_h, s_h, c_d, s_d]` with zero blocks
    /// for absent texts.
    pub fn preprojection<T: Scalar>(&self, pairs: [Option<&DisentangledPair<T>>; 3]) -> Result<Vec<T>> {
        if pairs.iter().all(Option::is_none) {
            return Err(Error::Input("stage 1 needs at least one textualized group".into()));
        }
        let mut out = Vec::with_capacity(3 * self.block);
        for p in pairs {
            match p {
                Some(p) => {
                    let v = p.concatenated();
                    if v.len() != self.block {
                        return Err(Error::shape("disentangled pair", self.block, v.len()));
                    }
                    out.extend(v);
                }
                None => out.extend(std::iter::repeat_n(T::zero(), self.block)),
            }
        }
        Ok(out)
    }

    pub fn build_stage1_feature<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pairs: [Option<&DisentangledPair<T>>; 3],
    ) -> Result<Stage1Feature<T>> {
        let pre = self.preprojection(pairs)?;
        let mut tape = Tape::new();
        let blocks = [0, 1, 2].map(|i| {
            let part = Array2::from_shape_vec((1, self.block), pre[i * self.block..(i + 1) * self.block].to_vec())
                .expect("block length");
            tape.constant(part)
        });
        let y = self.forward(&mut tape, store, blocks);
        Ok(Stage1Feature {
            values: tape.value(y).iter().copied().collect(),
        })
    }
}

/// Per-row orthogonal loss (n × 1). `masks[i]` is an n × 1 0/1 indicator of
/// text `i` being present.
pub fn orthogonal_loss_rows<T: Scalar>(
    tape: &mut Tape<T>,
    commons: [Var; 3],
    specifics: [Var; 3],
    masks: [Var; 3],
) -> Var {
    let mut total: Option<Var> = None;
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let cc = tape.row_cosine(commons[a], commons[b]);
        let cs = tape.row_cosine(specifics[a], specifics[b]);
        let cs = tape.abs(cs);
        let term = tape.sub(cs, cc);
        let both = tape.mul(masks[a], masks[b]);
        // Two ordered pairs per unordered pair cancel the ½.
        let term = tape.mul(term, both);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    total.expect("three pairs")
}

/// Orthogonal loss over the present pairs of one subject. Fewer than two
/// pairs give 0.
pub fn orthogonal_loss<T: Scalar>(pairs: &[DisentangledPair<T>]) -> T {
    if pairs.len() < 2 {
        return T::zero();
    }
    let row = |v: &[T]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
    let mut tape = Tape::new();
    let mut total = T::zero();
    for i in 0..pairs.len() {
        for j in (i + 1)..pairs.len() {
            let (ci, cj) = (
                tape.constant(row(&pairs[i].common)),
                tape.constant(row(&pairs[j].common)),
            );
            let (si, sj) = (
                tape.constant(row(&pairs[i].specific)),
                tape.constant(row(&pairs[j].specific)),
            );
            let cc = tape.row_cosine(ci, cj);
            let cs = tape.row_cosine(si, sj);
            let unit = |v: T| v.max(-T::one()).min(T::one());
            total += unit(tape.scalar(cs)).abs() - unit(tape.scalar(cc));
        }
    }
    total
}

/// Cross-covariance penalty between standardised `common` (n × d_c) and
/// `specific` (n × d_s) rows of one text, as a 1×1 node: the squared
/// Frobenius norm divided by `d_c * d_s`, i.e. the mean squared
/// cross-correlation.
pub fn mi_penalty_node<T: Scalar>(tape: &mut Tape<T>, common: Var, specific: Var) -> Var {
    let n = tape.shape(common).0;
    let entries = tape.shape(common).1 * tape.shape(specific).1;
    let zc = tape.col_standardize(common);
    let zs = tape.col_standardize(specific);
    let zct = tape.transpose(zc);
    let cov = tape.matmul(zct, zs);
    let sq = tape.square(cov);
    let total = tape.sum(sq);
    tape.scale(total, T::one() / T::of((n * n * entries) as f64))
}

/// Decorrelation surrogate for MI(common, specific) over a batch.
pub fn mi_penalty<T: Scalar>(batch_common: &Array2<T>, batch_specific: &Array2<T>) -> Result<T> {
    let n = batch_common.nrows();
    if n < 2 {
        return Err(Error::Input(format!("MI penalty needs at least 2 samples, got {n}")));
    }
    if batch_specific.nrows() != n {
        return Err(Error::shape("specific batch rows", n, batch_specific.nrows()));
    }
    let mut tape = Tape::new();
    let c = tape.constant(batch_common.clone());
    let s = tape.constant(batch_specific.clone());
    let out = mi_penalty_node(&mut tape, c, s);
    Ok(tape.scalar(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn pair(common: Vec<f64>, specific: Vec<f64>) -> DisentangledPair<f64> {
        DisentangledPair {
            common,
            specific,
            source: TextComponent::Personal,
        }
    }

    #[test]
    fn identical_common_orthogonal_specific_gives_minus_three() {
        let c = vec![0.6, 0.8, 0.0];
        let pairs = vec![
            pair(c.clone(), vec![1.0, 0.0, 0.0]),
            pair(c.clone(), vec![0.0, 1.0, 0.0]),
            pair(c, vec![0.0, 0.0, 1.0]),
        ];
        assert_eq!(orthogonal_loss(&pairs), -3.0);
    }

    #[test]
    fn all_identical_vectors_give_zero() {
        let v = vec![0.3, -0.2, 0.9];
        let pairs = vec![
            pair(v.clone(), v.clone()),
            pair(v.clone(), v.clone()),
            pair(v.clone(), v),
        ];
        assert!(orthogonal_loss(&pairs).abs() < 1e-15);
    }

    #[test]
    fn fewer_than_two_pairs_give_zero() {
        assert_eq!(orthogonal_loss::<f64>(&[]), 0.0);
        assert_eq!(orthogonal_loss(&[pair(vec![1.0], vec![1.0])]), 0.0);
    }

    #[test]
    fn zero_vectors_have_zero_cosine() {
        let pairs = vec![
            pair(vec![0.0, 0.0], vec![1.0, 0.0]),
            pair(vec![1.0, 0.0], vec![0.0, 0.0]),
        ];
        assert_eq!(orthogonal_loss(&pairs), 0.0);
    }

    #[test]
    fn mi_penalty_self_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Array2::from_shape_fn((50, 3), |_| StandardNormal.sample(&mut rng));
        let got = mi_penalty(&c, &c).unwrap();
        // Self-covariance of standardised columns.
        let n = 50.0;
        let mut expected = 0.0;
        let z: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                let col: Vec<f64> = c.column(j).to_vec();
                let m = col.iter().sum::<f64>() / n;
                let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
                col.iter().map(|x| (x - m) / sd).collect()
            })
            .collect();
        for a in &z {
            for b in &z {
                let cov: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
                expected += cov * cov;
            }
        }
        let expected = expected / 9.0;
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn mi_penalty_identical_rows_is_zero() {
        let c = Array2::from_shape_fn((8, 4), |(_, j)| j as f64 * 0.37 + 0.1);
        let s = Array2::from_shape_fn((8, 2), |(_, j)| 1.0 - j as f64);
        assert_eq!(mi_penalty(&c, &s).unwrap(), 0.0);
    }

    #[test]
    fn mi_penalty_rejects_degenerate_batch() {
        let c = Array2::<f64>::zeros((1, 4));
        assert!(matches!(mi_penalty(&c, &c), Err(Error::Input(_))));
    }

    #[test]
    fn preprojection_zeroes_absent_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let proj = Stage1Projection::new(&mut store, "s1", 4, 3, &mut rng);
        let p = pair(vec![1.0, 2.0], vec![3.0, 4.0]);
        let pre = proj.preprojection([Some(&p), Some(&p), None]).unwrap();
        assert_eq!(pre.len(), 12);
        assert_eq!(&pre[8..], &[0.0; 4]);
        assert!(proj.preprojection::<f64>([None, None, None]).is_err());
        assert_eq!(
            proj.build_stage1_feature(&store, [Some(&p), None, None])
                .unwrap()
                .values
                .len(),
            3
        );
    }
}
