//! Confidence-gated staging: losses during training, early exit at inference.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{top_two, Tape, Var};
use crate::data::{SubType, SubjectRecord};
use crate::disentangle::{mi_penalty_node, orthogonal_loss_rows};
use crate::error::{Error, Result};
use crate::fusion_align::{mse_rows, PROB_FLOOR};
use crate::model::{ForwardPass, Model, PreparedSubject};
use crate::scalar::Scalar;

pub const NUM_STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Exit thresholds for stages 1 and 2.
    pub thresholds: [f64; 2],
    /// Penalty weights δ for stages 1 and 2.
    pub penalties: [f64; 2],
    /// When set, a wrong prediction always takes the contrastive loss
    /// regardless of its confidence.
    pub penalty_requires_correct: bool,
    /// When false every subject runs to the last stage.
    pub progressive: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            thresholds: [0.3, 0.3],
            penalties: [1.0, 1.5],
            penalty_requires_correct: false,
            progressive: true,
        }
    }
}

impl PolicyConfig {
    pub fn with_threshold(mut self, theta: f64) -> Self {
        self.thresholds = [theta, theta];
        self
    }

    pub fn validate(&self) -> Result<()> {
        for &t in &self.thresholds {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
            }
        }
        for &d in &self.penalties {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::Config(format!(
                    "penalty weight {d} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Threshold at stage `k` (1-based); the last stage has none.
    pub fn threshold(&self, k: usize) -> Option<f64> {
        (1..NUM_STAGES).contains(&k).then(|| self.thresholds[k - 1])
    }

    pub fn penalty(&self, k: usize) -> Option<f64> {
        (1..NUM_STAGES).contains(&k).then(|| self.penalties[k - 1])
    }
}

/// Gap between the largest and second-largest score.
pub fn confidence(probs: &[f64]) -> f64 {
    assert!(probs.len() >= 2, "confidence needs at least two classes");
    let (a, b) = top_two(probs);
    probs[a] - probs[b]
}

pub fn argmax(probs: &[f64]) -> usize {
    top_two(probs).0
}

/// Per-subject staging loss at stage `k`.
pub fn stage_loss(confidence: f64, l_con: f64, k: usize, cfg: &PolicyConfig) -> f64 {
    match (cfg.progressive, cfg.threshold(k), cfg.penalty(k)) {
        (true, Some(theta), Some(delta)) if confidence < theta => -confidence * delta,
        _ => l_con,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageDecision {
    pub stage: usize,
    pub probs: [f64; 4],
    pub confidence: f64,
    pub decided: bool,
    /// Set only on the deciding stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<SubType>,
}

impl StageDecision {
    pub fn new(stage: usize, probs: [f64; 4], cfg: &PolicyConfig) -> Self {
        let c = confidence(&probs);
        let decided = stage == NUM_STAGES || (cfg.progressive && c >= cfg.threshold(stage).expect("non-final stage"));
        Self {
            stage,
            probs,
            confidence: c,
            decided,
            predicted: decided.then(|| SubType::from_code(argmax(&probs)).expect("four classes")),
        }
    }
}

/// Walks the stage outputs, stopping at the first confident stage.
/// `stage_probs[k]` may be `None` only past the stopping stage.
pub fn decide(stage_probs: &[Option<[f64; 4]>; 3], cfg: &PolicyConfig) -> Result<Vec<StageDecision>> {
    let mut out = Vec::with_capacity(NUM_STAGES);
    for k in 1..=NUM_STAGES {
        let probs = stage_probs[k - 1]
            .ok_or_else(|| Error::Validation(format!("stage {k} output is required but its modality is missing")))?;
        let d = StageDecision::new(k, probs, cfg);
        out.push(d);
        if d.decided {
            break;
        }
    }
    Ok(out)
}

/// Runs the staged classifier on one record, computing each stage only when
/// the previous one was not confident.
pub fn run_progressive_inference<T: Scalar>(
    record: &SubjectRecord,
    model: &Model<T>,
    cfg: &PolicyConfig,
) -> Result<Vec<StageDecision>> {
    let subject = model.prepare(record)?;
    let mut out = Vec::with_capacity(NUM_STAGES);
    for k in 1..=NUM_STAGES {
        if k > subject.stages_available() {
            return Err(Error::Validation(format!(
                "subject {}: stage {k} is required but its modality is missing",
                record.id
            )));
        }
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &[&subject], k)?;
        let p = tape.value(pass.probs[k - 1].expect("stage available"));
        let probs = [0, 1, 2, 3].map(|c| p[[0, c]].as_f64());
        let d = StageDecision::new(k, probs, cfg);
        out.push(d);
        if d.decided {
            break;
        }
    }
    Ok(out)
}

/// Which terms enter the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub alignment: bool,
    pub disentangle: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stage: [Option<f64>; 3],
    pub alignment: Option<f64>,
    pub mi: Option<f64>,
    pub orthogonal: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Named terms in a fixed order, for diagnostics.
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let names = ["stage1", "stage2", "stage3"];
        let mut v: Vec<(&'static str, f64)> = names
            .iter()
            .zip(self.stage)
            .filter_map(|(n, s)| s.map(|s| (*n, s)))
            .collect();
        v.extend(self.alignment.map(|x| ("alignment", x)));
        v.extend(self.mi.map(|x| ("mi", x)));
        v.extend(self.orthogonal.map(|x| ("orthogonal", x)));
        v
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms()
            .into_iter()
            .find(|(_, x)| !x.is_finite())
            .map(|(n, _)| n)
            .or((!self.total.is_finite()).then_some("total"))
    }
}

fn stage_term<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[usize], k: usize, cfg: &PolicyConfig) -> Var {
    let n = labels.len();
    let lcon = tape.neg_log_pick(probs, labels, T::of(PROB_FLOOR));
    let gated = match (cfg.progressive, cfg.threshold(k), cfg.penalty(k)) {
        (true, Some(theta), Some(delta)) => Some((theta, delta)),
        _ => None,
    };
    let Some((theta, delta)) = gated else {
        return tape.sum(lcon);
    };
    let conf = tape.top_gap(probs);
    let p = tape.value(probs).clone();
    let mut use_con = Array2::zeros((n, 1));
    let mut use_pen = Array2::zeros((n, 1));
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = p.row(i).iter().map(|x| x.as_f64()).collect();
        let c = confidence(&row);
        let wrong = cfg.penalty_requires_correct && argmax(&row) != y;
        if c >= theta || wrong {
            use_con[[i, 0]] = T::one();
        } else {
            use_pen[[i, 0]] = T::of(-delta);
        }
    }
    let use_con = tape.constant(use_con);
    let use_pen = tape.constant(use_pen);
    let a = tape.mul(lcon, use_con);
    let b = tape.mul(conf, use_pen);
    let both = tape.add(a, b);
    tape.sum(both)
}

/// Batch objective: the staged terms over every available stage, then the
/// alignment and disentanglement regularisers. Terms are summed over
/// subjects; the MI penalty is added once per text component.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pass: &ForwardPass,
    cfg: &PolicyConfig,
    terms: LossTerms,
) -> (Var, LossBreakdown) {
    let mut breakdown = LossBreakdown::default();
    let mut parts = Vec::new();
    for k in 1..=NUM_STAGES {
        if let Some(p) = pass.probs[k - 1] {
            let labels: Vec<usize> = pass.rows[k - 1].iter().map(|&r| pass.labels[r]).collect();
            let t = stage_term(tape, p, &labels, k, cfg);
            breakdown.stage[k - 1] = Some(tape.scalar(t).as_f64());
            parts.push(t);
        }
    }

    if terms.alignment {
        let mut align = Vec::new();
        if let (Some(f1), Some(f2)) = (pass.features[0], pass.features[1]) {
            let e = tape.select_rows(f1, &pass.rows[1]);
            let m = mse_rows(tape, e, f2);
            align.push(tape.sum(m));
        }
        if let (Some(f2), Some(f3)) = (pass.features[1], pass.features[2]) {
            let pos: Vec<usize> = pass.rows[2]
                .iter()
                .map(|r| pass.rows[1].binary_search(r).expect("nested availability"))
                .collect();
            let e = tape.select_rows(f2, &pos);
            let m = mse_rows(tape, e, f3);
            align.push(tape.sum(m));
        }
        if let Some(t) = sum_vars(tape, &align) {
            breakdown.alignment = Some(tape.scalar(t).as_f64());
            parts.push(t);
        }
    }

    if terms.disentangle {
        if let (Some(c), Some(s)) = (pass.commons, pass.specifics) {
            let mut mi = Vec::new();
            for comp in 0..3 {
                let rows: Vec<usize> = (0..pass.n).filter(|&i| pass.presence[comp][i]).collect();
                if rows.len() >= 2 {
                    let cr = tape.select_rows(c[comp], &rows);
                    let sr = tape.select_rows(s[comp], &rows);
                    mi.push(mi_penalty_node(tape, cr, sr));
                }
            }
            if let Some(t) = sum_vars(tape, &mi) {
                breakdown.mi = Some(tape.scalar(t).as_f64());
                parts.push(t);
            }
            let orth = orthogonal_loss_rows(tape, c, s, pass.masks);
            let orth = tape.sum(orth);
            breakdown.orthogonal = Some(tape.scalar(orth).as_f64());
            parts.push(orth);
        }
    }

    let total = sum_vars(tape, &parts).expect("stage 1 is always present");
    breakdown.total = tape.scalar(total).as_f64();
    (total, breakdown)
}

fn sum_vars<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Option<Var> {
    let (&first, rest) = vars.split_first()?;
    Some(rest.iter().fold(first, |acc, &v| tape.add(acc, v)))
}

/// Convenience: forward plus loss over a batch of prepared subjects.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    batch: &[&PreparedSubject<T>],
    cfg: &PolicyConfig,
) -> Result<(Var, LossBreakdown)> {
    let pass = model.forward(tape, batch, NUM_STAGES)?;
    let terms = LossTerms {
        alignment: !model.ablations.no_alignment,
        disentangle: !model.ablations.no_disentangle,
    };
    Ok(total_loss(tape, &pass, cfg, terms))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_is_top_gap() {
        assert!((confidence(&[0.1, 0.6, 0.2, 0.1]) - 0.4).abs() < 1e-12);
        assert_eq!(confidence(&[0.25; 4]), 0.0);
    }

    #[test]
    fn stage_loss_gates_on_threshold() {
        let cfg = PolicyConfig::default();
        assert_eq!(stage_loss(0.5, 2.0, 1, &cfg), 2.0);
        assert!((stage_loss(0.2, 2.0, 1, &cfg) + 0.2).abs() < 1e-12);
        assert!((stage_loss(0.2, 2.0, 2, &cfg) + 0.3).abs() < 1e-12);
        assert_eq!(stage_loss(0.0, 2.0, 3, &cfg), 2.0);
        let forced = PolicyConfig {
            progressive: false,
            ..cfg
        };
        assert_eq!(stage_loss(0.2, 2.0, 1, &forced), 2.0);
    }

    #[test]
    fn decide_exits_early() {
        let cfg = PolicyConfig::default();
        let confident = Some([0.9, 0.05, 0.03, 0.02]);
        let unsure = Some([0.3, 0.25, 0.25, 0.2]);
        let d = decide(&[confident, None, None], &cfg).unwrap();
        assert_eq!(d.len(), 1);
        assert!(d[0].decided);
        let d = decide(&[unsure, unsure, unsure], &cfg).unwrap();
        assert_eq!(d.len(), 3);
        assert!(decide(&[unsure, None, None], &cfg).is_err());
        let forced = PolicyConfig {
            progressive: false,
            ..cfg
        };
        assert_eq!(decide(&[confident, confident, confident], &forced).unwrap().len(), 3);
    }

    #[test]
    fn bad_policy_rejected() {
        assert!(PolicyConfig::default().with_threshold(1.5).validate().is_err());
        let p = PolicyConfig {
            penalties: [-1.0, 1.0],
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
