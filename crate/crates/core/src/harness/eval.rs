use serde::{Deserialize, Serialize};

use crate::data::{SubType, SubjectRecord};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::AucScores;
use crate::harness::metrics::{auc_cost_ratio, macro_metrics, ClassMetrics};
use crate::model::{Model, PreparedSubject};
use crate::progressive::{decide, PolicyConfig, StageDecision};
use crate::scalar::Scalar;

/// Every stage's probabilities for one full-modality subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSubject {
    pub id: String,
    pub label: SubType,
    pub stage_probs: [[f64; 4]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub spe: f64,
    pub sens: f64,
    pub auc: f64,
    pub cost: f64,
    pub ratio: f64,
    pub n_test: usize,
    pub thresholds: [f64; 2],
    pub progressive: bool,
    /// Subjects deciding at stage 1, 2 and 3.
    pub stage_counts: [usize; 3],
    pub per_class: Vec<ClassMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub label: SubType,
    pub decisions: Vec<StageDecision>,
}

/// Scores every stage for subjects that must all have full modalities.
pub fn score_prepared<T: Scalar>(model: &Model<T>, subjects: &[&PreparedSubject<T>]) -> Result<Vec<ScoredSubject>> {
    if let Some(s) = subjects.iter().find(|s| s.stages_available() < 3) {
        return Err(Error::Validation(format!("test subject {} lacks a modality", s.id)));
    }
    let probs = model.stage_probabilities(subjects)?;
    Ok(subjects
        .iter()
        .zip(probs)
        .map(|(s, p)| ScoredSubject {
            id: s.id.clone(),
            label: s.label,
            stage_probs: p.map(|x| x.expect("full modality")),
        })
        .collect())
}

pub fn score_records<T: Scalar>(model: &Model<T>, records: &[&SubjectRecord]) -> Result<Vec<ScoredSubject>> {
    if let Some(r) = records.iter().find(|r| !r.has_all_modalities()) {
        return Err(Error::Validation(format!("test subject {} lacks a modality", r.id)));
    }
    let prepared: Vec<PreparedSubject<T>> = records.iter().map(|r| model.prepare(r)).collect::<Result<_>>()?;
    let refs: Vec<&PreparedSubject<T>> = prepared.iter().collect();
    score_prepared(model, &refs)
}

pub fn trajectories(scored: &[ScoredSubject], policy: &PolicyConfig) -> Vec<Trajectory> {
    scored
        .iter()
        .map(|s| Trajectory {
            id: s.id.clone(),
            label: s.label,
            decisions: decide(&s.stage_probs.map(Some), policy).expect("all stages scored"),
        })
        .collect()
}

/// Applies the policy to cached stage scores.
pub fn report_from_scores(
    scored: &[ScoredSubject],
    policy: &PolicyConfig,
    auc_scores: AucScores,
) -> Result<EvalReport> {
    policy.validate()?;
    if scored.is_empty() {
        return Err(Error::Input("no test subjects".into()));
    }
    let mut labels = Vec::with_capacity(scored.len());
    let mut predictions = Vec::with_capacity(scored.len());
    let mut scores = Vec::with_capacity(scored.len());
    let mut stage_counts = [0usize; 3];
    for t in trajectories(scored, policy) {
        let last = t.decisions.last().expect("non-empty trajectory");
        stage_counts[last.stage - 1] += 1;
        labels.push(t.label);
        predictions.push(last.predicted.expect("last stage decides"));
        scores.push(match auc_scores {
            AucScores::DecisionStage => last.probs,
            AucScores::FinalStage => scored[labels.len() - 1].stage_probs[2],
        });
    }
    let m = macro_metrics(&labels, &predictions, &scores)?;
    let n = scored.len();
    let cost = stage_counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (k + 1) as f64 * c as f64)
        .sum::<f64>()
        / n as f64;
    Ok(EvalReport {
        acc: m.acc,
        spe: m.spe,
        sens: m.sens,
        auc: m.auc,
        cost,
        ratio: auc_cost_ratio(m.auc, cost)?,
        n_test: n,
        thresholds: policy.thresholds,
        progressive: policy.progressive,
        stage_counts,
        per_class: m.per_class,
    })
}

/// Macro AUC of the stage-`k` probabilities alone.
pub fn stage_auc(scored: &[ScoredSubject], k: usize) -> Result<f64> {
    if !(1..=3).contains(&k) {
        return Err(Error::Input(format!("stage {k} out of range")));
    }
    let labels: Vec<SubType> = scored.iter().map(|s| s.label).collect();
    let scores: Vec<[f64; 4]> = scored.iter().map(|s| s.stage_probs[k - 1]).collect();
    Ok(macro_metrics(&labels, &labels, &scores)?.auc)
}

/// Macro AUC of stage-`k` probabilities over every record that reaches
/// stage `k` (stage 1 needs only tabular data).
pub fn stage_auc_records<T: Scalar>(model: &Model<T>, records: &[&SubjectRecord], k: usize) -> Result<f64> {
    if !(1..=3).contains(&k) {
        return Err(Error::Input(format!("stage {k} out of range")));
    }
    let prepared: Vec<PreparedSubject<T>> = records
        .iter()
        .filter(|r| r.stages_available() >= k)
        .map(|r| model.prepare(r))
        .collect::<Result<_>>()?;
    let refs: Vec<&PreparedSubject<T>> = prepared.iter().collect();
    let probs = model.stage_probabilities(&refs)?;
    let labels: Vec<SubType> = prepared.iter().map(|s| s.label).collect();
    let scores: Vec<[f64; 4]> = probs.iter().map(|p| p[k - 1].expect("stage reached")).collect();
    Ok(macro_metrics(&labels, &labels, &scores)?.auc)
}

fn policy_at(checkpoint_policy: &PolicyConfig, theta: f64) -> PolicyConfig {
    checkpoint_policy.clone().with_threshold(theta)
}

/// Full-modality evaluation at threshold `theta`.
pub fn evaluate<T: Scalar>(checkpoint: &Checkpoint<T>, test: &[&SubjectRecord], theta: f64) -> Result<EvalReport> {
    let cfg = &checkpoint.meta.config;
    let scored = score_records(&checkpoint.model, test)?;
    report_from_scores(&scored, &policy_at(&cfg.effective_policy(), theta), cfg.auc_scores)
}

/// One report per threshold, scoring the model only once.
pub fn sweep_threshold<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    test: &[&SubjectRecord],
    thetas: &[f64],
) -> Result<Vec<EvalReport>> {
    let cfg = &checkpoint.meta.config;
    let scored = score_records(&checkpoint.model, test)?;
    sweep_scored(&scored, &cfg.effective_policy(), thetas, cfg.auc_scores)
}

pub fn sweep_scored(
    scored: &[ScoredSubject],
    policy: &PolicyConfig,
    thetas: &[f64],
    auc_scores: AucScores,
) -> Result<Vec<EvalReport>> {
    thetas
        .iter()
        .map(|&t| report_from_scores(scored, &policy_at(policy, t), auc_scores))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(label: SubType, probs: [[f64; 4]; 3]) -> ScoredSubject {
        ScoredSubject {
            id: label.as_str().into(),
            label,
            stage_probs: probs,
        }
    }

    fn one_hot(i: usize) -> [f64; 4] {
        let mut p = [0.0; 4];
        p[i] = 1.0;
        p
    }

    #[test]
    fn perfect_stage1_is_cost_one() {
        let s: Vec<_> = SubType::ALL
            .iter()
            .map(|&t| scored(t, [one_hot(t.code()); 3]))
            .collect();
        let r = report_from_scores(&s, &PolicyConfig::default(), AucScores::DecisionStage).unwrap();
        assert_eq!((r.acc, r.cost, r.auc), (100.0, 1.0, 100.0));
        assert_eq!(r.stage_counts, [4, 0, 0]);
    }

    #[test]
    fn forced_policy_costs_three() {
        let s: Vec<_> = SubType::ALL
            .iter()
            .map(|&t| scored(t, [one_hot(t.code()); 3]))
            .collect();
        let p = PolicyConfig {
            progressive: false,
            ..Default::default()
        };
        let r = report_from_scores(&s, &p, AucScores::DecisionStage).unwrap();
        assert_eq!(r.cost, 3.0);
        assert!((r.ratio - r.auc / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_cost_is_monotone() {
        let u = [0.4, 0.3, 0.2, 0.1];
        let s: Vec<_> = SubType::ALL
            .iter()
            .map(|&t| scored(t, [u, [0.6, 0.2, 0.1, 0.1], one_hot(t.code())]))
            .collect();
        let reports = sweep_scored(
            &s,
            &PolicyConfig::default(),
            &[0.0, 0.05, 0.3, 0.5, 1.0],
            AucScores::DecisionStage,
        )
        .unwrap();
        let costs: Vec<f64> = reports.iter().map(|r| r.cost).collect();
        assert_eq!(costs, vec![1.0, 1.0, 2.0, 3.0, 3.0]);
    }
}
