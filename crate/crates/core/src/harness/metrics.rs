use serde::{Deserialize, Serialize};

use crate::data::SubType;
use crate::error::{Error, Result};

/// One-vs-rest figures for a single sub-type, as percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub subtype: SubType,
    pub support: usize,
    pub sens: f64,
    pub spe: f64,
    pub auc: Option<f64>,
}

/// Macro one-vs-rest metrics, as percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub acc: f64,
    pub spe: f64,
    pub sens: f64,
    pub auc: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Area under the ROC curve of `scores` for the positives, via the
/// midrank Mann-Whitney statistic; `None` without both positives and
/// negatives.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn macro_metrics(labels: &[SubType], predictions: &[SubType], scores: &[[f64; 4]]) -> Result<MacroMetrics> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Input("no subjects to score".into()));
    }
    if predictions.len() != n || scores.len() != n {
        return Err(Error::shape(
            "predictions/scores",
            n,
            format!("{}/{}", predictions.len(), scores.len()),
        ));
    }
    let correct = labels.iter().zip(predictions).filter(|(a, b)| a == b).count();
    let mut per_class = Vec::new();
    for s in SubType::ALL {
        let positive: Vec<bool> = labels.iter().map(|&l| l == s).collect();
        let support = positive.iter().filter(|&&p| p).count();
        if support == 0 {
            log::warn!("sub-type {s} absent from labels; skipped in macro averages");
            continue;
        }
        let mut tp = 0;
        let mut tn = 0;
        for (&p, &pred) in positive.iter().zip(predictions) {
            match (p, pred == s) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                _ => {}
            }
        }
        let negatives = n - support;
        let class_scores: Vec<f64> = scores.iter().map(|r| r[s.code()]).collect();
        per_class.push(ClassMetrics {
            subtype: s,
            support,
            sens: 100.0 * tp as f64 / support as f64,
            spe: if negatives > 0 {
                100.0 * tn as f64 / negatives as f64
            } else {
                100.0
            },
            auc: binary_auc(&class_scores, &positive).map(|a| 100.0 * a),
        });
    }
    let mean = |f: &dyn Fn(&ClassMetrics) -> Option<f64>| {
        let v: Vec<f64> = per_class.iter().filter_map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MacroMetrics {
        acc: 100.0 * correct as f64 / n as f64,
        spe: mean(&|c| Some(c.spe)),
        sens: mean(&|c| Some(c.sens)),
        auc: mean(&|c| c.auc),
        per_class,
    })
}

/// AUC per unit of mean acquisition stage.
pub fn auc_cost_ratio(auc: f64, cost: f64) -> Result<f64> {
    if !(cost > 0.0 && cost.is_finite()) {
        return Err(Error::Input(format!("cost must be positive, got {cost}")));
    }
    Ok(auc / cost)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_handles_ties_and_perfection() {
        assert_eq!(
            binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]),
            Some(1.0)
        );
        assert_eq!(binary_auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(binary_auc(&[0.9, 0.1], &[false, true]), Some(0.0));
        assert_eq!(binary_auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn identity_predictions_are_perfect() {
        let labels = SubType::ALL.to_vec();
        let mut scores = [[0.0; 4]; 4];
        for (i, row) in scores.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let m = macro_metrics(&labels, &labels, &scores).unwrap();
        assert_eq!((m.acc, m.sens, m.spe, m.auc), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn absent_class_skipped() {
        let labels = [SubType::TypicalAd, SubType::AtypicalAd];
        let scores = [[0.7, 0.1, 0.1, 0.1], [0.1, 0.7, 0.1, 0.1]];
        let m = macro_metrics(&labels, &labels, &scores).unwrap();
        assert_eq!(m.per_class.len(), 2);
        assert_eq!(m.auc, 100.0);
    }

    #[test]
    fn ratio_rejects_zero_cost() {
        assert!(auc_cost_ratio(70.0, 0.0).is_err());
        assert!((auc_cost_ratio(77.4, 2.21).unwrap() - 35.0226).abs() < 1e-3);
    }
}
