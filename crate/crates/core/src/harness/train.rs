use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{validate_cohort, DatasetSplit, Role, SubjectRecord};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{Checkpoint, CheckpointMeta, RngState, FORMAT_VERSION};
use crate::harness::config::TrainConfig;
use crate::harness::eval::{evaluate, report_from_scores, score_prepared, stage_auc, stage_auc_records, EvalReport};
use crate::model::{Ablations, Model, PreparedSubject};
use crate::progressive::{batch_loss, LossBreakdown};
use crate::scalar::Scalar;

const SHUFFLE_STREAM: u64 = 0x5eed_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    /// Epoch total loss divided by the number of training subjects.
    pub mean_loss: f64,
    /// Per-term sums over the epoch.
    pub terms: LossBreakdown,
    pub validation: Option<EvalReport>,
    pub validation_stage1_auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// The selected (best-validation or final) parameters.
    pub checkpoint: Checkpoint<T>,
    /// Parameters after the last epoch.
    pub last: Checkpoint<T>,
    pub history: Vec<EpochReport>,
}

/// Test-fold subjects with every modality.
pub fn test_subjects<'a>(cohort: &'a [SubjectRecord], split: &DatasetSplit) -> Vec<&'a SubjectRecord> {
    split
        .select(cohort, Role::Test)
        .into_iter()
        .filter(|r| r.has_all_modalities())
        .collect()
}

/// Batches that each draw from every availability tier in proportion.
fn stratified_batches<R: rand::Rng>(tiers: &mut [Vec<usize>; 3], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let n: usize = tiers.iter().map(Vec::len).sum();
    let nb = n.div_ceil(batch_size).max(1);
    let mut batches = vec![Vec::with_capacity(batch_size); nb];
    let mut slot = 0;
    for tier in tiers.iter_mut().rev() {
        tier.shuffle(rng);
        for &i in tier.iter() {
            batches[slot % nb].push(i);
            slot += 1;
        }
    }
    batches.shuffle(rng);
    batches
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    let add = |a: &mut Option<f64>, b: Option<f64>| {
        if let Some(b) = b {
            *a = Some(a.unwrap_or(0.0) + b);
        }
    };
    for k in 0..3 {
        add(&mut acc.stage[k], b.stage[k]);
    }
    add(&mut acc.alignment, b.alignment);
    add(&mut acc.mi, b.mi);
    add(&mut acc.orthogonal, b.orthogonal);
    acc.total += b.total;
}

/// Minimises the staged objective with plain SGD over the training folds.
pub fn train<T: Scalar>(cohort: &[SubjectRecord], split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if let Some(shape) = validate_cohort(cohort)? {
        if shape != cfg.model.volume_shape {
            return Err(Error::shape(
                "cohort volume shape",
                format!("{:?}", cfg.model.volume_shape),
                format!("{shape:?}"),
            ));
        }
    }
    let mut model: Model<T> = Model::new(cfg.model.clone(), cfg.ablations, cfg.seed)?;
    let policy = cfg.effective_policy();

    let train_set: Vec<PreparedSubject<T>> = split
        .select(cohort, Role::Train)
        .into_iter()
        .map(|r| model.prepare(r))
        .collect::<Result<_>>()?;
    if train_set.is_empty() {
        return Err(Error::Input("no training subjects".into()));
    }
    let val_set: Vec<PreparedSubject<T>> = split
        .select(cohort, Role::Validation)
        .into_iter()
        .filter(|r| r.has_all_modalities())
        .map(|r| model.prepare(r))
        .collect::<Result<_>>()?;
    let val_refs: Vec<&PreparedSubject<T>> = val_set.iter().collect();

    let mut tiers: [Vec<usize>; 3] = Default::default();
    for (i, s) in train_set.iter().enumerate() {
        tiers[s.stages_available() - 1].push(i);
    }
    log::info!(
        "training on {} subjects (tiers {}/{}/{}), validating on {}",
        train_set.len(),
        tiers[0].len(),
        tiers[1].len(),
        tiers[2].len(),
        val_set.len()
    );

    let rng_seed = cfg.seed ^ SHUFFLE_STREAM;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let lr = T::of(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let batches = stratified_batches(&mut tiers, cfg.batch_size, &mut rng);
        let mut terms = LossBreakdown::default();
        for (step, batch) in batches.iter().enumerate() {
            let subjects: Vec<&PreparedSubject<T>> = batch.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let (loss, breakdown) = batch_loss(&mut tape, &model, &subjects, &policy)?;
            if let Some(term) = breakdown.first_non_finite() {
                return Err(Error::NonFinite {
                    term: term.to_owned(),
                    epoch,
                    step: step + 1,
                });
            }
            let grads = tape.backward(loss);
            model.params.sgd_step(&grads, lr);
            accumulate(&mut terms, &breakdown);
        }

        let (validation, validation_stage1_auc) = if val_refs.is_empty() {
            (None, None)
        } else {
            let scored = score_prepared(&model, &val_refs)?;
            (
                Some(report_from_scores(&scored, &policy, cfg.auc_scores)?),
                Some(stage_auc(&scored, 1)?),
            )
        };
        log::debug!("epoch {epoch} terms {:?}", terms.terms());
        let report = EpochReport {
            epoch,
            steps: batches.len(),
            mean_loss: terms.total / train_set.len() as f64,
            terms,
            validation,
            validation_stage1_auc,
            seconds: started.elapsed().as_secs_f64(),
        };
        match &report.validation {
            Some(v) => log::info!(
                "epoch {epoch}: loss {:.4}, val auc {:.2}, cost {:.2} ({:.1}s)",
                report.mean_loss,
                v.auc,
                v.cost,
                report.seconds
            ),
            None => log::info!("epoch {epoch}: loss {:.4} ({:.1}s)", report.mean_loss, report.seconds),
        }
        if cfg.select_best {
            if let Some(v) = &report.validation {
                if v.auc.is_finite() && best.as_ref().is_none_or(|(_, a, _)| v.auc > *a) {
                    best = Some((epoch, v.auc, model.clone()));
                }
            }
        }
        history.push(report);
    }

    let rng_state = RngState {
        seed: rng_seed,
        word_pos: rng.get_word_pos().to_string(),
    };
    let meta = |epoch: usize, best: &Option<(usize, f64, Model<T>)>| CheckpointMeta {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_owned(),
        config: cfg.clone(),
        epoch,
        epochs_run: cfg.epochs,
        best_epoch: best.as_ref().map(|b| b.0),
        best_val_auc: best.as_ref().map(|b| b.1),
        rng: rng_state.clone(),
    };
    let last = Checkpoint {
        meta: meta(cfg.epochs, &best),
        model: model.clone(),
    };
    let checkpoint = match &best {
        Some((epoch, _, m)) => Checkpoint {
            meta: meta(*epoch, &best),
            model: m.clone(),
        },
        None => last.clone(),
    };
    Ok(TrainOutcome {
        checkpoint,
        last,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub ablations: Ablations,
    pub report: EvalReport,
    /// Macro AUC of stage-1 scores over the whole test fold.
    pub stage1_auc: f64,
}

/// Trains with `ablations` applied and evaluates on the full-modality test
/// fold at the configured first-stage threshold.
pub fn ablate<T: Scalar>(
    cohort: &[SubjectRecord],
    split: &DatasetSplit,
    cfg: &TrainConfig,
    ablations: Ablations,
) -> Result<AblationResult> {
    let cfg = TrainConfig {
        ablations,
        ..cfg.clone()
    };
    let outcome = train::<T>(cohort, split, &cfg)?;
    let test = test_subjects(cohort, split);
    let report = evaluate(&outcome.checkpoint, &test, cfg.policy.thresholds[0])?;
    let fold = split.select(cohort, Role::Test);
    Ok(AblationResult {
        label: ablations.label(),
        ablations,
        report,
        stage1_auc: stage_auc_records(&outcome.checkpoint.model, &fold, 1)?,
    })
}
