//! Progressive curriculum training of the student: per stage, select the
//! top-confidence pseudo-labeled samples, train on the labeled + selected
//! mix with the dual learn/unlearn objective, evaluate, then refine
//! pseudo-label confidences from teacher-student agreement.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ForwardMode, ParamStore};
use crate::checkpoint::{params_digest, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{evaluate_set, EvalReport};
use crate::losses::{
    ce_loss, ce_loss_dz, dice_loss, dice_loss_dp, high_conf_dz, high_conf_loss, low_conf_dz,
    low_conf_loss, softmax_vjp, LossConfig, TauMode,
};
use crate::optim::Adam;
use crate::pseudolabel::{
    generate_pseudolabels, refine_by_agreement, select_stage, PseudoLabeledSample,
};
use crate::rng::{derive_seed, derive_seed_str};
use crate::teacher::{EpochRecord, TrainHistory};
use crate::volume::{softmax_over_classes, LabeledSet, UnlabeledSet};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

const STREAM_INIT: u64 = 0x11;
const STREAM_SHUFFLE: u64 = 0x1200_0000;
const STREAM_DROP: u64 = 0x1300_0000;
const STREAM_PSEUDO: u64 = 0x1400_0000;

/// One curriculum stage: the unlabeled fraction admitted and the epoch
/// budget spent on it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub fraction: f64,
    pub epochs: usize,
}

/// Ordered stage fractions with per-stage epoch budgets. Fractions must be
/// strictly increasing and end at 1.0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub stages: Vec<StageSpec>,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            stages: [0.10, 0.20, 0.40, 0.60, 0.80, 1.00]
                .iter()
                .map(|&fraction| StageSpec {
                    fraction,
                    epochs: 10,
                })
                .collect(),
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("schedule has no stages".into()));
        }
        let mut prev = 0.0f64;
        for s in &self.stages {
            if !(s.fraction > prev && s.fraction <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "stage fractions must be strictly increasing in (0, 1], got {} after {}",
                    s.fraction, prev
                )));
            }
            if s.epochs == 0 {
                return Err(Error::InvalidConfig("stage epochs must be >= 1".into()));
            }
            prev = s.fraction;
        }
        if (prev - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "final stage fraction must be 1.0, got {prev}"
            )));
        }
        Ok(())
    }
}

/// Student optimization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudentTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Stochastic passes used when generating pseudo-labels.
    pub k_passes: usize,
    /// Agreement-refinement damping factor in (0, 1].
    pub alpha: f32,
}

impl Default for StudentTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 42,
            k_passes: 8,
            alpha: 0.5,
        }
    }
}

impl StudentTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.k_passes == 0 {
            return Err(Error::InvalidConfig("k_passes must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Stage summary matching the progressive-training table: best validation
/// loss and dice within the stage, the dice gain over the previous stage's
/// best (the untrained baseline for stage 1), and the mixed-set size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub fraction: f64,
    pub best_val_loss: f32,
    pub best_val_dice: f32,
    pub dice_gain: f32,
    pub samples_used: usize,
}

/// Everything a curriculum run produces.
pub struct CurriculumOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<StageReport>,
    pub history: TrainHistory,
    /// Dice of the untrained student on the evaluation set (stage-1 gain base).
    pub baseline_dice: f32,
    /// Parameter digests at stage entry, for warm-start verification.
    pub stage_start_digests: Vec<String>,
    /// Parameter digests at stage exit.
    pub stage_end_digests: Vec<String>,
}

/// Runs the full curriculum, generating pseudo-labels from the teacher
/// first. The student shares the teacher's architecture but starts from a
/// fresh random initialization.
pub fn run_curriculum(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    val: &LabeledSet,
    teacher: &Checkpoint,
    schedule: &CurriculumSchedule,
    loss_cfg: &LossConfig,
    cfg: &StudentTrainConfig,
) -> Result<CurriculumOutcome> {
    let pseudo = generate_pseudolabels(
        unlabeled,
        teacher,
        cfg.k_passes,
        derive_seed(cfg.seed, STREAM_PSEUDO),
    )?;
    run_curriculum_with_pseudolabels(labeled, unlabeled, val, teacher, pseudo, schedule, loss_cfg, cfg)
}

/// Curriculum run over an existing pseudo-label pool (cache path, and the
/// corruption studies in the test suites).
#[allow(clippy::too_many_arguments)]
pub fn run_curriculum_with_pseudolabels(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    val: &LabeledSet,
    teacher: &Checkpoint,
    mut pseudo: Vec<PseudoLabeledSample>,
    schedule: &CurriculumSchedule,
    loss_cfg: &LossConfig,
    cfg: &StudentTrainConfig,
) -> Result<CurriculumOutcome> {
    if labeled.is_empty() {
        return Err(Error::Empty {
            context: "student labeled set",
        });
    }
    schedule.validate()?;
    loss_cfg.validate()?;
    cfg.validate()?;

    let config = teacher.config.clone();
    let net = Backbone::new(config.clone())?;
    let mut params: ParamStore<f32> = net.init_params(derive_seed(cfg.seed, STREAM_INIT));
    let mut adam = Adam::new(net.param_count(), cfg.learning_rate as f64);
    let onehots: Vec<_> = labeled.samples.iter().map(|s| s.mask.onehot()).collect();
    let eval_set = if val.is_empty() { labeled } else { val };

    let baseline_dice = evaluate_set(&net, &params, eval_set, loss_cfg, false)?.dice;
    let mut history = TrainHistory::default();
    let mut reports = Vec::new();
    let mut stage_start_digests = Vec::new();
    let mut stage_end_digests = Vec::new();
    let mut last_good = params.clone();
    let mut best_overall: Option<(f32, ParamStore<f32>)> = None;
    let mut prev_best = baseline_dice;
    let mut global_epoch = 0usize;
    let mut diverged = false;

    #[derive(Clone, Copy)]
    enum Item {
        Labeled(usize),
        Pseudo(usize),
    }

    'stages: for (ti, stage) in schedule.stages.iter().enumerate() {
        let t = ti + 1;
        stage_start_digests.push(params_digest(&params));
        let selection = select_stage(&pseudo, t, stage.fraction)?;
        let index_of: std::collections::HashMap<&str, usize> = pseudo
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let sel_idx: Vec<usize> = selection.ids.iter().map(|id| index_of[id.as_str()]).collect();

        let tau = match loss_cfg.tau_mode {
            TauMode::Fixed => loss_cfg.tau_p,
            TauMode::Percentile => {
                let mut pool = Vec::new();
                for &i in &sel_idx {
                    pool.extend(pseudo[i].conf.iter().copied());
                }
                loss_cfg.resolve_tau(&pool)
            }
        };

        let mut stage_best_loss = f32::INFINITY;
        let mut stage_best_dice = f32::NEG_INFINITY;

        for _ in 0..stage.epochs {
            let mut items: Vec<Item> = (0..labeled.len()).map(Item::Labeled).collect();
            items.extend(sel_idx.iter().map(|&i| Item::Pseudo(i)));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                STREAM_SHUFFLE + global_epoch as u64,
            ));
            items.shuffle(&mut rng);

            let mut grads = ParamStore::<f32>::zeros(net.layout());
            let mut batch_losses = Vec::new();
            for batch in items.chunks(cfg.batch_size) {
                grads.fill(0.0);
                let inv_b = 1.0 / batch.len() as f32;
                let mut loss_acc = 0f32;
                for item in batch {
                    let (volume, id) = match item {
                        Item::Labeled(i) => (&labeled.samples[*i].volume, &labeled.samples[*i].id),
                        Item::Pseudo(i) => {
                            let ps = &pseudo[*i];
                            let uv = unlabeled
                                .samples
                                .iter()
                                .find(|u| u.id == ps.id)
                                .ok_or_else(|| {
                                    Error::InvalidConfig(format!(
                                        "pseudo-label '{}' has no unlabeled input",
                                        ps.id
                                    ))
                                })?;
                            (&uv.volume, &ps.id)
                        }
                    };
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed_str(
                        cfg.seed,
                        id,
                        STREAM_DROP + global_epoch as u64,
                    ));
                    let (raw, trace) = net.forward(
                        &params,
                        volume.data(),
                        ForwardMode::Stochastic { rng: &mut drop_rng },
                    )?;
                    let probs = softmax_over_classes(&raw.logits)?;
                    let mut dz = match item {
                        Item::Labeled(i) => {
                            let y = &onehots[*i];
                            let dice = dice_loss(&probs, y, loss_cfg.epsilon)?;
                            let ce = ce_loss(&probs, y)?;
                            loss_acc += dice + loss_cfg.lambda_ce * ce;
                            let mut dz =
                                softmax_vjp(&probs, &dice_loss_dp(&probs, y, loss_cfg.epsilon));
                            dz.scaled_add(loss_cfg.lambda_ce, &ce_loss_dz(&probs, y));
                            dz
                        }
                        Item::Pseudo(i) => {
                            let ps = &pseudo[*i];
                            let hard = ps.hard.classes();
                            let high = high_conf_loss(&probs, hard, &ps.conf, tau)?;
                            let low = low_conf_loss(&probs, hard, &ps.conf, tau, loss_cfg.kappa)?;
                            loss_acc += loss_cfg.lambda1 * high - loss_cfg.lambda2 * low;
                            let mut dz = high_conf_dz(&probs, hard, &ps.conf, tau);
                            dz.mapv_inplace(|v| v * loss_cfg.lambda1);
                            dz.scaled_add(
                                -loss_cfg.lambda2,
                                &low_conf_dz(&probs, hard, &ps.conf, tau, loss_cfg.kappa),
                            );
                            dz
                        }
                    };
                    dz.mapv_inplace(|v| v * inv_b);
                    let du = Array2::zeros(raw.logvar.dim());
                    net.backward_into(&params, &trace, &dz, &du, &mut grads);
                }
                let two_reg = 2.0 * loss_cfg.lambda_reg;
                for (g, &p) in grads.data_mut().iter_mut().zip(params.data().iter()) {
                    *g += two_reg * p;
                }
                let batch_loss =
                    loss_acc / batch.len() as f32 + loss_cfg.lambda_reg * params.sq_norm();
                if !batch_loss.is_finite() {
                    history.diverged_at = Some(global_epoch);
                    diverged = true;
                    break 'stages;
                }
                batch_losses.push(batch_loss);
                adam.step(&mut params, &grads);
                if params.all_finite() {
                    last_good = params.clone();
                }
            }

            let train_eval = evaluate_set(&net, &params, labeled, loss_cfg, false)?;
            let val_eval = evaluate_set(&net, &params, eval_set, loss_cfg, false)?;
            history.records.push(EpochRecord {
                epoch: global_epoch,
                train_loss: batch_losses.iter().sum::<f32>() / batch_losses.len().max(1) as f32,
                val_loss: Some(val_eval.loss),
                train_dice: train_eval.dice,
                val_dice: Some(val_eval.dice),
                accuracy: val_eval.accuracy,
            });
            stage_best_loss = stage_best_loss.min(val_eval.loss);
            stage_best_dice = stage_best_dice.max(val_eval.dice);
            if best_overall
                .as_ref()
                .map(|(d, _)| val_eval.dice > *d)
                .unwrap_or(true)
            {
                best_overall = Some((val_eval.dice, params.clone()));
            }
            global_epoch += 1;
        }

        stage_end_digests.push(params_digest(&params));
        reports.push(StageReport {
            stage: t,
            fraction: stage.fraction,
            best_val_loss: stage_best_loss,
            best_val_dice: stage_best_dice,
            dice_gain: stage_best_dice - prev_best,
            samples_used: labeled.len() + sel_idx.len(),
        });
        prev_best = stage_best_dice;

        // feedback refinement between stages only
        if ti + 1 < schedule.stages.len() {
            let student_now = Checkpoint::new(config.clone(), "student", params.clone());
            refine_by_agreement(&mut pseudo, unlabeled, teacher, &student_now, cfg.alpha, t)?;
        }
    }

    let final_params = if diverged {
        last_good
    } else {
        best_overall.map(|(_, p)| p).unwrap_or(params)
    };
    Ok(CurriculumOutcome {
        checkpoint: Checkpoint::new(config, "student", final_params),
        reports,
        history,
        baseline_dice,
        stage_start_digests,
        stage_end_digests,
    })
}

/// Deterministic evaluation of a checkpoint on a non-empty validation set.
pub fn evaluate_student(
    ckpt: &Checkpoint,
    val: &LabeledSet,
    loss_cfg: &LossConfig,
) -> Result<EvalReport> {
    if val.is_empty() {
        return Err(Error::Empty {
            context: "validation set",
        });
    }
    let net = ckpt.backbone()?;
    evaluate_set(&net, &ckpt.params, val, loss_cfg, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::tests::{tiny_backbone, toy_set};
    use crate::teacher::{train_teacher, TeacherTrainConfig};
    use crate::volume::{UnlabeledSample, UnlabeledSet};

    fn toy_unlabeled(n: usize, seed: u64) -> UnlabeledSet {
        let set = toy_set(n, seed);
        UnlabeledSet::new(
            set.samples
                .into_iter()
                .enumerate()
                .map(|(i, s)| UnlabeledSample {
                    id: format!("u{i:03}"),
                    volume: s.volume,
                })
                .collect(),
        )
        .unwrap()
    }

    fn quick_teacher() -> Checkpoint {
        let set = toy_set(4, 7);
        let (ckpt, _) = train_teacher(
            &set,
            &LabeledSet::default(),
            &tiny_backbone(),
            &TeacherTrainConfig {
                epochs: 3,
                batch_size: 2,
                learning_rate: 3e-3,
                k_passes: 2,
                seed: 11,
                uncertainty_weight: 0.05,
            },
            &LossConfig::default(),
        )
        .unwrap();
        ckpt
    }

    #[test]
    fn schedule_validation() {
        CurriculumSchedule::default().validate().unwrap();
        let bad = CurriculumSchedule {
            stages: vec![
                StageSpec {
                    fraction: 0.5,
                    epochs: 1,
                },
                StageSpec {
                    fraction: 0.4,
                    epochs: 1,
                },
            ],
        };
        assert!(bad.validate().is_err());
        let not_full = CurriculumSchedule {
            stages: vec![StageSpec {
                fraction: 0.5,
                epochs: 1,
            }],
        };
        assert!(not_full.validate().is_err());
    }

    #[test]
    fn curriculum_runs_with_warm_start_and_growing_sample_counts() {
        let labeled = toy_set(3, 3);
        let unlabeled = toy_unlabeled(6, 21);
        let val = toy_set(2, 31);
        let teacher = quick_teacher();
        let schedule = CurriculumSchedule {
            stages: vec![
                StageSpec {
                    fraction: 0.5,
                    epochs: 1,
                },
                StageSpec {
                    fraction: 1.0,
                    epochs: 1,
                },
            ],
        };
        let cfg = StudentTrainConfig {
            batch_size: 3,
            learning_rate: 1e-3,
            seed: 5,
            k_passes: 2,
            alpha: 0.5,
        };
        let out = run_curriculum(
            &labeled,
            &unlabeled,
            &val,
            &teacher,
            &schedule,
            &LossConfig::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(out.reports.len(), 2);
        assert_eq!(out.reports[0].samples_used, 3 + 3);
        assert_eq!(out.reports[1].samples_used, 3 + 6);
        assert!(out.reports[0].samples_used < out.reports[1].samples_used);
        // warm start: stage 2 starts exactly where stage 1 ended
        assert_eq!(out.stage_end_digests[0], out.stage_start_digests[1]);
        assert_eq!(out.history.records.len(), 2);
        assert_eq!(out.checkpoint.role, "student");
        // gain bookkeeping: stage 1 gain is relative to the untrained baseline
        let r = &out.reports[0];
        assert!((r.dice_gain - (r.best_val_dice - out.baseline_dice)).abs() < 1e-6);
        let r2 = &out.reports[1];
        assert!(
            (r2.dice_gain - (r2.best_val_dice - out.reports[0].best_val_dice)).abs() < 1e-6
        );
    }

    #[test]
    fn fixed_seed_reproduces_reports() {
        let labeled = toy_set(2, 3);
        let unlabeled = toy_unlabeled(3, 23);
        let teacher = quick_teacher();
        let schedule = CurriculumSchedule {
            stages: vec![StageSpec {
                fraction: 1.0,
                epochs: 2,
            }],
        };
        let cfg = StudentTrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 9,
            k_passes: 2,
            alpha: 0.5,
        };
        let a = run_curriculum(
            &labeled,
            &unlabeled,
            &LabeledSet::default(),
            &teacher,
            &schedule,
            &LossConfig::default(),
            &cfg,
        )
        .unwrap();
        let b = run_curriculum(
            &labeled,
            &unlabeled,
            &LabeledSet::default(),
            &teacher,
            &schedule,
            &LossConfig::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.history, b.history);
        assert_eq!(
            a.checkpoint.digest().unwrap(),
            b.checkpoint.digest().unwrap()
        );
    }

    #[test]
    fn degenerate_config_reduces_to_supervised_training() {
        // lambda1 = lambda2 = 0 with an empty unlabeled pool: the pseudo
        // terms vanish and the student trains on labeled data alone.
        let labeled = toy_set(2, 13);
        let teacher = quick_teacher();
        let schedule = CurriculumSchedule {
            stages: vec![StageSpec {
                fraction: 1.0,
                epochs: 2,
            }],
        };
        let cfg = StudentTrainConfig {
            batch_size: 2,
            learning_rate: 2e-3,
            seed: 7,
            k_passes: 2,
            alpha: 0.5,
        };
        let loss_cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        let out = run_curriculum(
            &labeled,
            &UnlabeledSet::default(),
            &LabeledSet::default(),
            &teacher,
            &schedule,
            &loss_cfg,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.reports[0].samples_used, 2);
        // training moved the parameters
        assert_ne!(out.stage_start_digests[0], out.stage_end_digests[0]);
    }

    #[test]
    fn evaluate_student_rejects_empty_val() {
        let teacher = quick_teacher();
        assert!(matches!(
            evaluate_student(&teacher, &LabeledSet::default(), &LossConfig::default()),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn evaluate_uniform_predictor_closed_form() {
        // zero parameters -> uniform probabilities -> argmax everywhere 0.
        // per-class dice follows from the class masses in closed form.
        let cfg = tiny_backbone();
        let net = Backbone::new(cfg.clone()).unwrap();
        let params = ParamStore::<f32>::zeros(net.layout());
        let ckpt = Checkpoint::new(cfg, "student", params);
        let val = toy_set(1, 17);
        let rep = evaluate_student(&ckpt, &val, &LossConfig::default()).unwrap();
        let n1: usize = val.samples[0]
            .mask
            .classes()
            .iter()
            .filter(|&&v| v == 1)
            .count();
        let n = val.samples[0].mask.classes().len();
        let n0 = n - n1;
        // predicted: everything class 0 -> class0 dice = 2*n0/(n + n0), class1 dice = 0
        let want0 = 2.0 * n0 as f32 / (n + n0) as f32;
        assert!((rep.per_class.per_class[0].dice - want0).abs() < 1e-6);
        assert_eq!(rep.per_class.per_class[1].dice, 0.0);
        assert_eq!(rep.dice, 0.0); // macro over non-background
    }
}
