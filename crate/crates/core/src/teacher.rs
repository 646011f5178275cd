//! Supervised teacher training with uncertainty distillation, and the
//! averaged stochastic prediction used for pseudo-labeling.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ForwardMode, ParamStore};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::evaluate_set;
use crate::losses::{
    ce_loss, ce_loss_dz, dice_loss, dice_loss_dp, softmax_vjp, uncertainty_regression_du,
    uncertainty_regression_loss, uncertainty_target, LossConfig,
};
use crate::optim::Adam;
use crate::rng::{derive_seed, derive_seed_str};
use crate::volume::{softmax_over_classes, LabeledSet, Volume};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

// rng stream tags
const STREAM_INIT: u64 = 0x01;
const STREAM_SHUFFLE: u64 = 0x0200_0000;
const STREAM_TRAIN_DROP: u64 = 0x0300_0000;
const STREAM_TARGET: u64 = 0x0400_0000;
const STREAM_PREDICT: u64 = 0x0500_0000;

/// Teacher optimization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Stochastic pass count K for the uncertainty target.
    pub k_passes: usize,
    pub seed: u64,
    /// Weight of the uncertainty regression term in the joint objective.
    pub uncertainty_weight: f32,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e-3,
            k_passes: 8,
            seed: 42,
            uncertainty_weight: 0.1,
        }
    }
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.k_passes < 2 {
            return Err(Error::InvalidConfig(
                "k_passes must be >= 2 for uncertainty targets".into(),
            ));
        }
        Ok(())
    }
}

/// One training epoch's metrics. `val_*` are absent when no validation set
/// was given; `accuracy` is per-pixel argmax accuracy on the validation set
/// when present, otherwise on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: Option<f32>,
    pub train_dice: f32,
    pub val_dice: Option<f32>,
    pub accuracy: f32,
}

/// Per-epoch training records, in epoch order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch at which a non-finite loss aborted training, if any.
    pub diverged_at: Option<usize>,
}

impl TrainHistory {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line)?);
        }
        Ok(Self {
            records,
            diverged_at: None,
        })
    }
}

/// Trains the teacher on the labeled set, distilling the uncertainty head
/// from K stochastic passes of the current teacher on each batch. Returns
/// the best checkpoint (by validation dice, or training dice when `val` is
/// empty) and the full history. Fully reproducible from the seed.
pub fn train_teacher(
    labeled: &LabeledSet,
    val: &LabeledSet,
    backbone_cfg: &BackboneConfig,
    cfg: &TeacherTrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    if labeled.is_empty() {
        return Err(Error::Empty {
            context: "teacher labeled set",
        });
    }
    cfg.validate()?;
    loss_cfg.validate()?;
    let net = Backbone::new(backbone_cfg.clone())?;
    let mut params: ParamStore<f32> = net.init_params(derive_seed(cfg.seed, STREAM_INIT));
    let mut adam = Adam::new(net.param_count(), cfg.learning_rate as f64);
    let onehots: Vec<Array3<f32>> = labeled.samples.iter().map(|s| s.mask.onehot()).collect();

    let mut history = TrainHistory::default();
    let mut last_good = params.clone();
    let mut best: Option<(f32, ParamStore<f32>)> = None;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE + epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut grads = ParamStore::<f32>::zeros(net.layout());
        let mut batch_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            grads.fill(0.0);
            let inv_b = 1.0 / batch.len() as f32;
            let mut loss_acc = 0f32;
            for &i in batch {
                let sample = &labeled.samples[i];
                let target = (cfg.uncertainty_weight > 0.0)
                    .then(|| {
                        uncertainty_passes(&net, &params, &sample.volume, cfg.k_passes, || {
                            ChaCha8Rng::seed_from_u64(derive_seed_str(
                                cfg.seed,
                                &sample.id,
                                STREAM_TARGET + epoch as u64,
                            ))
                        })
                        .and_then(|passes| uncertainty_target(&passes, loss_cfg.var_floor))
                    })
                    .transpose()?;

                let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed_str(
                    cfg.seed,
                    &sample.id,
                    STREAM_TRAIN_DROP + epoch as u64,
                ));
                let (raw, trace) = net.forward(
                    &params,
                    sample.volume.data(),
                    ForwardMode::Stochastic { rng: &mut drop_rng },
                )?;
                let probs = softmax_over_classes(&raw.logits)?;
                let y = &onehots[i];

                let dice = dice_loss(&probs, y, loss_cfg.epsilon)?;
                let ce = ce_loss(&probs, y)?;
                let mut dz = softmax_vjp(&probs, &dice_loss_dp(&probs, y, loss_cfg.epsilon));
                dz.scaled_add(loss_cfg.lambda_ce, &ce_loss_dz(&probs, y));
                let mut sample_loss = dice + loss_cfg.lambda_ce * ce;

                let du = match &target {
                    Some(t) => {
                        let unc = uncertainty_regression_loss(&raw.logvar, t)?;
                        sample_loss += cfg.uncertainty_weight * unc;
                        let mut du = uncertainty_regression_du(&raw.logvar, t);
                        du.mapv_inplace(|v| v * cfg.uncertainty_weight * inv_b);
                        du
                    }
                    None => Array2::zeros(raw.logvar.dim()),
                };
                dz.mapv_inplace(|v| v * inv_b);
                net.backward_into(&params, &trace, &dz, &du, &mut grads);
                loss_acc += sample_loss;
            }
            // L2 penalty contributes 2 * lambda_reg * theta
            let two_reg = 2.0 * loss_cfg.lambda_reg;
            for (g, &p) in grads.data_mut().iter_mut().zip(params.data().iter()) {
                *g += two_reg * p;
            }
            let batch_loss = loss_acc / batch.len() as f32 + loss_cfg.lambda_reg * params.sq_norm();
            if !batch_loss.is_finite() {
                history.diverged_at = Some(epoch);
                break 'epochs;
            }
            batch_losses.push(batch_loss);
            adam.step(&mut params, &grads);
            if params.all_finite() {
                last_good = params.clone();
            }
        }

        let train_eval = evaluate_set(&net, &params, labeled, loss_cfg, false)?;
        let val_eval = if val.is_empty() {
            None
        } else {
            Some(evaluate_set(&net, &params, val, loss_cfg, false)?)
        };
        let select_dice = val_eval.as_ref().map(|e| e.dice).unwrap_or(train_eval.dice);
        if best.as_ref().map(|(d, _)| select_dice > *d).unwrap_or(true) {
            best = Some((select_dice, params.clone()));
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: batch_losses.iter().sum::<f32>() / batch_losses.len().max(1) as f32,
            val_loss: val_eval.as_ref().map(|e| e.loss),
            train_dice: train_eval.dice,
            val_dice: val_eval.as_ref().map(|e| e.dice),
            accuracy: val_eval
                .as_ref()
                .map(|e| e.accuracy)
                .unwrap_or(train_eval.accuracy),
        });
    }

    let final_params = if history.diverged_at.is_some() {
        last_good
    } else {
        best.map(|(_, p)| p).unwrap_or(params)
    };
    Ok((
        Checkpoint::new(backbone_cfg.clone(), "teacher", final_params),
        history,
    ))
}

fn uncertainty_passes(
    net: &Backbone,
    params: &ParamStore<f32>,
    volume: &Volume,
    k: usize,
    mut make_rng: impl FnMut() -> ChaCha8Rng,
) -> Result<Vec<Array3<f32>>> {
    let mut rng = make_rng();
    let mut passes = Vec::with_capacity(k);
    for _ in 0..k {
        let (raw, _) = net.forward(params, volume.data(), ForwardMode::Stochastic { rng: &mut rng })?;
        passes.push(softmax_over_classes(&raw.logits)?);
    }
    Ok(passes)
}

/// Averaged stochastic prediction: the mean probability map over K dropout
/// passes (still pixel-wise normalized), plus the deterministic-pass
/// log-variance head output.
pub fn teacher_predict(
    volume: &Volume,
    ckpt: &Checkpoint,
    k: usize,
    seed: u64,
) -> Result<(Array3<f32>, Array2<f32>)> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let net = ckpt.backbone()?;
    let mut mean: Option<Array3<f32>> = None;
    for pass in 0..k {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PREDICT + pass as u64));
        let (raw, _) = net.forward(
            &ckpt.params,
            volume.data(),
            ForwardMode::Stochastic { rng: &mut rng },
        )?;
        let probs = softmax_over_classes(&raw.logits)?;
        match &mut mean {
            Some(m) => *m += &probs,
            None => mean = Some(probs),
        }
    }
    let mut pbar = mean.expect("k >= 1");
    pbar.mapv_inplace(|v| v / k as f32);
    let (raw, _) = net.forward(&ckpt.params, volume.data(), ForwardMode::Deterministic)?;
    Ok((pbar, raw.logvar))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::volume::{LabelMask, LabeledSample, Volume};
    use ndarray::{Array2, Array3};

    pub(crate) fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            num_classes: 2,
            base_width: 4,
            depth: 2,
            dilation_rates: vec![1, 2],
            token_dim: 8,
            heads: 2,
            ff_mult: 2,
            dropout_rate: 0.2,
            input_hw: (16, 16),
        }
    }

    pub(crate) fn toy_set(n: usize, seed: u64) -> LabeledSet {
        // bright square on dark background; class 1 inside the square
        let mut samples = Vec::new();
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut img = Array3::<f32>::zeros((1, 16, 16));
            let mut mask = Array2::<u8>::zeros((16, 16));
            let cx = 4 + (i % 4);
            let cy = 4 + (i / 4 % 4);
            for y in 0..16 {
                for x in 0..16 {
                    let inside = x >= cx && x < cx + 6 && y >= cy && y < cy + 6;
                    let noise: f64 = rand::Rng::random::<f64>(&mut rng) * 0.2 - 0.1;
                    img[(0, y, x)] = if inside { 0.9 } else { 0.1 } + noise as f32;
                    mask[(y, x)] = inside as u8;
                }
            }
            samples.push(LabeledSample {
                id: format!("t{i:03}"),
                volume: Volume::new(img, vec!["m0".into()], None).unwrap(),
                mask: LabelMask::new(mask, 2).unwrap(),
            });
        }
        LabeledSet::new(samples).unwrap()
    }

    #[test]
    fn rejects_empty_labeled_set() {
        let cfg = tiny_backbone();
        let r = train_teacher(
            &LabeledSet::default(),
            &LabeledSet::default(),
            &cfg,
            &TeacherTrainConfig::default(),
            &LossConfig::default(),
        );
        assert!(matches!(r, Err(Error::Empty { .. })));
    }

    #[test]
    fn training_improves_dice_and_is_reproducible() {
        let set = toy_set(4, 7);
        let cfg = tiny_backbone();
        let tcfg = TeacherTrainConfig {
            epochs: 5,
            batch_size: 2,
            learning_rate: 3e-3,
            k_passes: 2,
            seed: 11,
            uncertainty_weight: 0.05,
        };
        let lcfg = LossConfig::default();
        let (ck1, h1) = train_teacher(&set, &LabeledSet::default(), &cfg, &tcfg, &lcfg).unwrap();
        let (ck2, h2) = train_teacher(&set, &LabeledSet::default(), &cfg, &tcfg, &lcfg).unwrap();
        assert_eq!(h1, h2, "fixed seed must reproduce the history");
        assert_eq!(ck1.digest().unwrap(), ck2.digest().unwrap());
        // trend: dice at the end above dice at the start, allowing one
        // non-monotone step
        let dices: Vec<f32> = h1.records.iter().map(|r| r.train_dice).collect();
        assert!(dices.last().unwrap() > dices.first().unwrap());
        let dips = dices.windows(2).filter(|w| w[1] < w[0] - 1e-6).count();
        assert!(dips <= 1, "dice trend too noisy: {dices:?}");
    }

    #[test]
    fn zero_uncertainty_weight_matches_no_uncertainty_objective() {
        let set = toy_set(2, 3);
        let cfg = tiny_backbone();
        let base = TeacherTrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            k_passes: 2,
            seed: 5,
            uncertainty_weight: 0.0,
        };
        let lcfg = LossConfig::default();
        let (a, ha) = train_teacher(&set, &LabeledSet::default(), &cfg, &base, &lcfg).unwrap();
        // k_passes irrelevant when the weight is zero
        let other = TeacherTrainConfig {
            k_passes: 6,
            ..base
        };
        let (b, hb) = train_teacher(&set, &LabeledSet::default(), &cfg, &other, &lcfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn predict_k1_without_dropout_equals_deterministic() {
        let cfg = BackboneConfig {
            dropout_rate: 0.0,
            ..tiny_backbone()
        };
        let net = Backbone::new(cfg.clone()).unwrap();
        let params = net.init_params::<f32>(1);
        let ckpt = Checkpoint::new(cfg, "teacher", params);
        let v = toy_set(1, 2).samples[0].volume.clone();
        let (pbar, _) = teacher_predict(&v, &ckpt, 1, 9).unwrap();
        let det = ckpt
            .backbone()
            .unwrap()
            .forward_volume(&ckpt.params, &v, ForwardMode::Deterministic)
            .unwrap();
        for (a, b) in pbar.iter().zip(det.probs.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn averaged_prediction_stays_normalized_and_matches_mean_oracle() {
        let cfg = tiny_backbone();
        let net = Backbone::new(cfg.clone()).unwrap();
        let params = net.init_params::<f32>(8);
        let ckpt = Checkpoint::new(cfg, "teacher", params);
        let v = toy_set(1, 4).samples[0].volume.clone();
        let k = 4;
        let (pbar, _) = teacher_predict(&v, &ckpt, k, 13).unwrap();
        // oracle: recompute the passes with the same derived streams
        let net = ckpt.backbone().unwrap();
        let mut acc = Array3::<f32>::zeros(pbar.dim());
        for pass in 0..k {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(13, STREAM_PREDICT + pass as u64));
            let (raw, _) = net
                .forward(&ckpt.params, v.data(), ForwardMode::Stochastic { rng: &mut rng })
                .unwrap();
            acc += &softmax_over_classes(&raw.logits).unwrap();
        }
        acc.mapv_inplace(|x| x / k as f32);
        for (a, b) in pbar.iter().zip(acc.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
        let (c, h, w) = pbar.dim();
        for yy in 0..h {
            for xx in 0..w {
                let s: f32 = (0..c).map(|k| pbar[(k, yy, xx)]).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let set = toy_set(2, 9);
        let cfg = tiny_backbone();
        let tcfg = TeacherTrainConfig {
            epochs: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            k_passes: 2,
            seed: 1,
            uncertainty_weight: 0.1,
        };
        let (ckpt, _) =
            train_teacher(&set, &LabeledSet::default(), &cfg, &tcfg, &LossConfig::default())
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.ckpt");
        ckpt.save(&path).unwrap();
        let (loaded, _) = Checkpoint::load(&path).unwrap();
        let v = &set.samples[0].volume;
        let net = ckpt.backbone().unwrap();
        let a = net
            .forward_volume(&ckpt.params, v, ForwardMode::Deterministic)
            .unwrap();
        let b = net
            .forward_volume(&loaded.params, v, ForwardMode::Deterministic)
            .unwrap();
        for (x, y) in a.logits.iter().zip(b.logits.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
