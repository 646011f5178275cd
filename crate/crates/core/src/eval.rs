//! Deterministic evaluation of a model over a labeled set.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ForwardMode, ParamStore};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, dice_loss, LossConfig};
use crate::metrics::ClasswiseScores;
use crate::volume::{class_name, LabelMask, LabeledSet};

/// Set-level evaluation: mean supervised loss, pooled class-wise overlap
/// scores, macro dice, and pixel accuracy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over samples of dice_loss + lambda_ce * ce_loss.
    pub loss: f32,
    /// Macro dice over tumor classes (background excluded unless configured).
    pub dice: f32,
    pub accuracy: f32,
    pub per_class: ClasswiseScores,
}

/// Runs the deterministic forward pass over `set` and aggregates metrics.
/// Class-wise scores pool pixel counts over the whole set.
pub fn evaluate_set(
    net: &Backbone,
    params: &ParamStore<f32>,
    set: &LabeledSet,
    loss_cfg: &LossConfig,
    include_background: bool,
) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Empty {
            context: "evaluation set",
        });
    }
    let c = net.config().num_classes;
    let mut inter = vec![0usize; c];
    let mut pred_n = vec![0usize; c];
    let mut targ_n = vec![0usize; c];
    let mut hits = 0usize;
    let mut pixels = 0usize;
    let mut loss_sum = 0f64;
    for s in &set.samples {
        let out = net.forward_volume(params, &s.volume, ForwardMode::Deterministic)?;
        let onehot = s.mask.onehot();
        let l = dice_loss(&out.probs, &onehot, loss_cfg.epsilon)?
            + loss_cfg.lambda_ce * ce_loss(&out.probs, &onehot)?;
        loss_sum += l as f64;
        let pred = LabelMask::new(out.argmax(), c)?;
        for (p, t) in pred.classes().iter().zip(s.mask.classes().iter()) {
            let (pi, ti) = (*p as usize, *t as usize);
            pred_n[pi] += 1;
            targ_n[ti] += 1;
            if pi == ti {
                inter[pi] += 1;
                hits += 1;
            }
            pixels += 1;
        }
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let (i, a, b) = (inter[k], pred_n[k], targ_n[k]);
        let (dice, iou) = match (a, b) {
            (0, 0) => (1.0, 1.0),
            (0, _) | (_, 0) => (0.0, 0.0),
            _ => (
                2.0 * i as f32 / (a + b) as f32,
                i as f32 / (a + b - i) as f32,
            ),
        };
        per_class.push(crate::metrics::ClassScore {
            name: class_name(k, c),
            dice,
            iou,
        });
    }
    let start = usize::from(!include_background && c > 1);
    let n = (c - start) as f32;
    let macro_dice = per_class[start..].iter().map(|s| s.dice).sum::<f32>() / n;
    let macro_iou = per_class[start..].iter().map(|s| s.iou).sum::<f32>() / n;
    Ok(EvalReport {
        loss: (loss_sum / set.len() as f64) as f32,
        dice: macro_dice,
        accuracy: hits as f32 / pixels as f32,
        per_class: ClasswiseScores {
            per_class,
            macro_dice,
            macro_iou,
            include_background,
        },
    })
}
