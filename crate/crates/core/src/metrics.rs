//! Evaluation metrics: class-wise Dice and IoU, pixel accuracy, confidence
//! statistics, and teacher-student agreement analysis.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{class_name, LabelMask, ModelOutput};

/// Per-class overlap scores plus macro means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClasswiseScores {
    /// (class name, dice, iou) per class, indexed by class id.
    pub per_class: Vec<ClassScore>,
    /// Mean dice over the included classes (background excluded unless
    /// `include_background` was set).
    pub macro_dice: f32,
    pub macro_iou: f32,
    pub include_background: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub dice: f32,
    pub iou: f32,
}

impl ClasswiseScores {
    /// Classes whose scores violate the binary-mask identity
    /// iou = dice / (2 - dice) beyond `tol`. Internally computed scores
    /// always satisfy it; external tables may not, and get flagged.
    pub fn identity_violations(&self, tol: f32) -> Vec<String> {
        self.per_class
            .iter()
            .filter(|s| (s.iou - s.dice / (2.0 - s.dice)).abs() > tol)
            .map(|s| s.name.clone())
            .collect()
    }
}

fn binary_counts(pred: &LabelMask, target: &LabelMask, class: usize) -> Result<(usize, usize, usize)> {
    if pred.spatial() != target.spatial() {
        return Err(Error::shape(
            "mask spatial shapes",
            format!("{:?}", target.spatial()),
            format!("{:?}", pred.spatial()),
        ));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (p, t) in pred.classes().iter().zip(target.classes().iter()) {
        let pa = *p as usize == class;
        let tb = *t as usize == class;
        a += pa as usize;
        b += tb as usize;
        inter += (pa && tb) as usize;
    }
    Ok((inter, a, b))
}

/// Dice coefficient 2|A∩B| / (|A|+|B|) for one class. Both masks empty
/// scores 1.0; exactly one empty scores 0.0.
pub fn dice_coefficient(pred: &LabelMask, target: &LabelMask, class: usize) -> Result<f32> {
    let (inter, a, b) = binary_counts(pred, target, class)?;
    Ok(match (a, b) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * inter as f32 / (a + b) as f32,
    })
}

/// Intersection over union |A∩B| / |A∪B|; same empty-mask conventions as
/// [`dice_coefficient`].
pub fn iou(pred: &LabelMask, target: &LabelMask, class: usize) -> Result<f32> {
    let (inter, a, b) = binary_counts(pred, target, class)?;
    Ok(match (a, b) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => inter as f32 / (a + b - inter) as f32,
    })
}

/// Scores for every class, with macro means over the included classes.
pub fn classwise_scores(
    pred: &LabelMask,
    target: &LabelMask,
    num_classes: usize,
    include_background: bool,
) -> Result<ClasswiseScores> {
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        per_class.push(ClassScore {
            name: class_name(c, num_classes),
            dice: dice_coefficient(pred, target, c)?,
            iou: iou(pred, target, c)?,
        });
    }
    let start = usize::from(!include_background && num_classes > 1);
    let n = (num_classes - start) as f32;
    let macro_dice = per_class[start..].iter().map(|s| s.dice).sum::<f32>() / n;
    let macro_iou = per_class[start..].iter().map(|s| s.iou).sum::<f32>() / n;
    Ok(ClasswiseScores {
        per_class,
        macro_dice,
        macro_iou,
        include_background,
    })
}

/// Fraction of pixels whose predicted class equals the target.
pub fn pixel_accuracy(pred: &LabelMask, target: &LabelMask) -> Result<f32> {
    if pred.spatial() != target.spatial() {
        return Err(Error::shape(
            "mask spatial shapes",
            format!("{:?}", target.spatial()),
            format!("{:?}", pred.spatial()),
        ));
    }
    let hits = pred
        .classes()
        .iter()
        .zip(target.classes().iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f32 / pred.classes().len() as f32)
}

/// Summary of image-level confidences: moments, a fixed-bin histogram over
/// the observed range, and the sorted sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfidenceStats {
    pub mean: f32,
    pub min: f32,
    pub max: f32,
    /// Histogram bin counts; bins split [min, max] evenly.
    pub histogram: Vec<usize>,
    pub bin_edges: Vec<f32>,
    /// Confidences sorted ascending.
    pub sorted: Vec<f32>,
}

pub const CONFIDENCE_BINS: usize = 20;

/// Builds [`ConfidenceStats`] over a non-empty list of confidences.
pub fn confidence_stats(values: &[f32]) -> Result<ConfidenceStats> {
    if values.is_empty() {
        return Err(Error::Empty {
            context: "confidence_stats input",
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite confidences"));
    let min = sorted[0];
    let max = *sorted.last().expect("non-empty");
    let mean = sorted.iter().sum::<f32>() / sorted.len() as f32;
    let mut histogram = vec![0usize; CONFIDENCE_BINS];
    let width = (max - min).max(f32::MIN_POSITIVE);
    for &v in values {
        let bin = (((v - min) / width) * CONFIDENCE_BINS as f32) as usize;
        histogram[bin.min(CONFIDENCE_BINS - 1)] += 1;
    }
    let bin_edges = (0..=CONFIDENCE_BINS)
        .map(|i| min + width * i as f32 / CONFIDENCE_BINS as f32)
        .collect();
    Ok(ConfidenceStats {
        mean,
        min,
        max,
        histogram,
        bin_edges,
        sorted,
    })
}

/// Pixel-wise argmax agreement between two outputs: the binary map and its
/// mean (the agreement fraction).
pub fn agreement_map(a: &ModelOutput, b: &ModelOutput) -> Result<(Array2<u8>, f32)> {
    if a.probs.dim() != b.probs.dim() {
        return Err(Error::shape(
            "agreement_map outputs",
            format!("{:?}", a.probs.dim()),
            format!("{:?}", b.probs.dim()),
        ));
    }
    let pa = a.argmax();
    let pb = b.argmax();
    let (h, w) = pa.dim();
    let mut map = Array2::<u8>::zeros((h, w));
    let mut agree = 0usize;
    for yy in 0..h {
        for xx in 0..w {
            if pa[(yy, xx)] == pb[(yy, xx)] {
                map[(yy, xx)] = 1;
                agree += 1;
            }
        }
    }
    Ok((map, agree as f32 / (h * w) as f32))
}
