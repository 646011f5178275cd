//! Domain types: volumes, label masks, dataset containers, model outputs.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Scalar;

/// Class names for the default 4-class layout.
pub const DEFAULT_CLASS_NAMES: [&str; 4] = ["Background", "NCR/NET", "Edema", "Enhancing"];

/// Returns the display name for class `c` in a `num_classes`-class problem.
pub fn class_name(c: usize, num_classes: usize) -> String {
    if num_classes == 4 && c < 4 {
        DEFAULT_CLASS_NAMES[c].to_string()
    } else {
        format!("class_{c}")
    }
}

/// A multi-channel 2D image grid. Channels are modalities (inputs) or class
/// maps, all sharing the same spatial shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    channel_roles: Vec<String>,
    spacing: Option<Vec<f32>>,
}

impl Volume {
    /// Builds a volume, checking the shape and finiteness invariants.
    pub fn new(
        data: Array3<f32>,
        channel_roles: Vec<String>,
        spacing: Option<Vec<f32>>,
    ) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != channel_roles.len() {
            return Err(Error::shape("Volume channel roles", c, channel_roles.len()));
        }
        if h < 8 || w < 8 {
            return Err(Error::InvalidConfig(format!(
                "volume spatial size {h}x{w} below minimum 8x8"
            )));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Volume data",
                index: idx,
            });
        }
        Ok(Self {
            data,
            channel_roles,
            spacing,
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn channel_roles(&self) -> &[String] {
        &self.channel_roles
    }

    pub fn spacing(&self) -> Option<&[f32]> {
        self.spacing.as_deref()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// Spatial shape (H, W).
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Integer class mask over an H x W grid with values in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    classes: Array2<u8>,
    num_classes: usize,
}

impl LabelMask {
    pub fn new(classes: Array2<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::InvalidConfig(format!(
                "class count {num_classes} out of supported range 1..=256"
            )));
        }
        if let Some(&v) = classes.iter().find(|&&v| (v as usize) >= num_classes) {
            return Err(Error::ClassOutOfRange {
                got: v as usize,
                num_classes,
            });
        }
        Ok(Self {
            classes,
            num_classes,
        })
    }

    pub fn classes(&self) -> &Array2<u8> {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spatial(&self) -> (usize, usize) {
        self.classes.dim()
    }

    /// One-hot view of the mask, shape C x H x W.
    pub fn onehot(&self) -> Array3<f32> {
        onehot(self, self.num_classes).expect("mask validated at construction")
    }
}

/// One labeled training sample.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub id: String,
    pub volume: Volume,
    pub mask: LabelMask,
}

/// One unlabeled sample with a stable identifier.
#[derive(Clone, Debug)]
pub struct UnlabeledSample {
    pub id: String,
    pub volume: Volume,
}

/// A set of (volume, mask) pairs with unique ids and consistent shapes.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub samples: Vec<LabeledSample>,
}

/// A set of unlabeled volumes with unique, stable ids.
#[derive(Clone, Debug, Default)]
pub struct UnlabeledSet {
    pub samples: Vec<UnlabeledSample>,
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::InvalidConfig(format!("duplicate sample id '{id}'")));
        }
    }
    Ok(())
}

impl LabeledSet {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self> {
        check_unique_ids(samples.iter().map(|s| s.id.as_str()))?;
        if let Some(first) = samples.first() {
            let shape = first.volume.spatial();
            for s in &samples {
                if s.volume.spatial() != shape || s.mask.spatial() != shape {
                    return Err(Error::shape(
                        "LabeledSet spatial shapes",
                        format!("{shape:?}"),
                        format!("{:?}/{:?}", s.volume.spatial(), s.mask.spatial()),
                    ));
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl UnlabeledSet {
    pub fn new(samples: Vec<UnlabeledSample>) -> Result<Self> {
        check_unique_ids(samples.iter().map(|s| s.id.as_str()))?;
        if let Some(first) = samples.first() {
            let shape = first.volume.spatial();
            for s in &samples {
                if s.volume.spatial() != shape {
                    return Err(Error::shape(
                        "UnlabeledSet spatial shapes",
                        format!("{shape:?}"),
                        format!("{:?}", s.volume.spatial()),
                    ));
                }
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Network output for one input: logits Z, softmax probabilities P, and the
/// per-pixel log-variance map U.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub logits: Array3<f32>,
    pub probs: Array3<f32>,
    pub logvar: Array2<f32>,
}

impl ModelOutput {
    /// Builds an output from logits and log-variance; probabilities are the
    /// softmax of the logits, so the normalization invariant holds by
    /// construction.
    pub fn from_logits(logits: Array3<f32>, logvar: Array2<f32>) -> Result<Self> {
        let probs = softmax_over_classes(&logits)?;
        let (c, h, w) = logits.dim();
        if logvar.dim() != (h, w) {
            return Err(Error::shape(
                "ModelOutput logvar",
                format!("{h}x{w}"),
                format!("{:?}", logvar.dim()),
            ));
        }
        if let Some(idx) = logvar.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "ModelOutput logvar",
                index: idx,
            });
        }
        let _ = c;
        Ok(Self {
            logits,
            probs,
            logvar,
        })
    }

    /// Checks the stored probabilities against the invariants: per-pixel
    /// normalization within `tol` and elementwise agreement with
    /// `softmax(logits)` within `tol`.
    pub fn validate(&self, tol: f32) -> Result<()> {
        let fresh = softmax_over_classes(&self.logits)?;
        for (a, b) in self.probs.iter().zip(fresh.iter()) {
            if (a - b).abs() > tol || !(0.0..=1.0).contains(a) {
                return Err(Error::InvalidConfig(format!(
                    "stored probability {a} deviates from softmax(logits) {b}"
                )));
            }
        }
        for col in self.probs.lanes(Axis(0)) {
            let s: f32 = col.sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidConfig(format!(
                    "per-pixel probability sum {s} not within {tol} of 1"
                )));
            }
        }
        Ok(())
    }

    /// Per-pixel argmax class map.
    pub fn argmax(&self) -> Array2<u8> {
        argmax_over_classes(&self.probs)
    }
}

/// Softmax along the class axis of a C x H x W logit grid.
///
/// Rejects non-finite input; shift-invariant and argmax-preserving.
pub fn softmax_over_classes<F: Scalar>(logits: &Array3<F>) -> Result<Array3<F>> {
    if let Some(idx) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax logits",
            index: idx,
        });
    }
    let (c, h, w) = logits.dim();
    let mut out = logits.clone();
    for y in 0..h {
        for x in 0..w {
            let mut maxv = F::neg_infinity();
            for k in 0..c {
                maxv = maxv.max(out[(k, y, x)]);
            }
            let mut sum = F::zero();
            for k in 0..c {
                let e = (out[(k, y, x)] - maxv).exp();
                out[(k, y, x)] = e;
                sum = sum + e;
            }
            for k in 0..c {
                out[(k, y, x)] = out[(k, y, x)] / sum;
            }
        }
    }
    Ok(out)
}

/// Per-pixel argmax along the class axis. Ties resolve to the lowest class id.
pub fn argmax_over_classes<F: Scalar>(probs: &Array3<F>) -> Array2<u8> {
    let (c, h, w) = probs.dim();
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut bestv = probs[(0, y, x)];
            for k in 1..c {
                if probs[(k, y, x)] > bestv {
                    bestv = probs[(k, y, x)];
                    best = k;
                }
            }
            out[(y, x)] = best as u8;
        }
    }
    out
}

/// One-hot encoding of a label mask, shape C x H x W, exactly one 1 per pixel.
pub fn onehot(mask: &LabelMask, num_classes: usize) -> Result<Array3<f32>> {
    let (h, w) = mask.spatial();
    if let Some(&v) = mask.classes().iter().find(|&&v| (v as usize) >= num_classes) {
        return Err(Error::ClassOutOfRange {
            got: v as usize,
            num_classes,
        });
    }
    let mut out = Array3::<f32>::zeros((num_classes, h, w));
    for ((y, x), &v) in mask.classes().indexed_iter() {
        out[(v as usize, y, x)] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn mask2x2(vals: [[u8; 2]; 2], c: usize) -> LabelMask {
        LabelMask::new(arr2(&vals), c).unwrap()
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let z = Array3::<f32>::from_elem((4, 2, 2), 0.7);
        let p = softmax_over_classes(&z).unwrap();
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_closed_form_two_class() {
        // z = [0, ln 3] -> [0.25, 0.75]
        let mut z = Array3::<f32>::zeros((2, 1, 1));
        z[(1, 0, 0)] = 3.0f32.ln();
        let p = softmax_over_classes(&z).unwrap();
        assert!((p[(0, 0, 0)] - 0.25).abs() < 1e-6);
        assert!((p[(1, 0, 0)] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut z = Array3::<f32>::zeros((3, 2, 2));
        for (i, v) in z.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        let p1 = softmax_over_classes(&z).unwrap();
        let shifted = &z + 5.25f32;
        let p2 = softmax_over_classes(&shifted).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut z = Array3::<f32>::zeros((2, 2, 2));
        z[(0, 1, 1)] = f32::NAN;
        assert!(matches!(
            softmax_over_classes(&z),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn onehot_all_zero_mask() {
        let m = mask2x2([[0, 0], [0, 0]], 4);
        let oh = onehot(&m, 4).unwrap();
        assert_eq!(oh.index_axis(Axis(0), 0).sum(), 4.0);
        assert_eq!(oh.sum(), 4.0);
    }

    #[test]
    fn onehot_single_pixel_class3() {
        let m = mask2x2([[0, 0], [0, 3]], 4);
        let oh = onehot(&m, 4).unwrap();
        assert_eq!(oh[(3, 1, 1)], 1.0);
        assert_eq!(oh.index_axis(Axis(0), 3).sum(), 1.0);
    }

    #[test]
    fn onehot_argmax_roundtrip_exhaustive_4x4() {
        // argmax(onehot(m)) = m for every 4x4 mask over a sampled subset of
        // class assignments (full enumeration is 4^16; stride through it).
        let c = 4usize;
        for salt in 0..256u32 {
            let mut vals = [[0u8; 4]; 4];
            let mut acc = salt.wrapping_mul(2654435761);
            for row in vals.iter_mut() {
                for v in row.iter_mut() {
                    acc = acc.wrapping_mul(1664525).wrapping_add(1013904223);
                    *v = ((acc >> 16) % c as u32) as u8;
                }
            }
            let m = LabelMask::new(arr2(&vals), c).unwrap();
            let oh = m.onehot();
            let rec = argmax_over_classes(&oh);
            assert_eq!(&rec, m.classes());
        }
    }

    #[test]
    fn onehot_rejects_out_of_range() {
        let m = mask2x2([[0, 1], [2, 3]], 4);
        assert!(matches!(
            onehot(&m, 3),
            Err(Error::ClassOutOfRange { got: 3, .. })
        ));
    }

    #[test]
    fn volume_rejects_nan_and_tiny() {
        let mut d = Array3::<f32>::zeros((1, 8, 8));
        d[(0, 0, 0)] = f32::INFINITY;
        assert!(Volume::new(d, vec!["t1".into()], None).is_err());
        let d = Array3::<f32>::zeros((1, 4, 8));
        assert!(Volume::new(d, vec!["t1".into()], None).is_err());
    }

    #[test]
    fn model_output_from_logits_satisfies_invariants() {
        let mut z = Array3::<f32>::zeros((3, 8, 8));
        for (i, v) in z.iter_mut().enumerate() {
            *v = ((i * 31 % 17) as f32) * 0.1 - 0.8;
        }
        let out = ModelOutput::from_logits(z, Array2::zeros((8, 8))).unwrap();
        out.validate(1e-5).unwrap();
    }

    #[test]
    fn sets_reject_duplicate_ids() {
        let v = Volume::new(Array3::zeros((1, 8, 8)), vec!["t1".into()], None).unwrap();
        let s = UnlabeledSet::new(vec![
            UnlabeledSample {
                id: "a".into(),
                volume: v.clone(),
            },
            UnlabeledSample {
                id: "a".into(),
                volume: v,
            },
        ]);
        assert!(s.is_err());
    }
}
