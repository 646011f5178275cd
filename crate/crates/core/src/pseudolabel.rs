//! Pseudo-label generation from the frozen teacher, confidence scoring,
//! progressive stage selection, and teacher-student agreement refinement.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{b64_to_f32, b64_to_u8, b64_f32, b64_u8, Checkpoint};
use crate::error::{Error, Result};
use crate::backbone::ForwardMode;
use crate::rng::derive_seed_str;
use crate::teacher::teacher_predict;
use crate::volume::{argmax_over_classes, LabelMask, UnlabeledSet};

/// An unlabeled sample annotated by the teacher: hard pseudo-label, retained
/// soft map, per-pixel confidence, image-level confidence, and the stage at
/// which the confidences were last refined.
#[derive(Clone, Debug)]
pub struct PseudoLabeledSample {
    pub id: String,
    /// Hard argmax pseudo-label (the training target).
    pub hard: LabelMask,
    /// Averaged teacher probability map (kept for diagnostics).
    pub soft: Array3<f32>,
    /// Per-pixel confidence c_p in [0, 1].
    pub conf: Array2<f32>,
    /// Image-level confidence: the mean of `conf`.
    pub image_conf: f32,
    /// Stage index at which this sample was last refined (0 = initial).
    pub provenance: usize,
}

impl PseudoLabeledSample {
    /// Recomputes the image confidence from the pixel grid.
    pub fn refresh_image_conf(&mut self) {
        self.image_conf = image_confidence(&self.conf).expect("non-empty grid");
    }
}

/// Per-pixel confidence: max-class averaged probability, down-weighted by
/// the positive part of the predicted log-variance and clamped to [0, 1]:
/// c_p = max_c Pbar_{p,c} * exp(-max(U_p, 0)).
pub fn pixel_confidence(pbar: &Array3<f32>, logvar: &Array2<f32>) -> Result<Array2<f32>> {
    let (_, h, w) = pbar.dim();
    if logvar.dim() != (h, w) {
        return Err(Error::shape(
            "pixel_confidence grids",
            format!("{h}x{w}"),
            format!("{:?}", logvar.dim()),
        ));
    }
    if let Some(idx) = pbar.iter().chain(logvar.iter()).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "pixel_confidence inputs",
            index: idx,
        });
    }
    let (c, _, _) = pbar.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    for yy in 0..h {
        for xx in 0..w {
            let mut maxp = pbar[(0, yy, xx)];
            for k in 1..c {
                maxp = maxp.max(pbar[(k, yy, xx)]);
            }
            let damp = (-logvar[(yy, xx)].max(0.0)).exp();
            out[(yy, xx)] = (maxp * damp).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Image-level confidence: arithmetic mean of the pixel confidences.
pub fn image_confidence(conf: &Array2<f32>) -> Result<f32> {
    if conf.is_empty() {
        return Err(Error::Empty {
            context: "confidence grid",
        });
    }
    Ok(conf.sum() / conf.len() as f32)
}

/// Labels every unlabeled sample with the teacher's averaged prediction.
/// Deterministic given `seed`; each sample draws its own derived stream, so
/// the result does not depend on iteration order.
pub fn generate_pseudolabels(
    unlabeled: &UnlabeledSet,
    teacher: &Checkpoint,
    k: usize,
    seed: u64,
) -> Result<Vec<PseudoLabeledSample>> {
    let num_classes = teacher.config.num_classes;
    let mut out = Vec::with_capacity(unlabeled.len());
    for s in &unlabeled.samples {
        let sample_seed = derive_seed_str(seed, &s.id, 0);
        let (pbar, logvar) = teacher_predict(&s.volume, teacher, k, sample_seed)?;
        let conf = pixel_confidence(&pbar, &logvar)?;
        let image_conf = image_confidence(&conf)?;
        let hard = LabelMask::new(argmax_over_classes(&pbar), num_classes)?;
        out.push(PseudoLabeledSample {
            id: s.id.clone(),
            hard,
            soft: pbar,
            conf,
            image_conf,
            provenance: 0,
        });
    }
    Ok(out)
}

/// One curriculum stage's sample selection, ordered by rank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSelection {
    pub stage: usize,
    pub fraction: f64,
    /// Selected sample ids, highest image confidence first.
    pub ids: Vec<String>,
}

/// Number of samples the top-`fraction` selection keeps: ceil(fraction * n),
/// snapping near-integer products so decimal fractions like 0.1 never round
/// an exact count upward.
pub fn selection_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    if (x - x.round()).abs() < 1e-6 {
        x.round() as usize
    } else {
        x.ceil() as usize
    }
}

/// Ranks samples by image confidence (descending, ties broken by ascending
/// id) and keeps the top `ceil(fraction * n)`.
pub fn select_stage(
    samples: &[PseudoLabeledSample],
    stage: usize,
    fraction: f64,
) -> Result<StageSelection> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "stage fraction {fraction} outside (0, 1]"
        )));
    }
    let mut order: Vec<(&str, f32)> = samples
        .iter()
        .map(|s| (s.id.as_str(), s.image_conf))
        .collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite confidences")
            .then_with(|| a.0.cmp(b.0))
    });
    let count = selection_count(fraction, samples.len());
    Ok(StageSelection {
        stage,
        fraction,
        ids: order
            .into_iter()
            .take(count)
            .map(|(id, _)| id.to_string())
            .collect(),
    })
}

/// Feedback refinement: run both models on each sample, keep confidence
/// where their argmax predictions agree, and damp it by `alpha` where they
/// disagree. Labels are never rewritten; image confidence is recomputed and
/// provenance set to `stage`.
pub fn refine_by_agreement(
    samples: &mut [PseudoLabeledSample],
    unlabeled: &UnlabeledSet,
    teacher: &Checkpoint,
    student: &Checkpoint,
    alpha: f32,
    stage: usize,
) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "agreement damping alpha {alpha} outside (0, 1]"
        )));
    }
    let teacher_net = teacher.backbone()?;
    let student_net = student.backbone()?;
    let by_id: HashMap<&str, &crate::volume::UnlabeledSample> = unlabeled
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s))
        .collect();
    for ps in samples.iter_mut() {
        let sample = by_id.get(ps.id.as_str()).ok_or_else(|| {
            Error::InvalidConfig(format!("no unlabeled input for pseudo-label '{}'", ps.id))
        })?;
        let t_out =
            teacher_net.forward_volume(&teacher.params, &sample.volume, ForwardMode::Deterministic)?;
        let s_out =
            student_net.forward_volume(&student.params, &sample.volume, ForwardMode::Deterministic)?;
        let t_arg = t_out.argmax();
        let s_arg = s_out.argmax();
        for ((yy, xx), cv) in ps.conf.indexed_iter_mut() {
            if t_arg[(yy, xx)] != s_arg[(yy, xx)] {
                *cv *= alpha;
            }
        }
        ps.refresh_image_conf();
        ps.provenance = stage;
    }
    Ok(())
}

// --- cache -----------------------------------------------------------------

const CACHE_FORMAT: &str = "tsseg-pseudolabels";
const CACHE_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const RECORDS_FILE: &str = "records.jsonl";

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    format: String,
    version: u32,
    teacher_digest: String,
    num_classes: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    id: String,
    classes: usize,
    h: usize,
    w: usize,
    hard: String,
    soft: String,
    conf: String,
    image_conf: f32,
    provenance: usize,
}

/// Persists pseudo-labels keyed by the generating teacher's digest.
pub fn save_cache(dir: &Path, samples: &[PseudoLabeledSample], teacher_digest: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let num_classes = samples.first().map(|s| s.hard.num_classes()).unwrap_or(0);
    let manifest = CacheManifest {
        format: CACHE_FORMAT.into(),
        version: CACHE_VERSION,
        teacher_digest: teacher_digest.into(),
        num_classes,
        count: samples.len(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    let mut lines = String::new();
    for s in samples {
        let (h, w) = s.hard.spatial();
        let rec = CacheRecord {
            id: s.id.clone(),
            classes: s.hard.num_classes(),
            h,
            w,
            hard: b64_u8(s.hard.classes().as_slice().expect("contiguous")),
            soft: b64_f32(s.soft.as_slice().expect("contiguous")),
            conf: b64_f32(s.conf.as_slice().expect("contiguous")),
            image_conf: s.image_conf,
            provenance: s.provenance,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    std::fs::write(dir.join(RECORDS_FILE), lines)?;
    Ok(())
}

/// Loads a pseudo-label cache, returning the samples and the teacher digest
/// they were generated from.
pub fn load_cache(dir: &Path) -> Result<(Vec<PseudoLabeledSample>, String)> {
    let manifest: CacheManifest =
        serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != CACHE_FORMAT || manifest.version != CACHE_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported pseudo-label cache {}/{}",
            manifest.format, manifest.version
        )));
    }
    let body = std::fs::read_to_string(dir.join(RECORDS_FILE))?;
    let mut samples = Vec::with_capacity(manifest.count);
    for line in body.lines().filter(|l| !l.trim().is_empty()) {
        let rec: CacheRecord = serde_json::from_str(line)?;
        let hard = Array2::from_shape_vec((rec.h, rec.w), b64_to_u8(&rec.hard)?)
            .map_err(|e| Error::InvalidConfig(format!("bad cache record: {e}")))?;
        let soft = Array3::from_shape_vec((rec.classes, rec.h, rec.w), b64_to_f32(&rec.soft)?)
            .map_err(|e| Error::InvalidConfig(format!("bad cache record: {e}")))?;
        let conf = Array2::from_shape_vec((rec.h, rec.w), b64_to_f32(&rec.conf)?)
            .map_err(|e| Error::InvalidConfig(format!("bad cache record: {e}")))?;
        samples.push(PseudoLabeledSample {
            id: rec.id,
            hard: LabelMask::new(hard, rec.classes)?,
            soft,
            conf,
            image_conf: rec.image_conf,
            provenance: rec.provenance,
        });
    }
    Ok((samples, manifest.teacher_digest))
}
