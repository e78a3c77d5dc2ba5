//! mAP@IoU evaluation with PR curves, under clean inputs or a configured
//! attack. Matching is greedy in confidence order with each ground truth
//! claimed at most once; AP integrates the precision envelope.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_batch, AttackConfig};
use crate::boxes::{iou, BoxXYWH};
use crate::data::LoadedDataset;
use crate::detect::DetectionSet;
use crate::error::{Error, Result};
use crate::model::DetectorModel;
use crate::rng;

/// One point of a PR curve, recorded at a detection rank.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

/// AP integration rule. All-point is the default; the 11-point variant is
/// the older VOC convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApInterpolation {
    #[serde(rename = "all-point")]
    AllPoint,
    #[serde(rename = "eleven-point")]
    ElevenPoint,
}

/// Per-class AP plus its PR curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: f64,
    pub curve: Vec<PrPoint>,
}

/// Ground truth of one image: boxes with class labels.
pub type ImageGts = (Vec<BoxXYWH>, Vec<usize>);

/// Greedy-matching AP per class over a whole image set. Classes absent from
/// the ground truth are excluded (detections of such classes are ignored,
/// they have no recall basis).
pub fn average_precision(
    dets_by_image: &[DetectionSet],
    gts_by_image: &[ImageGts],
    iou_thr: f64,
    interp: ApInterpolation,
) -> Result<BTreeMap<usize, ClassAp>> {
    if !(0.0 < iou_thr && iou_thr < 1.0) {
        return Err(Error::Param(format!("iou threshold {iou_thr} outside (0,1)")));
    }
    if dets_by_image.len() != gts_by_image.len() {
        return Err(Error::Param("detections and ground truth image counts differ".into()));
    }
    let mut classes: Vec<usize> = gts_by_image
        .iter()
        .flat_map(|(_, labels)| labels.iter().copied())
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut out = BTreeMap::new();
    for class in classes {
        let n_gt: usize = gts_by_image
            .iter()
            .map(|(_, labels)| labels.iter().filter(|&&l| l == class).count())
            .sum();

        // All detections of this class, sorted by confidence descending,
        // insertion order breaking ties.
        let mut dets: Vec<(usize, &crate::detect::Detection)> = Vec::new();
        for (img, det_set) in dets_by_image.iter().enumerate() {
            for d in det_set.iter().filter(|d| d.class == class) {
                dets.push((img, d));
            }
        }
        dets.sort_by(|a, b| b.1.confidence.partial_cmp(&a.1.confidence).unwrap());

        let mut claimed: Vec<Vec<bool>> = gts_by_image
            .iter()
            .map(|(boxes, _)| vec![false; boxes.len()])
            .collect();
        let mut curve = Vec::with_capacity(dets.len());
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut flags = Vec::with_capacity(dets.len());
        for (img, d) in &dets {
            let (boxes, labels) = &gts_by_image[*img];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gb) in boxes.iter().enumerate() {
                if labels[gi] != class || claimed[*img][gi] {
                    continue;
                }
                let o = iou(&d.box_xywh, gb);
                if o >= iou_thr && best.map(|(_, b)| o > b).unwrap_or(true) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, _)) => {
                    claimed[*img][gi] = true;
                    tp += 1;
                    flags.push(true);
                }
                None => {
                    fp += 1;
                    flags.push(false);
                }
            }
            curve.push(PrPoint {
                confidence: d.confidence,
                precision: tp as f64 / (tp + fp) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            });
        }

        let ap = if n_gt == 0 { 0.0 } else { integrate_ap(&curve, interp) };
        out.insert(class, ClassAp { ap, curve });
    }
    Ok(out)
}

/// Area under the precision envelope over recall.
fn integrate_ap(curve: &[PrPoint], interp: ApInterpolation) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    // Envelope: max precision at recall >= r.
    let mut env: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    let mut best = 0.0;
    for point in env.iter_mut().rev() {
        best = point.1.max(best);
        point.1 = best;
    }
    match interp {
        ApInterpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for &(r, p) in &env {
                ap += (r - prev_recall).max(0.0) * p;
                prev_recall = r;
            }
            ap
        }
        ApInterpolation::ElevenPoint => {
            let mut acc = 0.0;
            for i in 0..=10 {
                let r = i as f64 / 10.0;
                let p = env
                    .iter()
                    .filter(|(recall, _)| *recall >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                acc += p;
            }
            acc / 11.0
        }
    }
}

/// Full evaluation artifact: mAP, per-class AP, PR curves, attack audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// "clean", "A_cls" or "A_loc".
    pub condition: String,
    pub map: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub curves: BTreeMap<usize, Vec<PrPoint>>,
    /// Mean over attacked images of the achieved max |adv - clean|.
    pub mean_linf: f64,
    pub images: usize,
    pub attack: Option<AttackConfig>,
    pub interpolation: ApInterpolation,
}

/// Assemble a report from per-image detections and ground truth; exposed so
/// hand-labeled fixtures can drive it directly.
pub fn compute_report(
    dets_by_image: &[DetectionSet],
    gts_by_image: &[ImageGts],
    condition: &str,
    mean_linf: f64,
    attack: Option<AttackConfig>,
    interp: ApInterpolation,
) -> Result<EvalReport> {
    let per_class = average_precision(dets_by_image, gts_by_image, 0.5, interp)?;
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(EvalReport {
        condition: condition.to_string(),
        map,
        per_class_ap: per_class.iter().map(|(k, v)| (*k, v.ap)).collect(),
        curves: per_class.into_iter().map(|(k, v)| (k, v.curve)).collect(),
        mean_linf,
        images: gts_by_image.len(),
        attack,
        interpolation: interp,
    })
}

/// Evaluate mAP@0.5 on a dataset, attacking each image first when an attack
/// config is given. Images without ground truth are evaluated clean (the
/// attacked loss is undefined there); their detections count as false
/// positives.
pub fn evaluate(
    model: &DetectorModel,
    data: &LoadedDataset,
    attack: Option<&AttackConfig>,
) -> Result<EvalReport> {
    evaluate_with(model, data, attack, ApInterpolation::AllPoint)
}

pub fn evaluate_with(
    model: &DetectorModel,
    data: &LoadedDataset,
    attack: Option<&AttackConfig>,
    interp: ApInterpolation,
) -> Result<EvalReport> {
    if data.images.is_empty() {
        return Err(Error::Param("dataset is empty".into()));
    }
    let mut dets_by_image = Vec::with_capacity(data.images.len());
    let mut gts_by_image = Vec::with_capacity(data.images.len());
    let mut linf_sum = 0.0;
    let mut attacked = 0usize;
    for (i, sample) in data.images.iter().enumerate() {
        let pixels = match attack {
            Some(cfg) if !sample.boxes.is_empty() && cfg.steps > 0 => {
                let seed = rng::derive_seed(cfg.seed, "eval-attack", &[i as u64]);
                let outcome = attack_batch(model, &[sample], cfg, &[seed])?
                    .into_iter()
                    .next()
                    .unwrap();
                linf_sum += outcome.achieved_linf;
                attacked += 1;
                outcome.adversarial
            }
            _ => sample.pixels.clone(),
        };
        dets_by_image.push(model.detect_image(&pixels)?);
        gts_by_image.push((sample.boxes.clone(), sample.labels.clone()));
    }
    let condition = match attack {
        None => "clean".to_string(),
        Some(cfg) => cfg.loss_kind.condition().to_string(),
    };
    let mean_linf = if attacked == 0 { 0.0 } else { linf_sum / attacked as f64 };
    compute_report(
        &dets_by_image,
        &gts_by_image,
        &condition,
        mean_linf,
        attack.cloned(),
        interp,
    )
}

/// PR curves as CSV: class, confidence, precision, recall.
pub fn write_pr_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("class,confidence,precision,recall\n");
    for (class, curve) in &report.curves {
        for p in curve {
            out.push_str(&format!("{class},{},{},{}\n", p.confidence, p.precision, p.recall));
        }
    }
    crate::data::atomic_write(path, out.as_bytes())
}
