//! Conflict instruments: gradient entanglement ratios, the m-step loss-change
//! probe between clean and adversarial batches, and confidence histograms.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_batch, AttackConfig};
use crate::data::ImageSample;
use crate::detect::DetectionSet;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{DetectorModel, LossSelect, Mode};
use crate::rng;
use crate::train::Checkpoint;

/// R(g1, g2) = g1.g2 / |g2|^2 — how much of g1 lies along g2, normalized by
/// g2 alone (asymmetric by design).
pub fn gradient_entanglement(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::Param(format!(
            "gradient length mismatch {} vs {}",
            g1.len(),
            g2.len()
        )));
    }
    if g1.is_empty() {
        return Err(Error::Param("empty gradient vectors".into()));
    }
    let dot: f64 = g1.iter().zip(g2).map(|(a, b)| a * b).sum();
    let norm2: f64 = g2.iter().map(|b| b * b).sum();
    if norm2 == 0.0 {
        return Err(Error::Param("entanglement undefined: |g2| = 0".into()));
    }
    Ok(dot / norm2)
}

/// Both normalization directions of the per-layer entanglement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEntanglement {
    pub layer: String,
    /// R with g1 = clean gradients, g2 = adversarial gradients.
    pub clean_over_adv: Option<f64>,
    /// R with g1 = adversarial gradients, g2 = clean gradients.
    pub adv_over_clean: Option<f64>,
}

/// Detection-loss parameter gradients per layer, flattened (weights then
/// biases in registration order).
fn detection_param_grads(model: &DetectorModel, batch: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
    let matches: Vec<_> = batch
        .iter()
        .map(|s| model.match_sample(&s.boxes, &s.labels))
        .collect::<Result<_>>()?;
    let mut g = Graph::new();
    let lb = model.bind_params(&mut g, true);
    let mut pixels = ndarray::Array4::<f64>::zeros({
        let s = batch[0].pixels.shape();
        (batch.len(), s[0], s[1], s[2])
    });
    for (i, s) in batch.iter().enumerate() {
        pixels.index_axis_mut(ndarray::Axis(0), i).assign(&s.pixels);
    }
    let px = g.constant(pixels.into_dyn());
    let net = model.build_forward(&mut g, &lb, px, Mode::Eval, None, None, false);
    let det = model.detection_loss_vars(&mut g, &net, &matches, LossSelect::Both);
    let grads = g.backward(det.total);

    let mut by_param: Vec<Vec<f64>> = Vec::with_capacity(model.params.len());
    for i in 0..model.params.len() {
        match grads.get(lb.vars[i]) {
            Some(t) => by_param.push(t.iter().copied().collect()),
            None => by_param.push(vec![0.0; model.params.value_at(i).len()]),
        }
    }
    Ok(by_param)
}

/// Per-layer entanglement between the detection-loss gradients of a clean
/// batch and its adversarial counterpart batch. Layers whose gradient is zero
/// on the normalizing side are reported as undefined, not dropped.
pub fn layerwise_entanglement(
    model: &DetectorModel,
    clean_batch: &[&ImageSample],
    adv_batch: &[&ImageSample],
) -> Result<Vec<LayerEntanglement>> {
    if clean_batch.is_empty() || clean_batch.len() != adv_batch.len() {
        return Err(Error::Param("batches must be nonempty counterparts".into()));
    }
    let g_clean = detection_param_grads(model, clean_batch)?;
    let g_adv = detection_param_grads(model, adv_batch)?;
    let layers = model.layers();
    let mut out = Vec::with_capacity(layers.len());
    for (layer, params) in layers {
        let mut clean_flat = Vec::new();
        let mut adv_flat = Vec::new();
        for name in &params {
            let idx = model.params.idx(name);
            clean_flat.extend_from_slice(&g_clean[idx]);
            adv_flat.extend_from_slice(&g_adv[idx]);
        }
        let clean_over_adv = gradient_entanglement(&clean_flat, &adv_flat).ok();
        let adv_over_clean = gradient_entanglement(&adv_flat, &clean_flat).ok();
        out.push(LayerEntanglement {
            layer,
            clean_over_adv,
            adv_over_clean,
        });
    }
    Ok(out)
}

/// Probe direction: which batch type is trained on, then which is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "clean-clean")]
    CleanToClean,
    #[serde(rename = "clean-adv")]
    CleanToAdv,
    #[serde(rename = "adv-clean")]
    AdvToClean,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean-clean" => Ok(Direction::CleanToClean),
            "clean-adv" => Ok(Direction::CleanToAdv),
            "adv-clean" => Ok(Direction::AdvToClean),
            other => Err(Error::Param(format!("unknown direction \"{other}\""))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::CleanToClean => "clean-clean",
            Direction::CleanToAdv => "clean-adv",
            Direction::AdvToClean => "adv-clean",
        })
    }
}

/// Per-image detection-loss changes after the probe steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub direction: Direction,
    pub m: usize,
    pub learning_rate: f64,
    pub delta_loss: Vec<f64>,
}

impl ConflictRecord {
    pub fn mean_delta(&self) -> f64 {
        if self.delta_loss.is_empty() {
            return 0.0;
        }
        self.delta_loss.iter().sum::<f64>() / self.delta_loss.len() as f64
    }

    pub fn mean_abs_delta(&self) -> f64 {
        if self.delta_loss.is_empty() {
            return 0.0;
        }
        self.delta_loss.iter().map(|d| d.abs()).sum::<f64>() / self.delta_loss.len() as f64
    }
}

fn per_image_detection_losses(model: &DetectorModel, batch: &[ImageSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len());
    for s in batch {
        let fwd = model.forward(&s.pixels, None, Mode::Eval, 0)?;
        let matched = model.match_sample(&s.boxes, &s.labels)?;
        let l = crate::detect::classification_loss(&fwd.output, &matched, model.config.neg_pos_ratio)
            + crate::detect::localization_loss(&fwd.output, &matched);
        out.push(l);
    }
    Ok(out)
}

fn adversarial_counterparts(
    model: &DetectorModel,
    batch: &[&ImageSample],
    attack: &AttackConfig,
    tag: &str,
) -> Result<Vec<ImageSample>> {
    let seeds: Vec<u64> = (0..batch.len())
        .map(|i| rng::derive_seed(attack.seed, tag, &[i as u64]))
        .collect();
    let outcomes = attack_batch(model, batch, attack, &seeds)?;
    Ok(batch
        .iter()
        .zip(outcomes)
        .map(|(s, o)| ImageSample {
            pixels: o.adversarial,
            boxes: s.boxes.clone(),
            labels: s.labels.clone(),
        })
        .collect())
}

/// Clone the checkpointed model, record per-image detection loss on
/// `batch_eval`, run `m` plain gradient steps of the detection loss on
/// `batch_train` (clean or adversarial per `direction`), and report the
/// per-image loss change. The checkpoint itself is never mutated.
pub fn conflict_probe(
    checkpoint: &Checkpoint,
    batch_train: &[&ImageSample],
    batch_eval: &[&ImageSample],
    direction: Direction,
    m: usize,
    learning_rate: f64,
    attack: &AttackConfig,
) -> Result<ConflictRecord> {
    if batch_train.is_empty() || batch_eval.is_empty() {
        return Err(Error::Param("probe batches must be nonempty".into()));
    }
    let mut model = checkpoint.build_model()?;

    // Adversarial counterparts are generated against the unprobed model.
    let train_images: Vec<ImageSample> = match direction {
        Direction::CleanToClean | Direction::CleanToAdv => {
            batch_train.iter().map(|s| (*s).clone()).collect()
        }
        Direction::AdvToClean => adversarial_counterparts(&model, batch_train, attack, "probe-train")?,
    };
    let eval_images: Vec<ImageSample> = match direction {
        Direction::CleanToClean | Direction::AdvToClean => {
            batch_eval.iter().map(|s| (*s).clone()).collect()
        }
        Direction::CleanToAdv => adversarial_counterparts(&model, batch_eval, attack, "probe-eval")?,
    };

    let before = per_image_detection_losses(&model, &eval_images)?;

    let matches: Vec<_> = train_images
        .iter()
        .map(|s| model.match_sample(&s.boxes, &s.labels))
        .collect::<Result<_>>()?;
    for _ in 0..m {
        let mut g = Graph::new();
        let lb = model.bind_params(&mut g, true);
        let mut pixels = ndarray::Array4::<f64>::zeros({
            let s = train_images[0].pixels.shape();
            (train_images.len(), s[0], s[1], s[2])
        });
        for (i, s) in train_images.iter().enumerate() {
            pixels.index_axis_mut(ndarray::Axis(0), i).assign(&s.pixels);
        }
        let px = g.constant(pixels.into_dyn());
        let net = model.build_forward(&mut g, &lb, px, Mode::Eval, None, None, false);
        let det = model.detection_loss_vars(&mut g, &net, &matches, LossSelect::Both);
        let mut grads = g.backward(det.total);
        for i in 0..model.params.len() {
            if let Some(gt) = grads.take(lb.vars[i]) {
                let updated = model.params.value_at(i) - &gt.mapv(|v| v * learning_rate);
                model.params.set_at(i, updated);
            }
        }
    }

    let after = per_image_detection_losses(&model, &eval_images)?;
    Ok(ConflictRecord {
        direction,
        m,
        learning_rate,
        delta_loss: after.iter().zip(&before).map(|(a, b)| a - b).collect(),
    })
}

/// Density histogram of detection confidences at or above `threshold`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub density: Vec<f64>,
    pub total: usize,
}

/// Histogram of retained confidences over `[threshold, 1]`.
pub fn confidence_histogram(
    det_sets: &[DetectionSet],
    threshold: f64,
    bins: usize,
) -> Result<Histogram> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Param(format!("threshold {threshold} outside (0,1)")));
    }
    if bins < 2 {
        return Err(Error::Param(format!("bins {bins} must be >= 2")));
    }
    let width = (1.0 - threshold) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for det_set in det_sets {
        for d in det_set {
            if d.confidence >= threshold {
                let idx = (((d.confidence - threshold) / width) as usize).min(bins - 1);
                counts[idx] += 1;
                total += 1;
            }
        }
    }
    let density = counts
        .iter()
        .map(|&c| {
            if total == 0 {
                0.0
            } else {
                c as f64 / (total as f64 * width)
            }
        })
        .collect();
    Ok(Histogram {
        lo: threshold,
        hi: 1.0,
        counts,
        density,
        total,
    })
}

/// Labeled histograms for several conditions at once.
pub fn confidence_histograms(
    conditions: &[(String, Vec<DetectionSet>)],
    threshold: f64,
    bins: usize,
) -> Result<Vec<(String, Histogram)>> {
    conditions
        .iter()
        .map(|(label, sets)| Ok((label.clone(), confidence_histogram(sets, threshold, bins)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Detection;

    #[test]
    fn entanglement_identities() {
        let g = vec![0.3, -1.2, 2.0];
        assert!((gradient_entanglement(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 2.0];
        assert_eq!(gradient_entanglement(&a, &b).unwrap(), 0.0);
        // (1,1).(2,0) / |(2,0)|^2 = 2/4.
        assert_eq!(gradient_entanglement(&[1.0, 1.0], &[2.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn entanglement_is_linear_in_g1() {
        let g1 = vec![0.5, -1.0, 3.0];
        let g2 = vec![1.0, 2.0, -0.5];
        let r = gradient_entanglement(&g1, &g2).unwrap();
        let scaled: Vec<f64> = g1.iter().map(|v| 3.5 * v).collect();
        let r2 = gradient_entanglement(&scaled, &g2).unwrap();
        assert!((r2 - 3.5 * r).abs() < 1e-12);
    }

    #[test]
    fn entanglement_rejects_zero_normalizer_and_mismatch() {
        assert!(gradient_entanglement(&[1.0], &[0.0]).is_err());
        assert!(gradient_entanglement(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn det(conf: f64) -> Detection {
        Detection {
            box_xywh: crate::boxes::BoxXYWH::new(0.0, 0.0, 10.0, 10.0),
            class: 1,
            confidence: conf,
        }
    }

    #[test]
    fn histogram_hand_binning() {
        let sets = vec![vec![det(0.35), det(0.45), det(0.95)]];
        let h = confidence_histogram(&sets, 0.3, 2).unwrap();
        assert_eq!(h.counts, vec![2, 1]);
        assert_eq!(h.total, 3);
        // Density integrates to 1.
        let width = (1.0 - 0.3) / 2.0;
        let integral: f64 = h.density.iter().map(|d| d * width).sum();
        assert!((integral - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_empty_and_below_threshold() {
        let h = confidence_histogram(&[], 0.3, 4).unwrap();
        assert_eq!(h.total, 0);
        assert!(h.counts.iter().all(|&c| c == 0));
        let sets = vec![vec![det(0.1), det(0.29)]];
        let h = confidence_histogram(&sets, 0.3, 4).unwrap();
        assert_eq!(h.total, 0);
    }

    #[test]
    fn histogram_counts_sum_to_retained() {
        let sets = vec![vec![det(0.31), det(0.6), det(0.2)], vec![det(0.99)]];
        let h = confidence_histogram(&sets, 0.3, 5).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
    }
}
