//! PGD detector attacks: iterated sign-gradient ascent on the classification
//! or localization loss inside the L-inf ball around the clean image,
//! intersected with the valid pixel range.

use ndarray::{Array3, Array4, Axis, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, LoadedDataset};
use crate::detect::MatchResult;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{DetectorModel, LossSelect, Mode};
use crate::rng;

/// Which detection loss the attack maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackLoss {
    #[serde(rename = "cls")]
    Cls,
    #[serde(rename = "loc")]
    Loc,
}

impl std::fmt::Display for AttackLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackLoss::Cls => "cls",
            AttackLoss::Loc => "loc",
        })
    }
}

impl std::str::FromStr for AttackLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(AttackLoss::Cls),
            "loc" => Ok(AttackLoss::Loc),
            other => Err(Error::Param(format!("unknown attack loss \"{other}\""))),
        }
    }
}

impl AttackLoss {
    pub(crate) fn select(self) -> LossSelect {
        match self {
            AttackLoss::Cls => LossSelect::Cls,
            AttackLoss::Loc => LossSelect::Loc,
        }
    }

    /// Condition label used in reports ("A_cls" / "A_loc").
    pub fn condition(self) -> &'static str {
        match self {
            AttackLoss::Cls => "A_cls",
            AttackLoss::Loc => "A_loc",
        }
    }
}

/// PGD configuration on the 0-255 pixel scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub loss_kind: AttackLoss,
    pub steps: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    /// PGD-20 with budget 8, step 2, random start; the training-time attack.
    fn default() -> Self {
        AttackConfig {
            loss_kind: AttackLoss::Cls,
            steps: 20,
            epsilon: 8.0,
            alpha: 2.0,
            random_start: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Param(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.steps > 0 && self.alpha <= 0.0 {
            return Err(Error::Param(format!("alpha {} must be > 0", self.alpha)));
        }
        Ok(())
    }

    pub fn with_loss(mut self, loss: AttackLoss) -> Self {
        self.loss_kind = loss;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

/// Clamp `x_adv` into the L-inf ball of radius `eps` around `x`, then into
/// the valid pixel range. Idempotent.
pub fn project(x_adv: &Array3<f64>, x: &Array3<f64>, eps: f64) -> Result<Array3<f64>> {
    if x_adv.shape() != x.shape() {
        return Err(Error::Param(format!(
            "shape mismatch {:?} vs {:?}",
            x_adv.shape(),
            x.shape()
        )));
    }
    let mut out = x_adv.clone();
    for (o, &c) in out.iter_mut().zip(x.iter()) {
        *o = o.clamp(c - eps, c + eps).clamp(0.0, 255.0);
    }
    Ok(out)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of one attacked image.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub adversarial: Array3<f64>,
    pub achieved_linf: f64,
    pub loss_clean: f64,
    pub loss_adversarial: f64,
}

/// Generic PGD loop over raw pixels: `grad` maps the current iterate to the
/// pixel gradient of the attacked loss. Exposed so the loop can be exercised
/// against closed-form losses.
pub fn pgd_iterate(
    x0: &Array3<f64>,
    config: &AttackConfig,
    mut grad: impl FnMut(&Array3<f64>) -> Result<Array3<f64>>,
) -> Result<Array3<f64>> {
    config.validate()?;
    if config.steps == 0 {
        return Ok(x0.clone());
    }
    let mut x = if config.random_start {
        let mut stream = rng::stream(config.seed, "pgd-start", &[]);
        let noised = x0.mapv(|v| v + stream.random_range(-config.epsilon..=config.epsilon));
        project(&noised, x0, config.epsilon)?
    } else {
        x0.clone()
    };
    for _ in 0..config.steps {
        let g = grad(&x)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pixel gradient during PGD".into()));
        }
        let stepped = ndarray::Zip::from(&x)
            .and(&g)
            .map_collect(|&xi, &gi| xi + config.alpha * sign(gi));
        x = project(&stepped, x0, config.epsilon)?;
    }
    Ok(x)
}

/// Attack a batch of images that share one attack config. Each image needs at
/// least one ground-truth box. Model parameters are read-only throughout.
pub(crate) fn attack_batch(
    model: &DetectorModel,
    samples: &[&ImageSample],
    config: &AttackConfig,
    image_seeds: &[u64],
) -> Result<Vec<AttackOutcome>> {
    config.validate()?;
    assert_eq!(samples.len(), image_seeds.len());
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    for s in samples {
        if s.boxes.is_empty() {
            return Err(Error::AttackInapplicable(
                "sample has no ground-truth boxes; the attacked loss is undefined".into(),
            ));
        }
    }
    let matches: Vec<MatchResult> = samples
        .iter()
        .map(|s| model.match_sample(&s.boxes, &s.labels))
        .collect::<Result<_>>()?;

    let originals: Vec<&Array3<f64>> = samples.iter().map(|s| &s.pixels).collect();
    let mut current: Vec<Array3<f64>> = if config.steps > 0 && config.random_start {
        originals
            .iter()
            .zip(image_seeds)
            .map(|(x0, &seed)| {
                let mut stream = rng::stream(seed, "pgd-start", &[]);
                let noised = x0.mapv(|v| v + stream.random_range(-config.epsilon..=config.epsilon));
                project(&noised, x0, config.epsilon)
            })
            .collect::<Result<_>>()?
    } else {
        originals.iter().map(|x| (*x).clone()).collect()
    };

    let loss_clean = batch_losses(model, &originals.iter().map(|x| (*x).clone()).collect::<Vec<_>>(), &matches, config.loss_kind)?;

    for _ in 0..config.steps {
        let mut g = Graph::new();
        let lb = model.bind_params(&mut g, false);
        let px = g.leaf(stack(&current).into_dyn());
        let net = model.build_forward(&mut g, &lb, px, Mode::Eval, None, None, false);
        let loss = model.detection_loss_vars(&mut g, &net, &matches, config.loss_kind.select());
        let grads = g.backward(loss.total);
        let gpx = grads
            .get(px)
            .ok_or_else(|| Error::NonFinite("missing pixel gradient".into()))?;
        if gpx.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pixel gradient during PGD".into()));
        }
        let g4 = gpx.view().into_dimensionality::<Ix4>().unwrap();
        for (i, x) in current.iter_mut().enumerate() {
            let gi = g4.index_axis(Axis(0), i);
            let stepped = ndarray::Zip::from(&*x)
                .and(&gi)
                .map_collect(|&xi, &gi| xi + config.alpha * sign(gi));
            *x = project(&stepped, originals[i], config.epsilon)?;
        }
    }

    let loss_adv = batch_losses(model, &current, &matches, config.loss_kind)?;
    Ok(current
        .into_iter()
        .enumerate()
        .map(|(i, adversarial)| {
            let achieved_linf = adversarial
                .iter()
                .zip(originals[i].iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            AttackOutcome {
                adversarial,
                achieved_linf,
                loss_clean: loss_clean[i],
                loss_adversarial: loss_adv[i],
            }
        })
        .collect())
}

/// Per-image attacked-loss values at the given pixels.
fn batch_losses(
    model: &DetectorModel,
    pixels: &[Array3<f64>],
    matches: &[MatchResult],
    loss: AttackLoss,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let lb = model.bind_params(&mut g, false);
    let px = g.constant(stack(pixels).into_dyn());
    let net = model.build_forward(&mut g, &lb, px, Mode::Eval, None, None, false);
    let mut out = Vec::with_capacity(pixels.len());
    for i in 0..pixels.len() {
        let output = model.extract_output(&g, &net, i);
        let v = match loss {
            AttackLoss::Cls => crate::detect::classification_loss(
                &output,
                &matches[i],
                model.config.neg_pos_ratio,
            ),
            AttackLoss::Loc => crate::detect::localization_loss(&output, &matches[i]),
        };
        out.push(v);
    }
    Ok(out)
}

fn stack(images: &[Array3<f64>]) -> Array4<f64> {
    let s = images[0].shape();
    let mut out = Array4::<f64>::zeros((images.len(), s[0], s[1], s[2]));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    out
}

/// PGD attack against one sample. The returned pixels satisfy
/// `|adv - clean|_inf <= eps` and lie in `[0, 255]`; model parameters are
/// untouched.
pub fn pgd_attack(
    model: &DetectorModel,
    sample: &ImageSample,
    config: &AttackConfig,
) -> Result<AttackOutcome> {
    let outcomes = attack_batch(model, &[sample], config, &[config.seed])?;
    Ok(outcomes.into_iter().next().unwrap())
}

/// One row of a step-sweep evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub map: f64,
    pub mean_linf: f64,
}

/// mAP under the same attack at increasing step counts (plot-ready).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub loss_kind: AttackLoss,
    pub epsilon: f64,
    pub rows: Vec<SweepRow>,
}

/// Evaluate mAP@0.5 under PGD with each step count in `steps_list`.
/// Sweeps run without random start so that steps = 0 reproduces the clean
/// evaluation exactly.
pub fn attack_sweep(
    model: &DetectorModel,
    data: &LoadedDataset,
    loss_kind: AttackLoss,
    steps_list: &[usize],
    epsilon: f64,
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(steps_list.len());
    for &steps in steps_list {
        let config = AttackConfig {
            loss_kind,
            steps,
            epsilon,
            alpha: 2.0,
            random_start: false,
            seed: 0,
        };
        let report = crate::eval::evaluate(model, data, Some(&config))?;
        rows.push(SweepRow {
            steps,
            map: report.map,
            mean_linf: report.mean_linf,
        });
    }
    Ok(SweepTable {
        loss_kind,
        epsilon,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(v: f64) -> Array3<f64> {
        Array3::from_elem((3, 4, 4), v)
    }

    #[test]
    fn project_is_identity_inside_the_ball() {
        let x = image(100.0);
        let x_adv = image(104.0);
        let p = project(&x_adv, &x, 8.0).unwrap();
        assert_eq!(p, x_adv);
    }

    #[test]
    fn project_budget_binds_before_pixel_ceiling() {
        let x = image(0.0);
        let x_adv = image(300.0);
        let p = project(&x_adv, &x, 8.0).unwrap();
        assert!(p.iter().all(|&v| v == 8.0));
    }

    #[test]
    fn project_pixel_ceiling_binds() {
        let x = image(250.0);
        let x_adv = image(260.0);
        let p = project(&x_adv, &x, 20.0).unwrap();
        assert!(p.iter().all(|&v| v == 255.0));
    }

    #[test]
    fn project_is_idempotent_and_nonexpansive() {
        let mut stream = crate::rng::stream(5, "proj", &[]);
        for _ in 0..200 {
            let x = Array3::from_shape_fn((3, 3, 3), |_| stream.random_range(0.0..255.0));
            let y = Array3::from_shape_fn((3, 3, 3), |_| stream.random_range(-50.0..305.0));
            let eps = stream.random_range(0.0..32.0);
            let p1 = project(&y, &x, eps).unwrap();
            let p2 = project(&p1, &x, eps).unwrap();
            assert_eq!(p1, p2);
            let d_before = (&y - &x).iter().map(|v| v.abs()).fold(0.0, f64::max);
            let d_after = (&p1 - &x).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(d_after <= d_before + 1e-12);
            assert!(d_after <= eps + 1e-12);
        }
    }

    #[test]
    fn zero_epsilon_returns_original_exactly() {
        let x0 = image(42.0);
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let out = pgd_iterate(&x0, &cfg, |_| Ok(image(1.0))).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn linear_loss_single_step_matches_hand_computation() {
        // L(x) = sum(w .* x) with fixed signs: one step of size 2 moves each
        // pixel by 2 * sign(w), then projects.
        let x0 = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y + x) as f64 * 10.0);
        let w = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            if (c + y + x) % 2 == 0 {
                0.5
            } else {
                -1.5
            }
        });
        let cfg = AttackConfig {
            loss_kind: AttackLoss::Cls,
            steps: 1,
            epsilon: 8.0,
            alpha: 2.0,
            random_start: false,
            seed: 0,
        };
        let out = pgd_iterate(&x0, &cfg, |_| Ok(w.clone())).unwrap();
        let expected = ndarray::Zip::from(&x0)
            .and(&w)
            .map_collect(|&xi, &wi| (xi + 2.0 * super::sign(wi)).clamp(0.0, 255.0));
        assert_eq!(out, expected);
    }
}
