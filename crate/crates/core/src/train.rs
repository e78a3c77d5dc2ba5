//! Adversarial training loop: clean pretraining followed by epochs that pair
//! every clean image with a fresh PGD counterpart, plus checkpointing with
//! bit-exact round-trips.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::aid::{triplet_loss_graph, SampleKind};
use crate::attack::{attack_batch, AttackConfig, AttackLoss};
use crate::data::{ImageSample, LoadedDataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::model::{uniform_pi_node, DetectorModel, LossSelect, Mode, ModelConfig, Variant};
use crate::rng;

/// Coefficients of the total loss: beta*(L_det + a*L_aid) + b*L_re + c*L_kld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 0.75, a: 3.0, b: 0.16, c: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("a", self.a), ("b", self.b), ("c", self.c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Param(format!("loss weight {name} = {v} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Weighted total loss; rejects non-finite components by name.
pub fn total_loss(l_det: f64, l_aid: f64, l_re: f64, l_kld: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_det", l_det), ("l_aid", l_aid), ("l_re", l_re), ("l_kld", l_kld)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(w.beta * (l_det + w.a * l_aid) + w.b * l_re + w.c * l_kld)
}

/// Full training configuration. `batch_size` counts the combined batch, so
/// the adversarial stage draws `batch_size / 2` clean images per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub clean_epochs: usize,
    /// Adversarial epochs (after pretraining).
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub attack: AttackConfig,
    /// Alternate the attacked loss (cls/loc) by step parity.
    pub alternate_attack: bool,
    /// Triplet margin gamma.
    pub margin: f64,
    pub loss_weights: LossWeights,
    pub cfr_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::RobustDet,
            clean_epochs: 10,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            attack: AttackConfig::default(),
            alternate_attack: true,
            margin: 0.6,
            loss_weights: LossWeights::default(),
            cfr_enabled: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        TrainConfig {
            variant,
            cfr_enabled: variant.uses_cfr(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Param(format!(
                "batch_size {} must be even and >= 2",
                self.batch_size
            )));
        }
        if self.cfr_enabled != self.variant.uses_cfr() {
            return Err(Error::Param(format!(
                "cfr_enabled = {} conflicts with variant {}",
                self.cfr_enabled, self.variant
            )));
        }
        if !(self.learning_rate >= 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Param("bad optimizer constants".into()));
        }
        if self.margin <= 0.0 {
            return Err(Error::Param(format!("margin {} must be positive", self.margin)));
        }
        self.attack.validate()?;
        self.loss_weights.validate()
    }

    /// Parse the flat `key = value` config format. Keys are exactly the
    /// config field names (nested fields dotted); unknown keys are errors.
    pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Validation(format!("config line {}: expected key = value", idx + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Validation(format!("config line {}: bad {what} \"{value}\"", idx + 1));
            match key {
                "variant" => cfg.variant = value.parse()?,
                "clean_epochs" => cfg.clean_epochs = value.parse().map_err(|_| bad("clean_epochs"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?,
                "momentum" => cfg.momentum = value.parse().map_err(|_| bad("momentum"))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?,
                "alternate_attack" => cfg.alternate_attack = value.parse().map_err(|_| bad("alternate_attack"))?,
                "margin" => cfg.margin = value.parse().map_err(|_| bad("margin"))?,
                "cfr_enabled" => cfg.cfr_enabled = value.parse().map_err(|_| bad("cfr_enabled"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "attack.loss_kind" => cfg.attack.loss_kind = value.parse()?,
                "attack.steps" => cfg.attack.steps = value.parse().map_err(|_| bad("attack.steps"))?,
                "attack.epsilon" => cfg.attack.epsilon = value.parse().map_err(|_| bad("attack.epsilon"))?,
                "attack.alpha" => cfg.attack.alpha = value.parse().map_err(|_| bad("attack.alpha"))?,
                "attack.random_start" => cfg.attack.random_start = value.parse().map_err(|_| bad("attack.random_start"))?,
                "attack.seed" => cfg.attack.seed = value.parse().map_err(|_| bad("attack.seed"))?,
                "loss_weights.beta" => cfg.loss_weights.beta = value.parse().map_err(|_| bad("loss_weights.beta"))?,
                "loss_weights.a" => cfg.loss_weights.a = value.parse().map_err(|_| bad("loss_weights.a"))?,
                "loss_weights.b" => cfg.loss_weights.b = value.parse().map_err(|_| bad("loss_weights.b"))?,
                "loss_weights.c" => cfg.loss_weights.c = value.parse().map_err(|_| bad("loss_weights.c"))?,
                other => {
                    return Err(Error::Validation(format!(
                        "config line {}: unknown key \"{other}\"",
                        idx + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    /// Inverse of `parse_config_str`.
    pub fn to_config_string(&self) -> String {
        format!(
            "variant = {}\nclean_epochs = {}\nepochs = {}\nbatch_size = {}\nlearning_rate = {}\n\
             momentum = {}\nweight_decay = {}\nalternate_attack = {}\nmargin = {}\ncfr_enabled = {}\nseed = {}\n\
             attack.loss_kind = {}\nattack.steps = {}\nattack.epsilon = {}\nattack.alpha = {}\n\
             attack.random_start = {}\nattack.seed = {}\n\
             loss_weights.beta = {}\nloss_weights.a = {}\nloss_weights.b = {}\nloss_weights.c = {}\n",
            self.variant,
            self.clean_epochs,
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.momentum,
            self.weight_decay,
            self.alternate_attack,
            self.margin,
            self.cfr_enabled,
            self.seed,
            self.attack.loss_kind,
            self.attack.steps,
            self.attack.epsilon,
            self.attack.alpha,
            self.attack.random_start,
            self.attack.seed,
            self.loss_weights.beta,
            self.loss_weights.a,
            self.loss_weights.b,
            self.loss_weights.c,
        )
    }
}

/// SGD with momentum; velocity buffers align with the parameter store.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(model: &DetectorModel) -> Self {
        Sgd {
            velocity: model
                .params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.raw_dim()))
                .collect(),
        }
    }

    /// v <- momentum*v + (g + wd*theta); theta <- theta - lr*v.
    /// Parameters without a gradient this step are left untouched.
    fn step(
        &mut self,
        model: &mut DetectorModel,
        grads: &mut crate::graph::Grads,
        binding: &crate::model::LeafBinding,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) {
        for i in 0..model.params.len() {
            let Some(g) = grads.take(binding.vars[i]) else { continue };
            let theta = model.params.value_at(i).clone();
            let v = &mut self.velocity[i];
            v.zip_mut_with(&g, |vi, gi| *vi = momentum * *vi + gi);
            if weight_decay != 0.0 {
                v.zip_mut_with(&theta, |vi, ti| *vi += weight_decay * ti);
            }
            let updated = &theta - &v.mapv(|vi| vi * lr);
            model.params.set_at(i, updated);
        }
    }
}

/// Loss components and bookkeeping for one optimizer step.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_det: f64,
    pub l_aid: f64,
    pub l_re: f64,
    pub l_kld: f64,
    pub total: f64,
    #[serde(skip)]
    pub grad_norm: f64,
    #[serde(skip)]
    pub attack_skipped: usize,
    #[serde(skip)]
    pub triplets: usize,
}

/// Where a step sits inside the schedule.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub epoch: usize,
    pub global_step: u64,
    pub adversarial: bool,
}

fn stack_pixels(images: &[&ImageSample]) -> Array4<f64> {
    let s = images[0].pixels.shape();
    let mut out = Array4::<f64>::zeros((images.len(), s[0], s[1], s[2]));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&img.pixels);
    }
    out
}

/// One optimizer step. In the adversarial stage each clean image in `batch`
/// is paired with its own PGD counterpart (alternating the attacked loss by
/// step parity); the combined batch shares one forward/backward pass.
pub fn train_step(
    model: &mut DetectorModel,
    opt: &mut Sgd,
    batch: &[&ImageSample],
    cfg: &TrainConfig,
    ctx: &StepContext,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let variant = cfg.variant;

    // Assemble the combined batch.
    let mut attack_skipped = 0usize;
    let mut adversarial_images: Vec<ImageSample> = Vec::new();
    if ctx.adversarial {
        let kind = if cfg.alternate_attack {
            if ctx.global_step % 2 == 0 {
                AttackLoss::Cls
            } else {
                AttackLoss::Loc
            }
        } else {
            cfg.attack.loss_kind
        };
        let attackable: Vec<&ImageSample> = batch.iter().copied().filter(|s| !s.boxes.is_empty()).collect();
        attack_skipped = batch.len() - attackable.len();
        if !attackable.is_empty() {
            let config = AttackConfig { loss_kind: kind, ..cfg.attack.clone() };
            let seeds: Vec<u64> = (0..attackable.len())
                .map(|i| rng::derive_seed(cfg.seed, "attack", &[ctx.global_step, i as u64]))
                .collect();
            let outcomes = attack_batch(model, &attackable, &config, &seeds)?;
            for (sample, outcome) in attackable.iter().zip(outcomes) {
                adversarial_images.push(ImageSample {
                    pixels: outcome.adversarial,
                    boxes: sample.boxes.clone(),
                    labels: sample.labels.clone(),
                });
            }
        }
    }

    let mut combined: Vec<&ImageSample> = batch.to_vec();
    combined.extend(adversarial_images.iter());
    let mut kinds = vec![SampleKind::Clean; batch.len()];
    kinds.extend(std::iter::repeat(SampleKind::Adversarial).take(adversarial_images.len()));

    // Reconstruction targets: each image's clean counterpart.
    let mut clean_targets: Vec<&ImageSample> = batch.to_vec();
    clean_targets.extend(batch.iter().copied().filter(|s| !s.boxes.is_empty()).take(adversarial_images.len()));

    let matches: Vec<_> = combined
        .iter()
        .map(|s| model.match_sample(&s.boxes, &s.labels))
        .collect::<Result<_>>()?;

    // Forward graph over the combined batch.
    let mut g = Graph::new();
    let lb = model.bind_params(&mut g, true);
    let px = g.constant(stack_pixels(&combined).into_dyn());
    let pi_override = if variant.uses_aaconv() && !ctx.adversarial {
        Some(uniform_pi_node(&mut g, combined.len(), model.config.kernel_bank))
    } else {
        None
    };
    let noise = if variant.uses_cfr() {
        let (h, w) = model.config.image_size;
        let shape = [combined.len(), model.config.backbone_channels[3], h / 8, w / 8];
        let mut stream = rng::stream(cfg.seed, "noise", &[ctx.global_step]);
        Some(crate::cfr::noise_like(&shape, &mut stream))
    } else {
        None
    };
    let net = model.build_forward(&mut g, &lb, px, Mode::Train, pi_override, noise.as_ref(), variant.uses_cfr());

    let det = model.detection_loss_vars(&mut g, &net, &matches, LossSelect::Both);
    let l_det = g.scalar(det.total);

    let (aid_var, triplets) = if variant.uses_aaconv() && ctx.adversarial {
        let seed = rng::derive_seed(cfg.seed, "triplet", &[ctx.global_step]);
        let (v, formed) = triplet_loss_graph(&mut g, net.pi.unwrap(), &kinds, cfg.margin, seed);
        (Some(v), formed)
    } else {
        (None, 0)
    };
    let l_aid = aid_var.map(|v| g.scalar(v)).unwrap_or(0.0);

    let (re_var, kld_var) = if variant.uses_cfr() {
        let recon = net.recon.expect("cfr forward provides reconstruction");
        let target = {
            let t = stack_pixels(&clean_targets).mapv(|v| v / 255.0);
            g.constant(t.into_dyn())
        };
        let diff = g.sub(recon, target);
        let sq = g.mul(diff, diff);
        let re = g.mean(sq);

        let mu = net.mu.unwrap();
        let logvar = net.logvar.unwrap();
        let mu2 = g.mul(mu, mu);
        let es = g.exp(logvar);
        let s1 = g.add(mu2, es);
        let s2 = g.sub(s1, logvar);
        let s3 = g.add_scalar(s2, -1.0);
        let mean = g.mean(s3);
        let kld = g.scale(mean, 0.5);
        (Some(re), Some(kld))
    } else {
        (None, None)
    };
    let l_re = re_var.map(|v| g.scalar(v)).unwrap_or(0.0);
    let l_kld = kld_var.map(|v| g.scalar(v)).unwrap_or(0.0);

    let total_value = total_loss(l_det, l_aid, l_re, l_kld, &cfg.loss_weights)?;

    // Total loss node mirroring `total_loss`.
    let w = &cfg.loss_weights;
    let mut total: Var = g.scale(det.total, w.beta);
    if let Some(aid) = aid_var {
        let scaled = g.scale(aid, w.beta * w.a);
        total = g.add(total, scaled);
    }
    if let Some(re) = re_var {
        let scaled = g.scale(re, w.b);
        total = g.add(total, scaled);
    }
    if let Some(kld) = kld_var {
        let scaled = g.scale(kld, w.c);
        total = g.add(total, scaled);
    }
    debug_assert!((g.scalar(total) - total_value).abs() < 1e-9);

    let mut grads = g.backward(total);
    let mut norm_sq = 0.0;
    for var in &lb.vars {
        if let Some(gt) = grads.get(*var) {
            norm_sq += gt.iter().map(|v| v * v).sum::<f64>();
        }
    }
    opt.step(model, &mut grads, &lb, cfg.learning_rate, cfg.momentum, cfg.weight_decay);

    Ok(StepMetrics {
        step: ctx.global_step,
        l_det,
        l_aid,
        l_re,
        l_kld,
        total: total_value,
        grad_norm: norm_sq.sqrt(),
        attack_skipped,
        triplets,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"RDET";

/// Everything needed to resume or evaluate a training run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Completed epochs (clean + adversarial).
    pub epochs_done: usize,
    pub global_step: u64,
    pub params: Vec<(String, Tensor)>,
    pub velocity: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(
        model: &DetectorModel,
        opt: &Sgd,
        train_config: &TrainConfig,
        epochs_done: usize,
        global_step: u64,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model_config: model.config.clone(),
            train_config: train_config.clone(),
            epochs_done,
            global_step,
            params: model.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
            velocity: model
                .params
                .names()
                .iter()
                .zip(&opt.velocity)
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    /// Instantiate the model with the stored parameters.
    pub fn build_model(&self) -> Result<DetectorModel> {
        let mut model = DetectorModel::new(self.model_config.clone(), 0)?;
        model.params.replace_all(self.params.clone())?;
        Ok(model)
    }

    /// Restore the optimizer buffers alongside `build_model`.
    pub fn build_optimizer(&self, model: &DetectorModel) -> Result<Sgd> {
        let mut opt = Sgd::new(model);
        for (name, tensor) in &self.velocity {
            let idx = model.params.names().iter().position(|n| n == name).ok_or_else(|| {
                Error::Checkpoint(format!("velocity for unknown param {name}"))
            })?;
            opt.velocity[idx] = tensor.clone();
        }
        Ok(opt)
    }

    pub fn content_hash(&self) -> u64 {
        let mut acc = 0xcbf29ce484222325u64;
        for (name, tensor) in self.params.iter().chain(self.velocity.iter()) {
            acc = rng::fnv1a64(name.as_bytes(), acc);
            for v in tensor.iter() {
                acc = rng::fnv1a64(&v.to_le_bytes(), acc);
            }
        }
        acc
    }

    /// Serialize to the versioned binary format plus a JSON config manifest
    /// next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&self.format_version.to_le_bytes());
        let model_json = serde_json::to_vec(&self.model_config).map_err(|e| Error::Json(e.to_string()))?;
        let train_json = serde_json::to_vec(&self.train_config).map_err(|e| Error::Json(e.to_string()))?;
        write_blob(&mut buf, &model_json);
        write_blob(&mut buf, &train_json);
        buf.extend_from_slice(&(self.epochs_done as u64).to_le_bytes());
        buf.extend_from_slice(&self.global_step.to_le_bytes());
        write_tensors(&mut buf, &self.params);
        write_tensors(&mut buf, &self.velocity);
        let checksum = rng::fnv1a64(&buf, 0xcbf29ce484222325);
        buf.extend_from_slice(&checksum.to_le_bytes());
        crate::data::atomic_write(path, &buf)?;

        let manifest = serde_json::json!({
            "format_version": self.format_version,
            "epochs_done": self.epochs_done,
            "global_step": self.global_step,
            "model_config": self.model_config,
            "train_config": self.train_config,
        });
        let manifest_path = PathBuf::from(format!("{}.json", path.display()));
        crate::data::atomic_write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest)
                .map_err(|e| Error::Json(e.to_string()))?
                .as_bytes(),
        )
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 {
            return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if rng::fnv1a64(body, 0xcbf29ce484222325) != stored {
            return Err(Error::Checkpoint("integrity check failed (truncated or corrupt)".into()));
        }
        let mut cur = Cursor { bytes: body, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} does not match supported version {CHECKPOINT_VERSION}"
            )));
        }
        let model_json = cur.blob()?;
        let train_json = cur.blob()?;
        let model_config: ModelConfig =
            serde_json::from_slice(&model_json).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let train_config: TrainConfig =
            serde_json::from_slice(&train_json).map_err(|e| Error::Checkpoint(format!("bad train config: {e}")))?;
        let epochs_done = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let global_step = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let params = read_tensors(&mut cur)?;
        let velocity = read_tensors(&mut cur)?;
        Ok(Checkpoint {
            format_version: version,
            model_config,
            train_config,
            epochs_done,
            global_step,
            params,
            velocity,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of checkpoint data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn blob(&mut self) -> Result<Vec<u8>> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        Ok(self.take(len)?.to_vec())
    }
}

fn write_blob(buf: &mut Vec<u8>, blob: &[u8]) {
    buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    buf.extend_from_slice(blob);
}

fn write_tensors(buf: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        write_blob(buf, name.as_bytes());
        buf.push(tensor.ndim() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        for v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_tensors(cur: &mut Cursor<'_>) -> Result<Vec<(String, Tensor)>> {
    let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(cur.blob()?)
            .map_err(|_| Error::Checkpoint("invalid parameter name".into()))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize);
        }
        let len = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        if len != dims.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!("tensor {name} length/shape mismatch")));
        }
        let raw = cur.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

#[derive(Serialize)]
struct MetricsLine {
    step: u64,
    l_det: f64,
    l_aid: f64,
    l_re: f64,
    l_kld: f64,
    total: f64,
}

fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Run the schedule: `clean_epochs` epochs of clean training (uniform mixing,
/// no discriminator loss), then `epochs` adversarial epochs. Checkpoints per
/// epoch under `out_dir`; an interrupted run resumes from the last one whose
/// configs match.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &LoadedDataset,
    out_dir: &Path,
) -> Result<Checkpoint> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.variant != cfg.variant {
        return Err(Error::Param(format!(
            "model variant {} != training variant {}",
            model_cfg.variant, cfg.variant
        )));
    }
    if data.images.is_empty() {
        return Err(Error::Param("dataset is empty".into()));
    }
    if model_cfg.num_classes != data.manifest.class_names.len() {
        return Err(Error::Param(format!(
            "model has {} classes, dataset has {}",
            model_cfg.num_classes,
            data.manifest.class_names.len()
        )));
    }
    if model_cfg.image_size != data.manifest.image_size {
        return Err(Error::Param(format!(
            "model image size {:?} != dataset {:?}",
            model_cfg.image_size, data.manifest.image_size
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let total_epochs = cfg.clean_epochs + cfg.epochs;

    // Resume from the newest epoch checkpoint with matching configs.
    let mut start_epoch = 0usize;
    let mut resumed: Option<Checkpoint> = None;
    for epoch in (1..=total_epochs).rev() {
        let path = checkpoint_path(out_dir, epoch);
        if path.exists() {
            if let Ok(ckpt) = Checkpoint::load(&path) {
                if ckpt.train_config == *cfg && ckpt.model_config == *model_cfg {
                    start_epoch = ckpt.epochs_done;
                    resumed = Some(ckpt);
                    break;
                }
            }
        }
    }

    let (mut model, mut opt, mut global_step) = match &resumed {
        Some(ckpt) => {
            log::info!("resuming from epoch {}", ckpt.epochs_done);
            let model = ckpt.build_model()?;
            let opt = ckpt.build_optimizer(&model)?;
            (model, opt, ckpt.global_step)
        }
        None => {
            let model = DetectorModel::new(model_cfg.clone(), cfg.seed)?;
            let opt = Sgd::new(&model);
            (model, opt, 0u64)
        }
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = if resumed.is_some() {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?
    } else {
        fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?
    };

    for epoch in start_epoch..total_epochs {
        let adversarial = epoch >= cfg.clean_epochs;
        let chunk = if adversarial { cfg.batch_size / 2 } else { cfg.batch_size };
        let mut order: Vec<usize> = (0..data.images.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut stream = rng::stream(cfg.seed, "shuffle", &[epoch as u64]);
            order.shuffle(&mut stream);
        }
        for indices in order.chunks(chunk) {
            // The triplet batch needs at least two clean images.
            if adversarial && indices.len() < 2 {
                continue;
            }
            let batch: Vec<&ImageSample> = indices.iter().map(|&i| &data.images[i]).collect();
            let ctx = StepContext { epoch, global_step, adversarial };
            let metrics = train_step(&mut model, &mut opt, &batch, cfg, &ctx)?;
            let line = MetricsLine {
                step: metrics.step,
                l_det: metrics.l_det,
                l_aid: metrics.l_aid,
                l_re: metrics.l_re,
                l_kld: metrics.l_kld,
                total: metrics.total,
            };
            serde_json::to_writer(&mut metrics_file, &line).map_err(|e| Error::Json(e.to_string()))?;
            metrics_file.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;
            global_step += 1;
        }
        let ckpt = Checkpoint::capture(&model, &opt, cfg, epoch + 1, global_step);
        ckpt.save(&checkpoint_path(out_dir, epoch + 1))?;
    }

    let finish = Checkpoint::capture(&model, &opt, cfg, total_epochs, global_step);
    finish.save(&out_dir.join("checkpoint.ckpt"))?;
    Ok(finish)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_values() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert!((total_loss(1.0, 0.0, 0.0, 0.0, &w).unwrap() - 0.75).abs() < 1e-12);
        // beta*a + b + c = 2.25 + 0.16 + 5 = 7.41
        assert!((total_loss(0.0, 1.0, 1.0, 1.0, &w).unwrap() - 7.41).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_linear_in_components() {
        let w = LossWeights::default();
        let coef = [w.beta, w.beta * w.a, w.b, w.c];
        for i in 0..4 {
            let mut args = [0.0; 4];
            args[i] = 1.0;
            let v = total_loss(args[0], args[1], args[2], args[3], &w).unwrap();
            assert!((v - coef[i]).abs() < 1e-12, "component {i}");
        }
    }

    #[test]
    fn total_loss_rejects_non_finite_naming_component() {
        let w = LossWeights::default();
        let err = total_loss(1.0, f64::NAN, 0.0, 0.0, &w).unwrap_err();
        assert!(err.to_string().contains("l_aid"), "{err}");
    }

    #[test]
    fn config_round_trip_and_unknown_key() {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 3;
        cfg.attack.steps = 5;
        cfg.loss_weights.b = 0.5;
        let text = cfg.to_config_string();
        let parsed = TrainConfig::parse_config_str(&text).unwrap();
        assert_eq!(parsed, cfg);

        let err = TrainConfig::parse_config_str("bogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }
}
