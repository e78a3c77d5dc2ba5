//! The detector itself: a 6-block plain convolutional backbone (no batch
//! norm), three detection scales at strides 8/16/32, mixed-kernel convolutions
//! from the split point onward, the discriminator that produces the mixing
//! weights, and the optional Gaussian feature head with its reconstruction
//! decoder.

use std::collections::HashMap;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::aaconv::KernelBank;
use crate::aid::MixtureWeights;
use crate::cfr::GaussianFeature;
use crate::detect::{
    build_cls_group, build_loc_group, AnchorSet, DetectionSet, DetectorOutput, MatchResult,
    ScaleSpec,
};
use crate::error::{Error, Result};
use crate::graph::{conv, ClsLossSpec, Graph, LocLossSpec, Tensor, Var};
use crate::rng;

/// Forward mode: training samples the Gaussian feature, eval uses the mean
/// and is fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which trainable architecture to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "at")]
    At,
    #[serde(rename = "robustdet")]
    RobustDet,
    #[serde(rename = "robustdet-cfr")]
    RobustDetCfr,
}

impl Variant {
    /// Kernel banks plus discriminator-driven mixing.
    pub fn uses_aaconv(self) -> bool {
        matches!(self, Variant::RobustDet | Variant::RobustDetCfr)
    }

    /// Gaussian feature head and reconstruction decoder.
    pub fn uses_cfr(self) -> bool {
        matches!(self, Variant::RobustDetCfr)
    }

    /// Whether training runs the adversarial stage.
    pub fn trains_adversarially(self) -> bool {
        !matches!(self, Variant::Standard)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "at" => Ok(Variant::At),
            "robustdet" => Ok(Variant::RobustDet),
            "robustdet-cfr" => Ok(Variant::RobustDetCfr),
            other => Err(Error::Param(format!("unknown variant \"{other}\""))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Standard => "standard",
            Variant::At => "at",
            Variant::RobustDet => "robustdet",
            Variant::RobustDetCfr => "robustdet-cfr",
        };
        f.write_str(s)
    }
}

/// Architecture hyperparameters. Image sides must be multiples of 32 so the
/// three detection grids are exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub num_classes: usize,
    pub variant: Variant,
    /// Bank size M; forced to 1 for variants without mixed kernels.
    pub kernel_bank: usize,
    pub backbone_channels: [usize; 6],
    pub aid_channels: [usize; 4],
    pub decoder_channels: [usize; 3],
    /// One anchor size per detection scale.
    pub anchor_sizes: [f64; 3],
    pub anchor_ratios: Vec<f64>,
    pub matching_threshold: f64,
    pub neg_pos_ratio: f64,
    pub nms_iou: f64,
    pub conf_floor: f64,
    pub top_k: usize,
    pub variances: (f64, f64),
}

impl ModelConfig {
    /// Defaults scaled to the image size (anchor sizes at 25/40/60 percent of
    /// the short side).
    pub fn default_for(image_size: (usize, usize), num_classes: usize, variant: Variant) -> Self {
        let base = image_size.0.min(image_size.1) as f64;
        ModelConfig {
            image_size,
            num_classes,
            variant,
            kernel_bank: if variant.uses_aaconv() { 4 } else { 1 },
            backbone_channels: [12, 24, 32, 48, 64, 64],
            aid_channels: [8, 16, 24, 32],
            decoder_channels: [32, 16, 8],
            anchor_sizes: [0.25 * base, 0.40 * base, 0.60 * base],
            anchor_ratios: vec![1.0, 2.0, 0.5],
            matching_threshold: 0.5,
            neg_pos_ratio: 3.0,
            nms_iou: 0.45,
            conf_floor: 0.01,
            top_k: 200,
            variances: crate::detect::DEFAULT_VARIANCES,
        }
    }

    /// Small 32x32 configuration for fast tests.
    pub fn tiny(variant: Variant) -> Self {
        let mut cfg = Self::default_for((32, 32), 2, variant);
        cfg.backbone_channels = [4, 6, 8, 10, 12, 12];
        cfg.aid_channels = [4, 4, 4, 4];
        cfg.decoder_channels = [8, 6, 4];
        cfg.kernel_bank = if variant.uses_aaconv() { 2 } else { 1 };
        cfg.anchor_ratios = vec![1.0, 0.5];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 32 || w < 32 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Param(format!("image size {h}x{w} must be a multiple of 32")));
        }
        if self.num_classes == 0 {
            return Err(Error::Param("num_classes must be >= 1".into()));
        }
        if self.kernel_bank == 0 {
            return Err(Error::Param("kernel bank must be >= 1".into()));
        }
        if !self.variant.uses_aaconv() && self.kernel_bank != 1 {
            return Err(Error::Param("static variants require kernel_bank = 1".into()));
        }
        if self.backbone_channels.iter().any(|&c| c == 0)
            || self.aid_channels.iter().any(|&c| c == 0)
            || self.decoder_channels.iter().any(|&c| c == 0)
        {
            return Err(Error::Param("channel counts must be positive".into()));
        }
        if self.anchor_sizes.iter().any(|&s| s <= 0.0) {
            return Err(Error::Param("anchor sizes must be positive".into()));
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|&r| r <= 0.0) {
            return Err(Error::Param("anchor ratios must be positive".into()));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_ratios.len()
    }

    pub fn scale_specs(&self) -> Vec<ScaleSpec> {
        let (h, w) = self.image_size;
        [8usize, 16, 32]
            .iter()
            .zip(self.anchor_sizes.iter())
            .map(|(&stride, &size)| ScaleSpec {
                grid: (h / stride, w / stride),
                sizes: vec![size],
                ratios: self.anchor_ratios.clone(),
            })
            .collect()
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        let mut set = crate::detect::build_anchors(self.image_size, &self.scale_specs())?;
        set.variances = self.variances;
        Ok(set)
    }
}

/// Named parameter tensors in fixed registration order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn push(&mut self, name: &str, value: Tensor) {
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.values[self.idx(name)]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.names.iter().zip(self.values.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn set_at(&mut self, i: usize, value: Tensor) {
        assert_eq!(self.values[i].shape(), value.shape(), "param shape change");
        self.values[i] = value;
    }

    pub fn replace_all(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} params, got {}",
                self.names.len(),
                entries.len()
            )));
        }
        for (name, value) in entries {
            let i = *self
                .index
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected param {name}")))?;
            if self.values[i].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "param {name} shape {:?} != expected {:?}",
                    value.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = value;
        }
        Ok(())
    }
}

/// Bound graph leaves, aligned with the parameter store.
pub struct LeafBinding {
    pub vars: Vec<Var>,
}

/// Handles into a built forward graph.
pub struct NetGraph {
    pub images: usize,
    /// (N*A, C+1)
    pub cls_rows: Var,
    /// (N*A, 4)
    pub loc_rows: Var,
    /// (N, M) mixing weights when the variant uses them.
    pub pi: Option<Var>,
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
    pub recon: Option<Var>,
}

/// Outcome of the public single-image forward.
pub struct ForwardResult {
    pub output: DetectorOutput,
    pub pi: MixtureWeights,
    pub gaussian: Option<GaussianFeature>,
    pub reconstruction: Option<Array3<f64>>,
}

/// Which detection loss to assemble on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelect {
    Cls,
    Loc,
    Both,
}

pub struct DetLossVars {
    pub cls: Option<Var>,
    pub loc: Option<Var>,
    /// cls + loc (or the single selected term).
    pub total: Var,
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub anchors: AnchorSet,
}

impl DetectorModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let anchors = config.anchors()?;
        let mut params = ParamStore::new();
        let mut stream = rng::stream(seed, "init", &[]);
        let c = config.backbone_channels;
        let m = config.kernel_bank;
        let k = config.num_classes + 1;
        let apc = config.anchors_per_cell();

        fn he_tensor(stream: &mut rand_chacha::ChaCha12Rng, dims: &[usize], fan_in: usize, scale: f64) -> ArrayD<f64> {
            let std = (2.0 / fan_in as f64).sqrt() * scale;
            ArrayD::from_shape_fn(IxDyn(dims), |_| rng::normal(stream) * std)
        }
        fn conv_init(
            params: &mut ParamStore,
            stream: &mut rand_chacha::ChaCha12Rng,
            name: &str,
            o: usize,
            i: usize,
            ks: usize,
            scale: f64,
        ) {
            let w = he_tensor(stream, &[o, i, ks, ks], i * ks * ks, scale);
            params.push(&format!("{name}.w"), w);
            params.push(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[o])));
        }
        fn tconv_init(params: &mut ParamStore, stream: &mut rand_chacha::ChaCha12Rng, name: &str, i: usize, o: usize) {
            let w = he_tensor(stream, &[i, o, 4, 4], i * 16, 1.0);
            params.push(&format!("{name}.w"), w);
            params.push(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[o])));
        }
        fn bank_init(params: &mut ParamStore, stream: &mut rand_chacha::ChaCha12Rng, name: &str, m: usize, o: usize, i: usize) {
            let w = he_tensor(stream, &[m, o, i, 3, 3], i * 9, 1.0);
            params.push(&format!("{name}.w"), w);
            params.push(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[m, o])));
        }

        conv_init(&mut params, &mut stream, "backbone.b1", c[0], 3, 3, 1.0);
        conv_init(&mut params, &mut stream, "backbone.b2", c[1], c[0], 3, 1.0);
        conv_init(&mut params, &mut stream, "backbone.b3", c[2], c[1], 3, 1.0);
        conv_init(&mut params, &mut stream, "backbone.b4", c[3], c[2], 3, 1.0);

        if config.variant.uses_cfr() {
            conv_init(&mut params, &mut stream, "cfr.mu", c[3], c[3], 3, 1.0);
            // Small weights so sigma starts near 1 (logvar near 0).
            conv_init(&mut params, &mut stream, "cfr.logvar", c[3], c[3], 3, 0.01);
            let d = config.decoder_channels;
            tconv_init(&mut params, &mut stream, "decoder.t1", c[3], d[0]);
            tconv_init(&mut params, &mut stream, "decoder.t2", d[0], d[1]);
            tconv_init(&mut params, &mut stream, "decoder.t3", d[1], d[2]);
            conv_init(&mut params, &mut stream, "decoder.out", 3, d[2], 3, 1.0);
        }

        bank_init(&mut params, &mut stream, "neck.b5", m, c[4], c[3]);
        bank_init(&mut params, &mut stream, "neck.b6", m, c[5], c[4]);
        for (scale, in_ch) in [(1usize, c[3]), (2, c[4]), (3, c[5])] {
            bank_init(&mut params, &mut stream, &format!("head.cls{scale}"), m, apc * k, in_ch);
            bank_init(&mut params, &mut stream, &format!("head.loc{scale}"), m, apc * 4, in_ch);
        }

        if config.variant.uses_aaconv() {
            let a = config.aid_channels;
            conv_init(&mut params, &mut stream, "aid.c1", a[0], 3, 3, 1.0);
            conv_init(&mut params, &mut stream, "aid.c2", a[1], a[0], 3, 1.0);
            conv_init(&mut params, &mut stream, "aid.c3", a[2], a[1], 3, 1.0);
            conv_init(&mut params, &mut stream, "aid.c4", a[3], a[2], 3, 1.0);
            let w = he_tensor(&mut stream, &[a[3], m], a[3], 1.0);
            params.push("aid.fc.w", w);
            params.push("aid.fc.b", ArrayD::zeros(IxDyn(&[m])));
        }

        Ok(DetectorModel { config, params, anchors })
    }

    /// Layer names in registration order, with their parameter names.
    pub fn layers(&self) -> Vec<(String, Vec<String>)> {
        let mut layers: Vec<(String, Vec<String>)> = Vec::new();
        for name in self.params.names() {
            let layer = name.rsplit_once('.').map(|(l, _)| l.to_string()).unwrap();
            match layers.last_mut() {
                Some((last, names)) if *last == layer => names.push(name.clone()),
                _ => layers.push((layer, vec![name.clone()])),
            }
        }
        layers
    }

    /// FNV-1a hash over all parameter names and bytes; used by tests and the
    /// no-mutation guarantees.
    pub fn params_hash(&self) -> u64 {
        let mut acc = 0xcbf29ce484222325;
        for (name, value) in self.params.iter() {
            acc = rng::fnv1a64(name.as_bytes(), acc);
            for v in value.iter() {
                acc = rng::fnv1a64(&v.to_le_bytes(), acc);
            }
        }
        acc
    }

    /// View a kernel bank (e.g. "neck.b5") as a `KernelBank`.
    pub fn kernel_bank(&self, layer: &str) -> Result<KernelBank> {
        let w = self.params.get(&format!("{layer}.w"));
        let b = self.params.get(&format!("{layer}.b"));
        if w.ndim() != 5 {
            return Err(Error::Param(format!("{layer} is not a kernel bank")));
        }
        KernelBank::new(
            w.clone().into_dimensionality().unwrap(),
            b.clone().into_dimensionality().unwrap(),
        )
    }

    pub fn bind_params(&self, g: &mut Graph, trainable: bool) -> LeafBinding {
        let vars = self
            .params
            .values
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        LeafBinding { vars }
    }

    pub(crate) fn pv(&self, lb: &LeafBinding, name: &str) -> Var {
        lb.vars[self.params.idx(name)]
    }

    fn conv_block(&self, g: &mut Graph, lb: &LeafBinding, x: Var, layer: &str, stride: usize) -> Var {
        let w = self.pv(lb, &format!("{layer}.w"));
        let b = self.pv(lb, &format!("{layer}.b"));
        let y = g.conv(x, w, b, stride, 1);
        g.relu(y)
    }

    fn aaconv_layer(
        &self,
        g: &mut Graph,
        lb: &LeafBinding,
        x: Var,
        pi: Var,
        layer: &str,
        stride: usize,
    ) -> Var {
        let w = self.pv(lb, &format!("{layer}.w"));
        let b = self.pv(lb, &format!("{layer}.b"));
        g.aaconv(x, w, b, pi, stride, 1)
    }

    /// Discriminator subgraph: scaled pixels -> (N, M) mixture weights.
    pub fn build_aid(&self, g: &mut Graph, lb: &LeafBinding, x01: Var) -> Var {
        let a1 = self.conv_block(g, lb, x01, "aid.c1", 2);
        let a2 = self.conv_block(g, lb, a1, "aid.c2", 2);
        let a3 = self.conv_block(g, lb, a2, "aid.c3", 2);
        let a4 = self.conv_block(g, lb, a3, "aid.c4", 2);
        let pooled = g.global_avg_pool(a4);
        let w = self.pv(lb, "aid.fc.w");
        let b = self.pv(lb, "aid.fc.b");
        let logits = g.linear(pooled, w, b);
        g.softmax(logits)
    }

    /// Assemble the full forward graph for a (N,3,H,W) pixel node.
    ///
    /// `pi_override` replaces the discriminator output (used for uniform
    /// mixing during clean pretraining and for the explicit-pi API).
    /// `noise` must be supplied in train mode when the variant has the
    /// Gaussian head; it is one standard-normal tensor shaped like mu.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        lb: &LeafBinding,
        pixels: Var,
        mode: Mode,
        pi_override: Option<Var>,
        noise: Option<&Tensor>,
        want_recon: bool,
    ) -> NetGraph {
        let images = g.value(pixels).shape()[0];
        let x01 = g.scale(pixels, 1.0 / 255.0);
        let h1 = self.conv_block(g, lb, x01, "backbone.b1", 1);
        let h2 = self.conv_block(g, lb, h1, "backbone.b2", 2);
        let h3 = self.conv_block(g, lb, h2, "backbone.b3", 2);
        let h4 = self.conv_block(g, lb, h3, "backbone.b4", 2);

        let (feat, mu, logvar) = if self.config.variant.uses_cfr() {
            let wmu = self.pv(lb, "cfr.mu.w");
            let bmu = self.pv(lb, "cfr.mu.b");
            let mu = g.conv(h4, wmu, bmu, 1, 1);
            let wlv = self.pv(lb, "cfr.logvar.w");
            let blv = self.pv(lb, "cfr.logvar.b");
            let logvar = g.conv(h4, wlv, blv, 1, 1);
            let feat = match mode {
                Mode::Eval => mu,
                Mode::Train => {
                    let eps = g.constant(noise.expect("train mode needs a noise tensor").clone());
                    let half = g.scale(logvar, 0.5);
                    let sigma = g.exp(half);
                    let scaled = g.mul(sigma, eps);
                    g.add(mu, scaled)
                }
            };
            (feat, Some(mu), Some(logvar))
        } else {
            (h4, None, None)
        };

        let recon = if want_recon && self.config.variant.uses_cfr() {
            let t1w = self.pv(lb, "decoder.t1.w");
            let t1b = self.pv(lb, "decoder.t1.b");
            let t1 = g.conv_transpose(feat, t1w, t1b, 2, 1);
            let t1 = g.relu(t1);
            let t2w = self.pv(lb, "decoder.t2.w");
            let t2b = self.pv(lb, "decoder.t2.b");
            let t2 = g.conv_transpose(t1, t2w, t2b, 2, 1);
            let t2 = g.relu(t2);
            let t3w = self.pv(lb, "decoder.t3.w");
            let t3b = self.pv(lb, "decoder.t3.b");
            let t3 = g.conv_transpose(t2, t3w, t3b, 2, 1);
            let t3 = g.relu(t3);
            let ow = self.pv(lb, "decoder.out.w");
            let ob = self.pv(lb, "decoder.out.b");
            Some(g.conv(t3, ow, ob, 1, 1))
        } else {
            None
        };

        let pi = if self.config.variant.uses_aaconv() {
            Some(match pi_override {
                Some(v) => v,
                None => self.build_aid(g, lb, x01),
            })
        } else {
            // Static variants are banks of size 1 mixed with weight 1.
            Some(match pi_override {
                Some(v) => v,
                None => g.constant(ndarray::Array2::<f64>::ones((images, 1)).into_dyn()),
            })
        };
        let pi_var = pi.unwrap();

        let h5 = self.aaconv_layer(g, lb, feat, pi_var, "neck.b5", 2);
        let h5 = g.relu(h5);
        let h6 = self.aaconv_layer(g, lb, h5, pi_var, "neck.b6", 2);
        let h6 = g.relu(h6);

        let apc = self.config.anchors_per_cell();
        let k = self.config.num_classes + 1;
        let mut cls_parts = Vec::new();
        let mut loc_parts = Vec::new();
        for (scale, src) in [(1usize, feat), (2, h5), (3, h6)] {
            let cls_map = self.aaconv_layer(g, lb, src, pi_var, &format!("head.cls{scale}"), 1);
            cls_parts.push(g.head_rows(cls_map, apc, k));
            let loc_map = self.aaconv_layer(g, lb, src, pi_var, &format!("head.loc{scale}"), 1);
            loc_parts.push(g.head_rows(loc_map, apc, 4));
        }
        let cls_rows = g.concat_rows(&cls_parts, images);
        let loc_rows = g.concat_rows(&loc_parts, images);

        NetGraph {
            images,
            cls_rows,
            loc_rows,
            pi: self.config.variant.uses_aaconv().then_some(pi_var),
            mu,
            logvar,
            recon,
        }
    }

    /// Batch detection loss on an existing graph: per-image normalization by
    /// positive count, batch mean across images. Hard negatives are mined
    /// from the current logit values and held fixed for the gradient.
    pub fn detection_loss_vars(
        &self,
        g: &mut Graph,
        net: &NetGraph,
        matches: &[MatchResult],
        select: LossSelect,
    ) -> DetLossVars {
        assert_eq!(matches.len(), net.images);
        let a = self.anchors.len();
        let inv_groups = 1.0 / matches.len().max(1) as f64;

        let cls = if select != LossSelect::Loc {
            let logits_val = g
                .value(net.cls_rows)
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let groups = matches
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    build_cls_group(&logits_val.view(), m, self.config.neg_pos_ratio, i * a)
                })
                .collect();
            Some(g.cls_loss(net.cls_rows, ClsLossSpec { groups, inv_groups }))
        } else {
            None
        };

        let loc = if select != LossSelect::Cls {
            let mut targets = Array2::<f64>::zeros((matches.len() * a, 4));
            let mut groups = Vec::with_capacity(matches.len());
            for (i, m) in matches.iter().enumerate() {
                groups.push(build_loc_group(m, i * a));
                for (row, &gt) in m.matched_gt.iter().enumerate() {
                    if gt >= 0 {
                        for j in 0..4 {
                            targets[[i * a + row, j]] = m.target_offsets[[row, j]];
                        }
                    }
                }
            }
            Some(g.loc_loss(net.loc_rows, LocLossSpec { groups, targets, inv_groups }))
        } else {
            None
        };

        let total = match (cls, loc) {
            (Some(c), Some(l)) => g.add(c, l),
            (Some(c), None) => c,
            (None, Some(l)) => l,
            (None, None) => unreachable!(),
        };
        DetLossVars { cls, loc, total }
    }

    fn check_pixels(&self, pixels: &Array3<f64>) -> Result<()> {
        let (h, w) = self.config.image_size;
        if pixels.shape() != [3, h, w] {
            return Err(Error::Param(format!(
                "pixels shape {:?}, model expects [3, {h}, {w}]",
                pixels.shape()
            )));
        }
        Ok(())
    }

    /// Single-image forward. In train mode with the Gaussian head the feature
    /// is sampled using `noise_seed`; eval mode is deterministic.
    pub fn forward(
        &self,
        pixels: &Array3<f64>,
        pi: Option<&MixtureWeights>,
        mode: Mode,
        noise_seed: u64,
    ) -> Result<ForwardResult> {
        self.check_pixels(pixels)?;
        if let Some(p) = pi {
            p.check_simplex()?;
            let expect = if self.config.variant.uses_aaconv() {
                self.config.kernel_bank
            } else {
                1
            };
            if p.len() != expect {
                return Err(Error::Param(format!(
                    "pi has {} entries, model expects {expect}",
                    p.len()
                )));
            }
        }
        let mut g = Graph::new();
        let lb = self.bind_params(&mut g, false);
        let px = g.constant(pixels.clone().insert_axis(Axis(0)).into_dyn());
        let pi_override = pi.map(|p| {
            let arr = Array2::from_shape_vec((1, p.len()), p.as_slice().to_vec()).unwrap();
            g.constant(arr.into_dyn())
        });
        let noise = if mode == Mode::Train && self.config.variant.uses_cfr() {
            let (h, w) = self.config.image_size;
            let shape = [1, self.config.backbone_channels[3], h / 8, w / 8];
            let mut stream = rng::stream(noise_seed, "cfr-noise", &[]);
            Some(crate::cfr::noise_like(&shape, &mut stream))
        } else {
            None
        };
        let want_recon = mode == Mode::Train && self.config.variant.uses_cfr();
        let net = self.build_forward(&mut g, &lb, px, mode, pi_override, noise.as_ref(), want_recon);

        let output = self.extract_output(&g, &net, 0);
        let pi_out = match net.pi {
            Some(v) => MixtureWeights(
                g.value(v)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .row(0)
                    .to_vec(),
            ),
            None => MixtureWeights(vec![1.0]),
        };
        let gaussian = match (net.mu, net.logvar) {
            (Some(mu), Some(lv)) => {
                let mu3 = first_image_3d(g.value(mu));
                let sigma3 = first_image_3d(g.value(lv)).mapv(|s| (0.5 * s).exp());
                Some(GaussianFeature::new(mu3, sigma3)?)
            }
            _ => None,
        };
        let reconstruction = net.recon.map(|r| first_image_3d(g.value(r)));
        Ok(ForwardResult {
            output,
            pi: pi_out,
            gaussian,
            reconstruction,
        })
    }

    /// Rows of image `i` from a built graph, as a `DetectorOutput`.
    pub fn extract_output(&self, g: &Graph, net: &NetGraph, image: usize) -> DetectorOutput {
        let a = self.anchors.len();
        let cls = g
            .value(net.cls_rows)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .slice(ndarray::s![image * a..(image + 1) * a, ..])
            .to_owned();
        let loc = g
            .value(net.loc_rows)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .slice(ndarray::s![image * a..(image + 1) * a, ..])
            .to_owned();
        DetectorOutput {
            class_logits: cls,
            box_offsets: loc,
        }
    }

    /// Discriminator output for one image.
    pub fn aid_forward(&self, pixels: &Array3<f64>) -> Result<MixtureWeights> {
        if !self.config.variant.uses_aaconv() {
            return Err(Error::Param(format!(
                "variant {} has no discriminator",
                self.config.variant
            )));
        }
        self.check_pixels(pixels)?;
        let mut g = Graph::new();
        let lb = self.bind_params(&mut g, false);
        let px = g.constant(pixels.clone().insert_axis(Axis(0)).into_dyn());
        let x01 = g.scale(px, 1.0 / 255.0);
        let pi = self.build_aid(&mut g, &lb, x01);
        Ok(MixtureWeights(
            g.value(pi)
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .row(0)
                .to_vec(),
        ))
    }

    /// Gaussian feature head on a split-point feature map (C3, H/8, W/8).
    pub fn cfr_encode(&self, h: &Array3<f64>) -> Result<GaussianFeature> {
        if !self.config.variant.uses_cfr() {
            return Err(Error::Param(format!(
                "variant {} has no Gaussian feature head",
                self.config.variant
            )));
        }
        let (ih, iw) = self.config.image_size;
        let expect = [self.config.backbone_channels[3], ih / 8, iw / 8];
        if h.shape() != expect {
            return Err(Error::Param(format!(
                "split feature shape {:?}, expected {:?}",
                h.shape(),
                expect
            )));
        }
        let run = |w: &Tensor, b: &Tensor| -> Array3<f64> {
            let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
            let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            conv::conv2d(&h.view(), &w4, Some(&b1), 1, 1)
        };
        let mu = run(self.params.get("cfr.mu.w"), self.params.get("cfr.mu.b"));
        let logvar = run(self.params.get("cfr.logvar.w"), self.params.get("cfr.logvar.b"));
        GaussianFeature::new(mu, logvar.mapv(|s| (0.5 * s).exp()))
    }

    /// Decode a feature map back to image shape (3, H, W).
    pub fn reconstruct(&self, z: &Array3<f64>) -> Result<Array3<f64>> {
        if !self.config.variant.uses_cfr() {
            return Err(Error::Param(format!(
                "variant {} has no decoder",
                self.config.variant
            )));
        }
        let (ih, iw) = self.config.image_size;
        let expect = [self.config.backbone_channels[3], ih / 8, iw / 8];
        if z.shape() != expect {
            return Err(Error::Param(format!(
                "feature shape {:?}, expected {:?}",
                z.shape(),
                expect
            )));
        }
        let tconv = |x: &Array3<f64>, layer: &str| -> Array3<f64> {
            let w = self
                .params
                .get(&format!("{layer}.w"))
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap();
            let b = self
                .params
                .get(&format!("{layer}.b"))
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            conv::conv_transpose2d(&x.view(), &w, Some(&b), 2, 1).mapv(|v| v.max(0.0))
        };
        let t1 = tconv(z, "decoder.t1");
        let t2 = tconv(&t1, "decoder.t2");
        let t3 = tconv(&t2, "decoder.t3");
        let w = self
            .params
            .get("decoder.out.w")
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap();
        let b = self
            .params
            .get("decoder.out.b")
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        Ok(conv::conv2d(&t3.view(), &w, Some(&b), 1, 1))
    }

    /// Eval forward plus decode/NMS with the configured thresholds.
    pub fn detect_image(&self, pixels: &Array3<f64>) -> Result<DetectionSet> {
        let fwd = self.forward(pixels, None, Mode::Eval, 0)?;
        crate::detect::detect(
            &fwd.output,
            &self.anchors,
            self.config.conf_floor,
            self.config.nms_iou,
            self.config.top_k,
        )
    }

    /// Match one sample's ground truth against the model anchors.
    pub fn match_sample(&self, boxes: &[crate::boxes::BoxXYWH], labels: &[usize]) -> Result<MatchResult> {
        crate::detect::match_anchors(&self.anchors, boxes, labels, self.config.matching_threshold)
    }
}

fn first_image_3d(t: &Tensor) -> Array3<f64> {
    t.view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .index_axis(Axis(0), 0)
        .to_owned()
}

/// Uniform mixing constant for clean pretraining: (N, M) rows of 1/M.
pub(crate) fn uniform_pi_node(g: &mut Graph, images: usize, m: usize) -> Var {
    g.constant(Array2::<f64>::from_elem((images, m), 1.0 / m as f64).into_dyn())
}

