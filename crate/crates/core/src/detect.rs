//! SSD-style detection substrate: anchors, ground-truth matching, offset
//! encoding, multibox losses and decoding with NMS.

use ndarray::{Array2, ArrayView1};

use crate::boxes::{iou, BoxXYWH, CenterBox};
use crate::error::{Error, Result};
use crate::graph::{cross_entropy, smooth_l1, ClsGroup, LocGroup};

/// One detection scale: cell grid plus the anchor sizes and aspect ratios
/// placed in every cell.
#[derive(Debug, Clone)]
pub struct ScaleSpec {
    /// (rows, cols)
    pub grid: (usize, usize),
    pub sizes: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl ScaleSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

/// All prior boxes of a model, in the exact row order of the head outputs.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors: Vec<CenterBox>,
    /// (center variance, size variance) used by encode/decode.
    pub variances: (f64, f64),
    /// (height, width) of the image frame; detections are clipped to it.
    pub image_size: (usize, usize),
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Default encode/decode variances (center, size).
pub const DEFAULT_VARIANCES: (f64, f64) = (0.1, 0.2);

/// Tile anchors over the scale grids: cells row-major, then sizes, then
/// ratios. Centers sit at cell centers.
pub fn build_anchors(image_size: (usize, usize), specs: &[ScaleSpec]) -> Result<AnchorSet> {
    if specs.is_empty() {
        return Err(Error::Param("empty scale specs".into()));
    }
    for s in specs {
        if s.grid.0 == 0 || s.grid.1 == 0 {
            return Err(Error::Param("grid dimensions must be >= 1".into()));
        }
        if s.sizes.is_empty() || s.ratios.is_empty() {
            return Err(Error::Param("sizes and ratios must be nonempty".into()));
        }
        if s.sizes.iter().any(|&v| v <= 0.0) || s.ratios.iter().any(|&v| v <= 0.0) {
            return Err(Error::Param("sizes and ratios must be positive".into()));
        }
    }
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut anchors = Vec::new();
    for s in specs {
        let (gh, gw) = s.grid;
        let cell_h = h / gh as f64;
        let cell_w = w / gw as f64;
        for gy in 0..gh {
            for gx in 0..gw {
                let cx = (gx as f64 + 0.5) * cell_w;
                let cy = (gy as f64 + 0.5) * cell_h;
                for &size in &s.sizes {
                    for &ratio in &s.ratios {
                        let aw = size * ratio.sqrt();
                        let ah = size / ratio.sqrt();
                        anchors.push(CenterBox::new(cx, cy, aw, ah));
                    }
                }
            }
        }
    }
    Ok(AnchorSet {
        anchors,
        variances: DEFAULT_VARIANCES,
        image_size,
    })
}

/// Per-anchor assignment produced by `match_anchors`.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// Ground-truth index per anchor; -1 means background.
    pub matched_gt: Vec<isize>,
    /// Encoded (dcx, dcy, dw, dh) regression targets; zero rows for negatives.
    pub target_offsets: Array2<f64>,
    /// Class per anchor; 0 is background.
    pub target_class: Vec<usize>,
}

impl MatchResult {
    pub fn positive_rows(&self) -> Vec<usize> {
        self.matched_gt
            .iter()
            .enumerate()
            .filter(|(_, &g)| g >= 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_positives(&self) -> usize {
        self.matched_gt.iter().filter(|&&g| g >= 0).count()
    }
}

/// Assign anchors to ground truth. Every gt claims its best-IoU anchor
/// regardless of threshold (lower gt index wins contested anchors, then lower
/// anchor index breaks IoU ties); remaining anchors are positive iff their
/// best IoU reaches `threshold`.
pub fn match_anchors(
    anchors: &AnchorSet,
    gts: &[BoxXYWH],
    labels: &[usize],
    threshold: f64,
) -> Result<MatchResult> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Param(format!("matching threshold {threshold} outside (0,1)")));
    }
    if gts.len() != labels.len() {
        return Err(Error::Param("gts and labels length mismatch".into()));
    }
    let a = anchors.len();
    let mut matched: Vec<isize> = vec![-1; a];
    let mut target_class = vec![0usize; a];
    let mut target_offsets = Array2::<f64>::zeros((a, 4));
    if gts.is_empty() {
        return Ok(MatchResult { matched_gt: matched, target_offsets, target_class });
    }

    let corner: Vec<BoxXYWH> = anchors.anchors.iter().map(|c| c.to_corner()).collect();
    let mut overlap = Array2::<f64>::zeros((a, gts.len()));
    for (ai, ab) in corner.iter().enumerate() {
        for (gi, gb) in gts.iter().enumerate() {
            overlap[[ai, gi]] = iou(ab, gb);
        }
    }

    // Forced best match per gt, in gt order over still-unclaimed anchors.
    let mut forced = vec![false; a];
    for gi in 0..gts.len() {
        let mut best = None;
        for ai in 0..a {
            if forced[ai] {
                continue;
            }
            let o = overlap[[ai, gi]];
            if best.map(|(_, b)| o > b).unwrap_or(true) {
                best = Some((ai, o));
            }
        }
        if let Some((ai, _)) = best {
            forced[ai] = true;
            matched[ai] = gi as isize;
        }
    }

    // Threshold pass for the rest: best gt per anchor, lowest gt index wins ties.
    for ai in 0..a {
        if forced[ai] {
            continue;
        }
        let mut best_gi = 0;
        let mut best = overlap[[ai, 0]];
        for gi in 1..gts.len() {
            if overlap[[ai, gi]] > best {
                best = overlap[[ai, gi]];
                best_gi = gi;
            }
        }
        if best >= threshold {
            matched[ai] = best_gi as isize;
        }
    }

    for ai in 0..a {
        if matched[ai] >= 0 {
            let gi = matched[ai] as usize;
            target_class[ai] = labels[gi];
            let offsets = encode_boxes(&gts[gi], &anchors.anchors[ai], anchors.variances)?;
            for j in 0..4 {
                target_offsets[[ai, j]] = offsets[j];
            }
        }
    }
    Ok(MatchResult { matched_gt: matched, target_offsets, target_class })
}

/// Encode a ground-truth corner box against an anchor as SSD offsets.
pub fn encode_boxes(gt: &BoxXYWH, anchor: &CenterBox, variances: (f64, f64)) -> Result<[f64; 4]> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::Param(format!("anchor dims {}x{} must be positive", anchor.w, anchor.h)));
    }
    let g = gt.to_center();
    Ok([
        (g.cx - anchor.cx) / (anchor.w * variances.0),
        (g.cy - anchor.cy) / (anchor.h * variances.0),
        (g.w / anchor.w).ln() / variances.1,
        (g.h / anchor.h).ln() / variances.1,
    ])
}

/// Inverse of `encode_boxes`.
pub fn decode_boxes(offsets: &[f64; 4], anchor: &CenterBox, variances: (f64, f64)) -> Result<BoxXYWH> {
    if anchor.w <= 0.0 || anchor.h <= 0.0 {
        return Err(Error::Param(format!("anchor dims {}x{} must be positive", anchor.w, anchor.h)));
    }
    let cx = anchor.cx + offsets[0] * variances.0 * anchor.w;
    let cy = anchor.cy + offsets[1] * variances.0 * anchor.h;
    let w = anchor.w * (offsets[2] * variances.1).exp();
    let h = anchor.h * (offsets[3] * variances.1).exp();
    Ok(CenterBox::new(cx, cy, w, h).to_corner())
}

/// Raw per-anchor predictions for one image.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// (A, C+1) logits, column 0 is background.
    pub class_logits: Array2<f64>,
    /// (A, 4) encoded offsets.
    pub box_offsets: Array2<f64>,
}

/// One decoded, NMS-filtered detection.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detection {
    pub box_xywh: BoxXYWH,
    pub class: usize,
    pub confidence: f64,
}

pub type DetectionSet = Vec<Detection>;

/// Smooth-L1 loss over positive anchors, divided by max(1, #pos).
pub fn localization_loss(output: &DetectorOutput, matched: &MatchResult) -> f64 {
    let rows = matched.positive_rows();
    let inv = 1.0 / (rows.len().max(1) as f64);
    let mut acc = 0.0;
    for &r in &rows {
        for j in 0..4 {
            acc += smooth_l1(output.box_offsets[[r, j]] - matched.target_offsets[[r, j]]);
        }
    }
    acc * inv
}

/// Pick the hard negatives for one image: background rows sorted by
/// background cross-entropy, capped at `ratio * #pos` (one negative when
/// there are no positives).
pub fn mine_hard_negatives(
    logits: &ndarray::ArrayView2<f64>,
    matched: &MatchResult,
    ratio: f64,
) -> Vec<usize> {
    let num_pos = matched.num_positives();
    let quota = if num_pos > 0 {
        (ratio * num_pos as f64).floor() as usize
    } else {
        1
    };
    let mut scored: Vec<(usize, f64)> = matched
        .matched_gt
        .iter()
        .enumerate()
        .filter(|(_, &g)| g < 0)
        .map(|(i, _)| (i, cross_entropy(&logits.row(i), 0)))
        .collect();
    // Stable by construction: sort by loss desc, index asc on ties.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(quota.min(scored.len()));
    scored.into_iter().map(|(i, _)| i).collect()
}

/// Cross-entropy over positives plus mined hard negatives, divided by
/// max(1, #pos).
pub fn classification_loss(output: &DetectorOutput, matched: &MatchResult, neg_pos_ratio: f64) -> f64 {
    let group = build_cls_group(&output.class_logits.view(), matched, neg_pos_ratio, 0);
    let mut acc = 0.0;
    for &(row, class) in &group.pos {
        acc += cross_entropy(&output.class_logits.row(row), class);
    }
    for &row in &group.neg {
        acc += cross_entropy(&output.class_logits.row(row), 0);
    }
    acc * group.inv_norm
}

/// Build the classification loss selection for one image whose rows start at
/// `row_offset` in a batched logit matrix.
pub fn build_cls_group(
    logits: &ndarray::ArrayView2<f64>,
    matched: &MatchResult,
    neg_pos_ratio: f64,
    row_offset: usize,
) -> ClsGroup {
    let pos: Vec<(usize, usize)> = matched
        .matched_gt
        .iter()
        .enumerate()
        .filter(|(_, &g)| g >= 0)
        .map(|(i, _)| (i + row_offset, matched.target_class[i]))
        .collect();
    let local = logits.slice(ndarray::s![row_offset..row_offset + matched.matched_gt.len(), ..]);
    let neg = mine_hard_negatives(&local, matched, neg_pos_ratio)
        .into_iter()
        .map(|i| i + row_offset)
        .collect();
    ClsGroup {
        inv_norm: 1.0 / (pos.len().max(1) as f64),
        pos,
        neg,
    }
}

/// Localization selection for one image at `row_offset` in a batched matrix.
pub fn build_loc_group(matched: &MatchResult, row_offset: usize) -> LocGroup {
    let rows: Vec<usize> = matched
        .matched_gt
        .iter()
        .enumerate()
        .filter(|(_, &g)| g >= 0)
        .map(|(i, _)| i + row_offset)
        .collect();
    LocGroup {
        inv_norm: 1.0 / (rows.len().max(1) as f64),
        rows,
    }
}

/// Row-wise softmax of an (A, K) logit matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Decode, threshold, per-class NMS and global top-k.
pub fn detect(
    output: &DetectorOutput,
    anchors: &AnchorSet,
    conf_threshold: f64,
    nms_iou: f64,
    top_k: usize,
) -> Result<DetectionSet> {
    if !(0.0 < conf_threshold && conf_threshold < 1.0) || !(0.0 < nms_iou && nms_iou < 1.0) {
        return Err(Error::Param("detect thresholds must lie in (0,1)".into()));
    }
    if output.class_logits.shape()[0] != anchors.len() {
        return Err(Error::Param(format!(
            "output rows {} != anchor count {}",
            output.class_logits.shape()[0],
            anchors.len()
        )));
    }
    let probs = softmax_rows(&output.class_logits);
    let num_classes = probs.shape()[1] - 1;
    let (h, w) = (anchors.image_size.0 as f64, anchors.image_size.1 as f64);
    let mut all = Vec::new();
    for class in 1..=num_classes {
        let mut cands: Vec<Detection> = Vec::new();
        for ai in 0..anchors.len() {
            let conf = probs[[ai, class]];
            if conf < conf_threshold {
                continue;
            }
            let offsets = [
                output.box_offsets[[ai, 0]],
                output.box_offsets[[ai, 1]],
                output.box_offsets[[ai, 2]],
                output.box_offsets[[ai, 3]],
            ];
            let decoded = decode_boxes(&offsets, &anchors.anchors[ai], anchors.variances)?;
            cands.push(Detection {
                box_xywh: decoded.clip(h, w),
                class,
                confidence: conf,
            });
        }
        all.extend(nms(cands, nms_iou));
    }
    all.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    all.truncate(top_k);
    Ok(all)
}

/// Greedy NMS: keep by descending confidence, drop anything overlapping a
/// kept box above `threshold` IoU. Order ties resolve by input position.
pub fn nms(mut dets: DetectionSet, threshold: f64) -> DetectionSet {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b)));
    let mut keep_flags = vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&j| iou(&dets[i].box_xywh, &dets[j].box_xywh) <= threshold) {
            keep_flags[i] = true;
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let mut out = Vec::with_capacity(kept.len());
    for (idx, d) in dets.drain(..).enumerate() {
        if keep_flags[idx] {
            out.push(d);
        }
    }
    out.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    out
}

/// Background cross-entropy of one logit row; exposed for loss tests.
pub fn background_ce(row: &ArrayView1<f64>) -> f64 {
    cross_entropy(row, 0)
}
