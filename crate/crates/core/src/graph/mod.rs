//! Minimal reverse-mode autodiff over f64 tensors.
//!
//! A `Graph` is a define-by-run tape: each builder method evaluates its op
//! eagerly, records the node, and returns a `Var` handle. `backward` walks the
//! tape in reverse and hand-computed adjoints accumulate into parent slots.
//! Gradients are only propagated into subgraphs that can reach a grad-enabled
//! leaf, so e.g. an attack that only needs pixel gradients never pays for
//! filter gradients.

pub mod conv;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix4, Ix5, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node in a `Graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One selected positive anchor row for the classification loss.
#[derive(Debug, Clone)]
pub struct ClsGroup {
    /// (row index, target class) for positive rows; class 0 is background.
    pub pos: Vec<(usize, usize)>,
    /// Rows charged as background (after hard-negative mining).
    pub neg: Vec<usize>,
    /// 1 / max(1, #pos) for this image.
    pub inv_norm: f64,
}

/// Per-batch classification loss selection.
#[derive(Debug, Clone)]
pub struct ClsLossSpec {
    pub groups: Vec<ClsGroup>,
    /// 1 / number of images contributing (batch mean).
    pub inv_groups: f64,
}

#[derive(Debug, Clone)]
pub struct LocGroup {
    /// Positive rows for this image.
    pub rows: Vec<usize>,
    /// 1 / max(1, #pos) for this image.
    pub inv_norm: f64,
}

/// Per-batch localization loss selection; `targets` is row-aligned with the
/// offset matrix (rows outside any group are ignored).
#[derive(Debug, Clone)]
pub struct LocLossSpec {
    pub groups: Vec<LocGroup>,
    pub targets: Array2<f64>,
    pub inv_groups: f64,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SelectRow(Var, usize),
    Softmax(Var),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    AaConv {
        x: Var,
        w: Var,
        b: Var,
        pi: Var,
        stride: usize,
        pad: usize,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    HeadRows {
        x: Var,
        anchors: usize,
        k: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
        rows_per_image: Vec<usize>,
        images: usize,
    },
    ClsLoss {
        logits: Var,
        spec: ClsLossSpec,
    },
    LocLoss {
        offsets: Var,
        spec: LocLossSpec,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by `Graph::backward`, indexed by `Var`.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots[v.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::SelectRow(a, _)
            | Op::Softmax(a)
            | Op::GlobalAvgPool(a)
            | Op::HeadRows { x: a, .. }
            | Op::ClsLoss { logits: a, .. }
            | Op::LocLoss { offsets: a, .. } => self.needs(*a),
            Op::Linear { x, w, b } | Op::Conv { x, w, b, .. } | Op::ConvT { x, w, b, .. } => {
                self.needs(*x) || self.needs(*w) || self.needs(*b)
            }
            Op::AaConv { x, w, b, pi, .. } => {
                self.needs(*x) || self.needs(*w) || self.needs(*b) || self.needs(*pi)
            }
            Op::ConcatRows { parts, .. } => parts.iter().any(|p| self.needs(*p)),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = ndarray::arr0(self.value(a).sum()).into_dyn();
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let v = ndarray::arr0(self.value(a).sum() / n).into_dyn();
        self.push(v, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        self.push(v, Op::Reshape(a))
    }

    /// Row `i` of a 2-D node as a 1-D node.
    pub fn select_row(&mut self, a: Var, i: usize) -> Var {
        let v = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("select_row expects 2-D")
            .row(i)
            .to_owned()
            .into_dyn();
        self.push(v, Op::SelectRow(a, i))
    }

    /// Row-wise softmax of a 2-D node.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("softmax expects 2-D");
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(y.into_dyn(), Op::Softmax(a))
    }

    /// (N,C,H,W) -> (N,C) spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self
            .value(a)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("gap expects 4-D");
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut y = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                y[[ni, ci]] = x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum()
                    / (h * w) as f64;
            }
        }
        self.push(y.into_dyn(), Op::GlobalAvgPool(a))
    }

    /// y = x.w + b with x: (N,D), w: (D,K), b: (K).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xm = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let wm = self.value(w).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xm.shape()[1], wm.shape()[0], "linear inner dim");
        assert_eq!(wm.shape()[1], bv.len(), "linear bias dim");
        let mut y = xm.dot(&wm);
        for mut row in y.rows_mut() {
            row += &bv;
        }
        self.push(y.into_dyn(), Op::Linear { x, w, b })
    }

    /// Batched conv: x (N,C,H,W), w (O,C,kh,kw), b (O).
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.shape()[1], wv.shape()[1], "conv in-channels");
        assert_eq!(wv.shape()[0], bv.len(), "conv bias dim");
        let n = xv.shape()[0];
        let ho = conv::conv_out_dim(xv.shape()[2], wv.shape()[2], stride, pad);
        let wo = conv::conv_out_dim(xv.shape()[3], wv.shape()[3], stride, pad);
        let mut y = ndarray::Array4::<f64>::zeros((n, wv.shape()[0], ho, wo));
        for ni in 0..n {
            let xi = xv.index_axis(Axis(0), ni);
            let yi = conv::conv2d(&xi, &wv, Some(&bv), stride, pad);
            y.index_axis_mut(Axis(0), ni).assign(&yi);
        }
        self.push(y.into_dyn(), Op::Conv { x, w, b, stride, pad })
    }

    /// Mixed-kernel conv: per image n the effective kernel is
    /// sum_i pi[n,i] * w[i] (and likewise the bias).
    /// x (N,C,H,W), w (M,O,C,kh,kw), b (M,O), pi (N,M).
    pub fn aaconv(&mut self, x: Var, w: Var, b: Var, pi: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix5>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let pv = self.value(pi).view().into_dimensionality::<Ix2>().unwrap();
        let (m, o) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(bv.shape(), &[m, o], "aaconv bias bank shape");
        assert_eq!(pv.shape(), &[xv.shape()[0], m], "aaconv pi shape");
        assert_eq!(xv.shape()[1], wv.shape()[2], "aaconv in-channels");
        let n = xv.shape()[0];
        let ho = conv::conv_out_dim(xv.shape()[2], wv.shape()[3], stride, pad);
        let wo = conv::conv_out_dim(xv.shape()[3], wv.shape()[4], stride, pad);
        let mut y = ndarray::Array4::<f64>::zeros((n, o, ho, wo));
        for ni in 0..n {
            let (kn, bn) = mix_bank(&wv, &bv, &pv.row(ni));
            let xi = xv.index_axis(Axis(0), ni);
            let yi = conv::conv2d(&xi, &kn.view(), Some(&bn.view()), stride, pad);
            y.index_axis_mut(Axis(0), ni).assign(&yi);
        }
        self.push(
            y.into_dyn(),
            Op::AaConv {
                x,
                w,
                b,
                pi,
                stride,
                pad,
            },
        )
    }

    /// Batched transposed conv: x (N,C,H,W), w (C,O,kh,kw), b (O).
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(xv.shape()[1], wv.shape()[0], "convT in-channels");
        assert_eq!(wv.shape()[1], bv.len(), "convT bias dim");
        let n = xv.shape()[0];
        let ho = conv::conv_transpose_out_dim(xv.shape()[2], wv.shape()[2], stride, pad);
        let wo = conv::conv_transpose_out_dim(xv.shape()[3], wv.shape()[3], stride, pad);
        let mut y = ndarray::Array4::<f64>::zeros((n, wv.shape()[1], ho, wo));
        for ni in 0..n {
            let xi = xv.index_axis(Axis(0), ni);
            let yi = conv::conv_transpose2d(&xi, &wv, Some(&bv), stride, pad);
            y.index_axis_mut(Axis(0), ni).assign(&yi);
        }
        self.push(y.into_dyn(), Op::ConvT { x, w, b, stride, pad })
    }

    /// Rearrange a head map (N, A*K, H, W) into per-anchor rows (N*H*W*A, K),
    /// ordered image-major, then cell row-major, then anchor index.
    pub fn head_rows(&mut self, x: Var, anchors: usize, k: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(c, anchors * k, "head channel count");
        let mut y = Array2::<f64>::zeros((n * h * w * anchors, k));
        for ni in 0..n {
            for yy in 0..h {
                for xx in 0..w {
                    for a in 0..anchors {
                        let row = ((ni * h + yy) * w + xx) * anchors + a;
                        for kk in 0..k {
                            y[[row, kk]] = xv[[ni, a * k + kk, yy, xx]];
                        }
                    }
                }
            }
        }
        self.push(y.into_dyn(), Op::HeadRows { x, anchors, k })
    }

    /// Concatenate per-scale row blocks into one (N * sum(rows), K) matrix,
    /// grouped image-major: for each image all scales follow each other.
    pub fn concat_rows(&mut self, parts: &[Var], images: usize) -> Var {
        assert!(!parts.is_empty());
        let k = self.value(parts[0]).shape()[1];
        let rows_per_image: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = self.value(*p).shape();
                assert_eq!(s[1], k, "concat_rows column mismatch");
                assert_eq!(s[0] % images, 0, "concat_rows row mismatch");
                s[0] / images
            })
            .collect();
        let total: usize = rows_per_image.iter().sum();
        let mut y = Array2::<f64>::zeros((images * total, k));
        for ni in 0..images {
            let mut offset = ni * total;
            for (p, &rp) in parts.iter().zip(&rows_per_image) {
                let pv = self.value(*p).view().into_dimensionality::<Ix2>().unwrap();
                y.slice_mut(ndarray::s![offset..offset + rp, ..])
                    .assign(&pv.slice(ndarray::s![ni * rp..(ni + 1) * rp, ..]));
                offset += rp;
            }
        }
        self.push(
            y.into_dyn(),
            Op::ConcatRows {
                parts: parts.to_vec(),
                rows_per_image,
                images,
            },
        )
    }

    /// Hard-negative-mined cross-entropy over selected rows (batch mean).
    pub fn cls_loss(&mut self, logits: Var, spec: ClsLossSpec) -> Var {
        let lm = self
            .value(logits)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut total = 0.0;
        for g in &spec.groups {
            let mut acc = 0.0;
            for &(row, class) in &g.pos {
                acc += cross_entropy(&lm.row(row), class);
            }
            for &row in &g.neg {
                acc += cross_entropy(&lm.row(row), 0);
            }
            total += acc * g.inv_norm;
        }
        total *= spec.inv_groups;
        self.push(
            ndarray::arr0(total).into_dyn(),
            Op::ClsLoss { logits, spec },
        )
    }

    /// Smooth-L1 loss over positive rows (batch mean).
    pub fn loc_loss(&mut self, offsets: Var, spec: LocLossSpec) -> Var {
        let om = self
            .value(offsets)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut total = 0.0;
        for g in &spec.groups {
            let mut acc = 0.0;
            for &row in &g.rows {
                for j in 0..4 {
                    acc += smooth_l1(om[[row, j]] - spec.targets[[row, j]]);
                }
            }
            total += acc * g.inv_norm;
        }
        total *= spec.inv_groups;
        self.push(
            ndarray::arr0(total).into_dyn(),
            Op::LocLoss { offsets, spec },
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(ndarray::arr0(1.0).into_dyn());
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                slots[i] = None;
                continue;
            }
            let Some(gy) = slots[i].take() else { continue };
            self.propagate(i, &gy, &mut slots);
            if matches!(self.nodes[i].op, Op::Leaf) {
                slots[i] = Some(gy);
            }
        }
        Grads { slots }
    }

    fn propagate(&self, i: usize, gy: &Tensor, slots: &mut Vec<Option<Tensor>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(slots, *a, gy.clone());
                self.accumulate(slots, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(slots, *a, gy.clone());
                self.accumulate(slots, *b, -gy);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(slots, *a, gy * self.value(*b));
                }
                if self.needs(*b) {
                    self.accumulate(slots, *b, gy * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.accumulate(slots, *a, gy * *c),
            Op::AddScalar(a) => self.accumulate(slots, *a, gy.clone()),
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                self.accumulate(slots, *a, gy * y);
            }
            Op::Ln(a) => {
                let g = gy / self.value(*a);
                self.accumulate(slots, *a, g);
            }
            Op::Relu(a) => {
                let g = ndarray::Zip::from(gy)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(slots, *a, g);
            }
            Op::Sum(a) => {
                let g = Tensor::from_elem(self.value(*a).raw_dim(), gy.iter().next().copied().unwrap());
                self.accumulate(slots, *a, g);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let g = Tensor::from_elem(
                    self.value(*a).raw_dim(),
                    gy.iter().next().copied().unwrap() / n,
                );
                self.accumulate(slots, *a, g);
            }
            Op::Reshape(a) => {
                let g = gy
                    .clone()
                    .into_shape_with_order(self.value(*a).raw_dim())
                    .unwrap();
                self.accumulate(slots, *a, g);
            }
            Op::SelectRow(a, row) => {
                let mut g = Tensor::zeros(self.value(*a).raw_dim());
                let mut gm = g.view_mut().into_dimensionality::<Ix2>().unwrap();
                let gv = gy.view().into_dimensionality::<Ix1>().unwrap();
                gm.row_mut(*row).assign(&gv);
                self.accumulate(slots, *a, g);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap();
                let gm = gy.view().into_dimensionality::<Ix2>().unwrap();
                let mut g = Array2::<f64>::zeros(y.raw_dim());
                for (mut grow, (yrow, gyrow)) in
                    g.rows_mut().into_iter().zip(y.rows().into_iter().zip(gm.rows()))
                {
                    let dot = yrow.dot(&gyrow);
                    for j in 0..yrow.len() {
                        grow[j] = yrow[j] * (gyrow[j] - dot);
                    }
                }
                self.accumulate(slots, *a, g.into_dyn());
            }
            Op::GlobalAvgPool(a) => {
                let xs = self.value(*a).shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let gm = gy.view().into_dimensionality::<Ix2>().unwrap();
                let mut g = ndarray::Array4::<f64>::zeros((n, c, h, w));
                let inv = 1.0 / (h * w) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        g.index_axis_mut(Axis(0), ni)
                            .index_axis_mut(Axis(0), ci)
                            .fill(gm[[ni, ci]] * inv);
                    }
                }
                self.accumulate(slots, *a, g.into_dyn());
            }
            Op::Linear { x, w, b } => {
                let xm = self.value(*x).view().into_dimensionality::<Ix2>().unwrap();
                let wm = self.value(*w).view().into_dimensionality::<Ix2>().unwrap();
                let gm = gy.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*x) {
                    self.accumulate(slots, *x, gm.dot(&wm.t()).into_dyn());
                }
                if self.needs(*w) {
                    self.accumulate(slots, *w, xm.t().dot(&gm).into_dyn());
                }
                if self.needs(*b) {
                    self.accumulate(slots, *b, gm.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Conv { x, w, b, stride, pad } => {
                let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                let gv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let n = xv.shape()[0];
                let (kh, kw) = (wv.shape()[2], wv.shape()[3]);
                let mut gx = self
                    .needs(*x)
                    .then(|| ndarray::Array4::<f64>::zeros(xv.raw_dim()));
                let mut gw = self
                    .needs(*w)
                    .then(|| ndarray::Array4::<f64>::zeros(wv.raw_dim()));
                let mut gb = self.needs(*b).then(|| Array1::<f64>::zeros(wv.shape()[0]));
                for ni in 0..n {
                    let gyi = gv.index_axis(Axis(0), ni);
                    if let Some(gx) = gx.as_mut() {
                        let gi = conv::conv2d_backward_data(
                            &gyi,
                            &wv,
                            xv.shape()[2],
                            xv.shape()[3],
                            *stride,
                            *pad,
                        );
                        gx.index_axis_mut(Axis(0), ni).assign(&gi);
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xi = xv.index_axis(Axis(0), ni);
                        *gw += &conv::conv2d_backward_filter(&xi, &gyi, kh, kw, *stride, *pad);
                    }
                    if let Some(gb) = gb.as_mut() {
                        *gb += &conv::conv2d_backward_bias(&gyi);
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(slots, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    self.accumulate(slots, *w, gw.into_dyn());
                }
                if let Some(gb) = gb {
                    self.accumulate(slots, *b, gb.into_dyn());
                }
            }
            Op::AaConv {
                x,
                w,
                b,
                pi,
                stride,
                pad,
            } => {
                let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<Ix5>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                let pv = self.value(*pi).view().into_dimensionality::<Ix2>().unwrap();
                let gv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let (n, m) = (xv.shape()[0], wv.shape()[0]);
                let (kh, kw) = (wv.shape()[3], wv.shape()[4]);
                let mut gx = self
                    .needs(*x)
                    .then(|| ndarray::Array4::<f64>::zeros(xv.raw_dim()));
                let mut gw = self
                    .needs(*w)
                    .then(|| ndarray::Array5::<f64>::zeros(wv.raw_dim()));
                let mut gb = self.needs(*b).then(|| Array2::<f64>::zeros(bv.raw_dim()));
                let mut gpi = self.needs(*pi).then(|| Array2::<f64>::zeros(pv.raw_dim()));
                let want_filter_grads = gw.is_some() || gb.is_some() || gpi.is_some();
                for ni in 0..n {
                    let gyi = gv.index_axis(Axis(0), ni);
                    let xi = xv.index_axis(Axis(0), ni);
                    if let Some(gx) = gx.as_mut() {
                        let (kn, _) = mix_bank(&wv, &bv, &pv.row(ni));
                        let gi = conv::conv2d_backward_data(
                            &gyi,
                            &kn.view(),
                            xv.shape()[2],
                            xv.shape()[3],
                            *stride,
                            *pad,
                        );
                        gx.index_axis_mut(Axis(0), ni).assign(&gi);
                    }
                    if want_filter_grads {
                        let dkn = conv::conv2d_backward_filter(&xi, &gyi, kh, kw, *stride, *pad);
                        let dbn = conv::conv2d_backward_bias(&gyi);
                        for mi in 0..m {
                            let p = pv[[ni, mi]];
                            if let Some(gw) = gw.as_mut() {
                                let mut slot = gw.index_axis_mut(Axis(0), mi);
                                slot.scaled_add(p, &dkn);
                            }
                            if let Some(gb) = gb.as_mut() {
                                let mut slot = gb.index_axis_mut(Axis(0), mi);
                                slot.scaled_add(p, &dbn);
                            }
                            if let Some(gpi) = gpi.as_mut() {
                                let wk = wv.index_axis(Axis(0), mi);
                                let bk = bv.index_axis(Axis(0), mi);
                                let mut dot = 0.0;
                                for (a, b) in dkn.iter().zip(wk.iter()) {
                                    dot += a * b;
                                }
                                for (a, b) in dbn.iter().zip(bk.iter()) {
                                    dot += a * b;
                                }
                                gpi[[ni, mi]] += dot;
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(slots, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    self.accumulate(slots, *w, gw.into_dyn());
                }
                if let Some(gb) = gb {
                    self.accumulate(slots, *b, gb.into_dyn());
                }
                if let Some(gpi) = gpi {
                    self.accumulate(slots, *pi, gpi.into_dyn());
                }
            }
            Op::ConvT { x, w, b, stride, pad } => {
                let xv = self.value(*x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                let gv = gy.view().into_dimensionality::<Ix4>().unwrap();
                let n = xv.shape()[0];
                let (kh, kw) = (wv.shape()[2], wv.shape()[3]);
                let mut gx = self
                    .needs(*x)
                    .then(|| ndarray::Array4::<f64>::zeros(xv.raw_dim()));
                let mut gw = self
                    .needs(*w)
                    .then(|| ndarray::Array4::<f64>::zeros(wv.raw_dim()));
                let mut gb = self.needs(*b).then(|| Array1::<f64>::zeros(wv.shape()[1]));
                for ni in 0..n {
                    let gyi = gv.index_axis(Axis(0), ni);
                    if let Some(gx) = gx.as_mut() {
                        let gi = conv::conv_transpose2d_backward_data(&gyi, &wv, *stride, *pad);
                        gx.index_axis_mut(Axis(0), ni).assign(&gi);
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xi = xv.index_axis(Axis(0), ni);
                        *gw += &conv::conv_transpose2d_backward_filter(
                            &xi, &gyi, kh, kw, *stride, *pad,
                        );
                    }
                    if let Some(gb) = gb.as_mut() {
                        *gb += &conv::conv2d_backward_bias(&gyi);
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(slots, *x, gx.into_dyn());
                }
                if let Some(gw) = gw {
                    self.accumulate(slots, *w, gw.into_dyn());
                }
                if let Some(gb) = gb {
                    self.accumulate(slots, *b, gb.into_dyn());
                }
            }
            Op::HeadRows { x, anchors, k } => {
                let xs = self.value(*x).shape().to_vec();
                let (n, h, w) = (xs[0], xs[2], xs[3]);
                let gm = gy.view().into_dimensionality::<Ix2>().unwrap();
                let mut g = ndarray::Array4::<f64>::zeros((n, xs[1], h, w));
                for ni in 0..n {
                    for yy in 0..h {
                        for xx in 0..w {
                            for a in 0..*anchors {
                                let row = ((ni * h + yy) * w + xx) * anchors + a;
                                for kk in 0..*k {
                                    g[[ni, a * k + kk, yy, xx]] = gm[[row, kk]];
                                }
                            }
                        }
                    }
                }
                self.accumulate(slots, *x, g.into_dyn());
            }
            Op::ConcatRows {
                parts,
                rows_per_image,
                images,
            } => {
                let gm = gy.view().into_dimensionality::<Ix2>().unwrap();
                let total: usize = rows_per_image.iter().sum();
                for (pi_idx, (p, &rp)) in parts.iter().zip(rows_per_image).enumerate() {
                    if !self.needs(*p) {
                        continue;
                    }
                    let before: usize = rows_per_image[..pi_idx].iter().sum();
                    let mut g = Array2::<f64>::zeros((images * rp, gm.shape()[1]));
                    for ni in 0..*images {
                        let offset = ni * total + before;
                        g.slice_mut(ndarray::s![ni * rp..(ni + 1) * rp, ..])
                            .assign(&gm.slice(ndarray::s![offset..offset + rp, ..]));
                    }
                    self.accumulate(slots, *p, g.into_dyn());
                }
            }
            Op::ClsLoss { logits, spec } => {
                let lm = self
                    .value(*logits)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let scale = gy.iter().next().copied().unwrap() * spec.inv_groups;
                let mut g = Array2::<f64>::zeros(lm.raw_dim());
                for grp in &spec.groups {
                    let coef = scale * grp.inv_norm;
                    for &(row, class) in &grp.pos {
                        add_ce_grad(&mut g, &lm, row, class, coef);
                    }
                    for &row in &grp.neg {
                        add_ce_grad(&mut g, &lm, row, 0, coef);
                    }
                }
                self.accumulate(slots, *logits, g.into_dyn());
            }
            Op::LocLoss { offsets, spec } => {
                let om = self
                    .value(*offsets)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let scale = gy.iter().next().copied().unwrap() * spec.inv_groups;
                let mut g = Array2::<f64>::zeros(om.raw_dim());
                for grp in &spec.groups {
                    let coef = scale * grp.inv_norm;
                    for &row in &grp.rows {
                        for j in 0..4 {
                            let d = om[[row, j]] - spec.targets[[row, j]];
                            g[[row, j]] += coef * smooth_l1_grad(d);
                        }
                    }
                }
                self.accumulate(slots, *offsets, g.into_dyn());
            }
        }
    }

    fn accumulate(&self, slots: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut slots[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Per-image kernel/bias mixed from a bank with weights `pi`.
fn mix_bank(
    w: &ndarray::ArrayView5<f64>,
    b: &ndarray::ArrayView2<f64>,
    pi: &ndarray::ArrayView1<f64>,
) -> (ndarray::Array4<f64>, Array1<f64>) {
    let m = w.shape()[0];
    let mut kn = ndarray::Array4::<f64>::zeros((w.shape()[1], w.shape()[2], w.shape()[3], w.shape()[4]));
    let mut bn = Array1::<f64>::zeros(b.shape()[1]);
    for mi in 0..m {
        kn.scaled_add(pi[mi], &w.index_axis(Axis(0), mi));
        bn.scaled_add(pi[mi], &b.index_axis(Axis(0), mi));
    }
    (kn, bn)
}

/// Numerically stable -log softmax(logits)[target].
pub fn cross_entropy(logits: &ndarray::ArrayView1<f64>, target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn add_ce_grad(
    g: &mut Array2<f64>,
    logits: &ndarray::ArrayView2<f64>,
    row: usize,
    target: usize,
    coef: f64,
) {
    let lr = logits.row(row);
    let m = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = lr.iter().map(|&v| (v - m).exp()).sum();
    for j in 0..lr.len() {
        let p = (lr[j] - m).exp() / denom;
        g[[row, j]] += coef * (p - if j == target { 1.0 } else { 0.0 });
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}
