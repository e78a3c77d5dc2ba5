//! Finite-difference verification of every differentiable op in the graph.

mod common;

use common::{fd_check, spread_coords};
use ndarray::{Array1, Array2, Array4, Array5, IxDyn};
use rand::Rng;
use robustdet_core::graph::{ClsGroup, ClsLossSpec, Graph, LocGroup, LocLossSpec, Tensor, Var};
use robustdet_core::rng::stream;

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut s = stream(seed, "fd-tensor", &[]);
    Tensor::from_shape_fn(IxDyn(shape), |_| s.random_range(-scale..scale))
}

/// Run one FD comparison: `build` assembles the loss from leaf nodes.
fn check(
    name: &str,
    leaves: Vec<Tensor>,
    picks_per_leaf: usize,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) {
    let assemble = |vals: &[Tensor]| -> (Graph, Var, Vec<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        (g, loss, vars)
    };
    let (g, loss, vars) = assemble(&leaves);
    let grads_raw = g.backward(loss);
    let grads: Vec<Option<Tensor>> = vars.iter().map(|v| grads_raw.get(*v).cloned()).collect();
    let eval = |vals: &[Tensor]| -> f64 {
        let (g, loss, _) = assemble(vals);
        g.scalar(loss)
    };
    let mut picks = Vec::new();
    for (i, leaf) in leaves.iter().enumerate() {
        for c in spread_coords(leaf.len(), picks_per_leaf) {
            picks.push((i, c));
        }
    }
    fd_check(&eval, &leaves, &grads, &picks, 1e-5, 1e-3, name);
}

#[test]
fn elementwise_chain_gradients() {
    // mean(relu(a*b - exp(0.3*a) + 2))
    let a = random_tensor(&[3, 4], 1, 1.5);
    let b = random_tensor(&[3, 4], 2, 1.5);
    check("elementwise", vec![a, b], 6, |g, v| {
        let prod = g.mul(v[0], v[1]);
        let scaled = g.scale(v[0], 0.3);
        let e = g.exp(scaled);
        let diff = g.sub(prod, e);
        let shifted = g.add_scalar(diff, 2.0);
        let r = g.relu(shifted);
        g.mean(r)
    });
}

#[test]
fn ln_and_sum_gradients() {
    let mut a = random_tensor(&[5], 3, 0.5);
    a.mapv_inplace(|v| v.abs() + 0.5);
    check("ln", vec![a], 5, |g, v| {
        let l = g.ln(v[0]);
        g.sum(l)
    });
}

#[test]
fn softmax_select_row_gradients() {
    let x = random_tensor(&[4, 5], 4, 2.0);
    check("softmax", vec![x], 8, |g, v| {
        let p = g.softmax(v[0]);
        let row = g.select_row(p, 2);
        let lp = g.ln(row);
        let s = g.mul(row, lp);
        let total = g.sum(s);
        g.scale(total, -1.0)
    });
}

#[test]
fn linear_and_pool_gradients() {
    let x = random_tensor(&[2, 3, 4, 4], 5, 1.0);
    let w = random_tensor(&[3, 4], 6, 0.8);
    let b = random_tensor(&[4], 7, 0.3);
    check("linear", vec![x, w, b], 6, |g, v| {
        let pooled = g.global_avg_pool(v[0]);
        let y = g.linear(pooled, v[1], v[2]);
        let sq = g.mul(y, y);
        g.mean(sq)
    });
}

#[test]
fn conv_gradients() {
    let x = random_tensor(&[2, 3, 6, 6], 8, 1.0);
    let w = random_tensor(&[4, 3, 3, 3], 9, 0.5);
    let b = random_tensor(&[4], 10, 0.2);
    for stride in [1usize, 2] {
        let (xs, ws, bs) = (x.clone(), w.clone(), b.clone());
        check(&format!("conv s{stride}"), vec![xs, ws, bs], 6, move |g, v| {
            let y = g.conv(v[0], v[1], v[2], stride, 1);
            let sq = g.mul(y, y);
            g.mean(sq)
        });
    }
}

#[test]
fn conv_transpose_gradients() {
    let x = random_tensor(&[2, 3, 4, 4], 11, 1.0);
    let w = random_tensor(&[3, 2, 4, 4], 12, 0.4);
    let b = random_tensor(&[2], 13, 0.2);
    check("conv_transpose", vec![x, w, b], 6, |g, v| {
        let y = g.conv_transpose(v[0], v[1], v[2], 2, 1);
        let sq = g.mul(y, y);
        g.mean(sq)
    });
}

#[test]
fn aaconv_gradients_including_pi() {
    let m = 3;
    let x = random_tensor(&[2, 2, 5, 5], 14, 1.0);
    let w = random_tensor(&[m, 4, 2, 3, 3], 15, 0.5);
    let b = random_tensor(&[m, 4], 16, 0.2);
    // pi rows on the simplex (FD perturbs off it; the op is linear in pi, so
    // the directional derivative is still exact).
    let pi = {
        let mut s = stream(17, "pi", &[]);
        let mut p = Array2::<f64>::zeros((2, m));
        for mut row in p.rows_mut() {
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = s.random_range(0.1..1.0);
                total += *v;
            }
            row.mapv_inplace(|v| v / total);
        }
        p.into_dyn()
    };
    check("aaconv", vec![x, w, b, pi], 6, |g, v| {
        let y = g.aaconv(v[0], v[1], v[2], v[3], 1, 1);
        let sq = g.mul(y, y);
        g.mean(sq)
    });
}

#[test]
fn aaconv_matches_mixture_of_plain_convs() {
    // Graph-level mixing linearity: aaconv == sum_i pi_i * conv(x, K_i).
    let mut s = stream(18, "aaconv-mix", &[]);
    for &m in &[1usize, 2, 4] {
        let x = Tensor::from_shape_fn(IxDyn(&[2, 3, 6, 6]), |_| s.random_range(-1.0..1.0));
        let w = Array5::from_shape_fn((m, 4, 3, 3, 3), |_| s.random_range(-0.7..0.7));
        let b = Array2::from_shape_fn((m, 4), |_| s.random_range(-0.3..0.3));
        let mut pi = Array2::<f64>::zeros((2, m));
        for mut row in pi.rows_mut() {
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = s.random_range(0.05..1.0);
                total += *v;
            }
            row.mapv_inplace(|v| v / total);
        }

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone().into_dyn());
        let bv = g.constant(b.clone().into_dyn());
        let pv = g.constant(pi.clone().into_dyn());
        let mixed = g.aaconv(xv, wv, bv, pv, 1, 1);
        let mixed_val = g.value(mixed).clone();

        let mut expected = Tensor::zeros(mixed_val.raw_dim());
        for i in 0..m {
            let ki = w.index_axis(ndarray::Axis(0), i).to_owned();
            let bi: Array1<f64> = b.index_axis(ndarray::Axis(0), i).to_owned();
            let mut g2 = Graph::new();
            let xv2 = g2.constant(x.clone());
            let kv = g2.constant(ki.into_dyn());
            let bv2 = g2.constant(bi.into_dyn());
            let yi = g2.conv(xv2, kv, bv2, 1, 1);
            let yi_val = g2.value(yi).clone();
            let y4 = yi_val.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let mut e4 = expected.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for n in 0..2 {
                let mut en = e4.index_axis_mut(ndarray::Axis(0), n);
                en.scaled_add(pi[[n, i]], &y4.index_axis(ndarray::Axis(0), n));
            }
        }
        let denom = expected.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        let diff = (&mixed_val - &expected).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff / denom < 1e-4, "m={m}: rel {}", diff / denom);
    }
}

#[test]
fn head_rows_and_concat_gradients() {
    let x1 = random_tensor(&[2, 6, 4, 4], 19, 1.0); // 2 anchors x 3 cols
    let x2 = random_tensor(&[2, 6, 2, 2], 20, 1.0);
    check("head_rows", vec![x1, x2], 6, |g, v| {
        let r1 = g.head_rows(v[0], 2, 3);
        let r2 = g.head_rows(v[1], 2, 3);
        let all = g.concat_rows(&[r1, r2], 2);
        let sq = g.mul(all, all);
        g.mean(sq)
    });
}

#[test]
fn cls_loss_gradients() {
    let logits = random_tensor(&[12, 4], 21, 2.0);
    let spec = ClsLossSpec {
        groups: vec![
            ClsGroup {
                pos: vec![(0, 2), (3, 1)],
                neg: vec![1, 4],
                inv_norm: 0.5,
            },
            ClsGroup {
                pos: vec![(7, 3)],
                neg: vec![6, 8, 11],
                inv_norm: 1.0,
            },
        ],
        inv_groups: 0.5,
    };
    check("cls_loss", vec![logits], 12, move |g, v| g.cls_loss(v[0], spec.clone()));
}

#[test]
fn loc_loss_gradients_both_branches() {
    // Offsets straddle the smooth-L1 breakpoint; keep FD points away from
    // |d| = 1 kinks.
    let mut offsets = random_tensor(&[6, 4], 22, 0.6);
    {
        let s = offsets.as_slice_mut().unwrap();
        s[0] = 2.3; // linear branch
        s[5] = -1.7;
    }
    let targets = Array2::<f64>::zeros((6, 4));
    let spec = LocLossSpec {
        groups: vec![LocGroup {
            rows: vec![0, 1, 2],
            inv_norm: 1.0 / 3.0,
        }],
        targets,
        inv_groups: 1.0,
    };
    check("loc_loss", vec![offsets], 12, move |g, v| g.loc_loss(v[0], spec.clone()));
}

#[test]
fn gradients_skip_constant_subgraphs() {
    // Backward with pixels as the only grad leaf must not produce grads for
    // constants, and must still produce correct pixel grads.
    let x = random_tensor(&[1, 2, 4, 4], 23, 1.0);
    let w = random_tensor(&[3, 2, 3, 3], 24, 0.5);
    let b = random_tensor(&[3], 25, 0.1);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(b.clone());
    let y = g.conv(xv, wv, bv, 1, 1);
    let sq = g.mul(y, y);
    let loss = g.mean(sq);
    let grads = g.backward(loss);
    assert!(grads.get(wv).is_none());
    assert!(grads.get(bv).is_none());
    assert!(grads.get(xv).is_some());

    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let xv = g.leaf(vals[0].clone());
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        let y = g.conv(xv, wv, bv, 1, 1);
        let sq = g.mul(y, y);
        let loss = g.mean(sq);
        g.scalar(loss)
    };
    let grads_vec = vec![grads.get(xv).cloned()];
    let picks: Vec<(usize, usize)> = spread_coords(x.len(), 6).into_iter().map(|c| (0, c)).collect();
    fd_check(&eval, &[x], &grads_vec, &picks, 1e-5, 1e-3, "pixel-only");
}
