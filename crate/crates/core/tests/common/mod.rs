//! Shared test oracles: central finite differences and small brute-force
//! reference implementations, independent of the library's gradient and
//! matching code paths.

#![allow(dead_code)]

use robustdet_core::graph::Tensor;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

/// Check analytic gradients against central differences at chosen
/// coordinates. `eval` must rebuild the computation from scratch for each
/// perturbed leaf set.
pub fn fd_check(
    eval: &dyn Fn(&[Tensor]) -> f64,
    leaves: &[Tensor],
    grads: &[Option<Tensor>],
    picks: &[(usize, usize)],
    h: f64,
    tol: f64,
    label: &str,
) {
    for &(leaf, coord) in picks {
        let mut plus: Vec<Tensor> = leaves.to_vec();
        let mut minus: Vec<Tensor> = leaves.to_vec();
        {
            let p = plus[leaf].as_slice_mut().unwrap();
            p[coord] += h;
            let m = minus[leaf].as_slice_mut().unwrap();
            m[coord] -= h;
        }
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let analytic = grads[leaf]
            .as_ref()
            .map(|g| g.as_slice().unwrap()[coord])
            .unwrap_or(0.0);
        // Tiny gradients drown in FD round-off; compare absolutely there.
        if fd.abs() < 1e-7 && analytic.abs() < 1e-7 {
            continue;
        }
        assert!(
            rel_err(fd, analytic) < tol,
            "{label}: leaf {leaf} coord {coord}: fd {fd} vs analytic {analytic} (rel {})",
            rel_err(fd, analytic)
        );
    }
}

/// Deterministic coordinate picks spread over a tensor.
pub fn spread_coords(len: usize, count: usize) -> Vec<usize> {
    (0..count.min(len)).map(|i| i * len / count.min(len).max(1)).collect()
}
