//! Mixed-kernel convolution: a bank of M kernels is collapsed into one
//! effective kernel by a convex combination before convolving, so an image
//! routed by the discriminator pays a single convolution per layer.

use ndarray::{Array1, Array2, Array3, Array4, Array5, Axis};

use crate::aid::MixtureWeights;
use crate::error::{Error, Result};
use crate::graph::conv;

/// Bank of M same-shaped kernels and biases.
#[derive(Debug, Clone)]
pub struct KernelBank {
    /// (M, O, C, kh, kw)
    pub kernels: Array5<f64>,
    /// (M, O)
    pub bias: Array2<f64>,
}

impl KernelBank {
    pub fn new(kernels: Array5<f64>, bias: Array2<f64>) -> Result<Self> {
        if kernels.shape()[0] == 0 {
            return Err(Error::Param("kernel bank must have M >= 1".into()));
        }
        if bias.shape() != [kernels.shape()[0], kernels.shape()[1]] {
            return Err(Error::Param(format!(
                "bias shape {:?} does not match bank {:?}",
                bias.shape(),
                kernels.shape()
            )));
        }
        Ok(Self { kernels, bias })
    }

    pub fn m(&self) -> usize {
        self.kernels.shape()[0]
    }
}

/// Collapse the bank into a single kernel and bias with weights `pi`.
pub fn combine_kernels(bank: &KernelBank, pi: &MixtureWeights) -> Result<(Array4<f64>, Array1<f64>)> {
    if pi.len() != bank.m() {
        return Err(Error::Param(format!(
            "pi has {} entries for a bank of {}",
            pi.len(),
            bank.m()
        )));
    }
    pi.check_simplex()?;
    let ks = bank.kernels.shape();
    let mut kernel = Array4::<f64>::zeros((ks[1], ks[2], ks[3], ks[4]));
    let mut bias = Array1::<f64>::zeros(ks[1]);
    for (i, &w) in pi.as_slice().iter().enumerate() {
        kernel.scaled_add(w, &bank.kernels.index_axis(Axis(0), i));
        bias.scaled_add(w, &bank.bias.index_axis(Axis(0), i));
    }
    Ok((kernel, bias))
}

/// Convolve one image with the pi-mixed kernel. Equals the pi-weighted sum of
/// per-kernel convolutions because convolution is linear in the kernel.
pub fn aaconv_forward(
    x: &Array3<f64>,
    bank: &KernelBank,
    pi: &MixtureWeights,
    stride: usize,
    padding: usize,
) -> Result<Array3<f64>> {
    let (kernel, bias) = combine_kernels(bank, pi)?;
    if x.shape()[0] != kernel.shape()[1] {
        return Err(Error::Param(format!(
            "input has {} channels, kernel expects {}",
            x.shape()[0],
            kernel.shape()[1]
        )));
    }
    Ok(conv::conv2d(
        &x.view(),
        &kernel.view(),
        Some(&bias.view()),
        stride,
        padding,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_bank(rng: &mut impl Rng, m: usize, o: usize, c: usize, k: usize) -> KernelBank {
        let kernels = Array5::from_shape_fn((m, o, c, k, k), |_| rng.random_range(-1.0..1.0));
        let bias = Array2::from_shape_fn((m, o), |_| rng.random_range(-0.5..0.5));
        KernelBank::new(kernels, bias).unwrap()
    }

    #[test]
    fn singleton_bank_returns_sole_kernel() {
        let mut rng = crate::rng::stream(1, "aaconv", &[]);
        let bank = random_bank(&mut rng, 1, 2, 3, 3);
        let (k, b) = combine_kernels(&bank, &MixtureWeights::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(k, bank.kernels.index_axis(Axis(0), 0).to_owned());
        assert_eq!(b, bank.bias.index_axis(Axis(0), 0).to_owned());
    }

    #[test]
    fn one_hot_pi_selects_exact_kernel() {
        let mut rng = crate::rng::stream(2, "aaconv", &[]);
        let bank = random_bank(&mut rng, 4, 2, 2, 3);
        let pi = MixtureWeights::new(vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let (k, _) = combine_kernels(&bank, &pi).unwrap();
        assert_eq!(k, bank.kernels.index_axis(Axis(0), 2).to_owned());
    }

    #[test]
    fn symmetric_kernels_cancel() {
        let mut rng = crate::rng::stream(3, "aaconv", &[]);
        let a = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-1.0..1.0));
        let mut kernels = Array5::zeros((2, 2, 2, 3, 3));
        kernels.index_axis_mut(Axis(0), 0).assign(&a);
        kernels.index_axis_mut(Axis(0), 1).assign(&(-&a));
        let mut bias = Array2::zeros((2, 2));
        bias.index_axis_mut(Axis(0), 0).fill(0.7);
        bias.index_axis_mut(Axis(0), 1).fill(-0.7);
        let bank = KernelBank::new(kernels, bias).unwrap();
        let (k, b) = combine_kernels(&bank, &MixtureWeights::new(vec![0.5, 0.5]).unwrap()).unwrap();
        assert!(k.iter().all(|&v| v.abs() < 1e-15));
        assert!(b.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn off_simplex_pi_is_rejected() {
        let mut rng = crate::rng::stream(4, "aaconv", &[]);
        let bank = random_bank(&mut rng, 2, 1, 1, 3);
        assert!(combine_kernels(&bank, &MixtureWeights(vec![0.7, 0.7])).is_err());
        assert!(combine_kernels(&bank, &MixtureWeights(vec![1.0])).is_err());
    }

    #[test]
    fn forward_equals_mixture_of_convolutions() {
        // Linearity in the kernel, checked for M in {1,2,4}.
        for (trial, &m) in [1usize, 2, 4].iter().enumerate() {
            let mut rng = crate::rng::stream(5, "aaconv-lin", &[trial as u64]);
            let bank = random_bank(&mut rng, m, 3, 2, 3);
            let x = Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(-1.0..1.0));
            let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let pi = MixtureWeights::new(raw.iter().map(|v| v / total).collect()).unwrap();
            let combined = aaconv_forward(&x, &bank, &pi, 1, 1).unwrap();
            let mut mixed = Array3::<f64>::zeros(combined.raw_dim());
            for i in 0..m {
                let ki = bank.kernels.index_axis(Axis(0), i).to_owned();
                let bi = bank.bias.index_axis(Axis(0), i).to_owned();
                let yi = conv::conv2d(&x.view(), &ki.view(), Some(&bi.view()), 1, 1);
                mixed.scaled_add(pi.as_slice()[i], &yi);
            }
            let denom = mixed.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
            let diff = (&combined - &mixed).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff / denom < 1e-4, "m={m} rel diff {}", diff / denom);
        }
    }

    #[test]
    fn zero_input_yields_broadcast_bias() {
        let mut rng = crate::rng::stream(6, "aaconv", &[]);
        let bank = random_bank(&mut rng, 2, 3, 2, 3);
        let pi = MixtureWeights::new(vec![0.25, 0.75]).unwrap();
        let x = Array3::<f64>::zeros((2, 5, 5));
        let y = aaconv_forward(&x, &bank, &pi, 1, 1).unwrap();
        let (_, b) = combine_kernels(&bank, &pi).unwrap();
        for (o, plane) in y.outer_iter().enumerate() {
            assert!(plane.iter().all(|&v| (v - b[o]).abs() < 1e-12));
        }
    }

    #[test]
    fn permuting_bank_and_pi_together_is_invariant() {
        let mut rng = crate::rng::stream(7, "aaconv", &[]);
        let bank = random_bank(&mut rng, 3, 2, 2, 3);
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.random_range(-1.0..1.0));
        let pi = MixtureWeights::new(vec![0.2, 0.3, 0.5]).unwrap();
        let perm = [2usize, 0, 1];
        let mut kernels = Array5::zeros(bank.kernels.raw_dim());
        let mut bias = Array2::zeros(bank.bias.raw_dim());
        for (dst, &src) in perm.iter().enumerate() {
            kernels.index_axis_mut(Axis(0), dst).assign(&bank.kernels.index_axis(Axis(0), src));
            bias.index_axis_mut(Axis(0), dst).assign(&bank.bias.index_axis(Axis(0), src));
        }
        let permuted = KernelBank::new(kernels, bias).unwrap();
        let pi_perm = MixtureWeights::new(perm.iter().map(|&i| pi.as_slice()[i]).collect()).unwrap();
        let y0 = aaconv_forward(&x, &bank, &pi, 1, 1).unwrap();
        let y1 = aaconv_forward(&x, &permuted, &pi_perm, 1, 1).unwrap();
        let diff = (&y0 - &y1).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
