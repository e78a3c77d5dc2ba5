//! Gaussian feature head math: reparameterized sampling, reconstruction MSE
//! and the KL regularizer that keeps the predicted distribution near N(0, I).

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Mode;
use crate::rng;

/// Per-location diagonal Gaussian over the split-point feature map.
#[derive(Debug, Clone)]
pub struct GaussianFeature {
    pub mu: Array3<f64>,
    /// Same shape as `mu`; strictly positive when produced by the model
    /// (sigma = exp(logvar / 2)).
    pub sigma: Array3<f64>,
}

impl GaussianFeature {
    pub fn new(mu: Array3<f64>, sigma: Array3<f64>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::Param(format!(
                "mu shape {:?} != sigma shape {:?}",
                mu.shape(),
                sigma.shape()
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn numel(&self) -> usize {
        self.mu.len()
    }
}

/// Draw the feature: `mu + sigma * eps` in train mode (reparameterized),
/// exactly `mu` in eval mode.
pub fn sample_feature(g: &GaussianFeature, mode: Mode, noise_seed: u64) -> Array3<f64> {
    match mode {
        Mode::Eval => g.mu.clone(),
        Mode::Train => {
            let mut stream = rng::stream(noise_seed, "cfr-noise", &[]);
            let mut z = g.mu.clone();
            for (zi, si) in z.iter_mut().zip(g.sigma.iter()) {
                *zi += si * rng::normal(&mut stream);
            }
            z
        }
    }
}

/// Standard-normal noise tensor with the shape of `g`, drawn from the given
/// stream; used by the training graph so sampling shares one draw per image.
pub fn noise_like(shape: &[usize], stream: &mut impl Rng) -> ndarray::ArrayD<f64> {
    ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng::normal(stream))
}

/// Mean squared error between a reconstruction and its target.
pub fn reconstruction_loss(recon: &Array3<f64>, target: &Array3<f64>) -> Result<f64> {
    if recon.shape() != target.shape() {
        return Err(Error::Param(format!(
            "reconstruction shape {:?} != target shape {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let n = recon.len().max(1) as f64;
    Ok(recon
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// KL(N(mu, sigma^2) || N(0, 1)) averaged over elements:
/// sum_i (1/2N) (-log sigma_i^2 + mu_i^2 + sigma_i^2 - 1).
pub fn kld_loss(g: &GaussianFeature) -> f64 {
    let n = g.numel().max(1) as f64;
    g.mu.iter()
        .zip(g.sigma.iter())
        .map(|(&m, &s)| -(s * s).ln() + m * m + s * s - 1.0)
        .sum::<f64>()
        / (2.0 * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn gauss(mu: f64, sigma: f64) -> GaussianFeature {
        GaussianFeature::new(
            Array3::from_elem((1, 1, 1), mu),
            Array3::from_elem((1, 1, 1), sigma),
        )
        .unwrap()
    }

    #[test]
    fn eval_sample_is_mu_bitwise() {
        let g = gauss(0.37, 2.5);
        let z = sample_feature(&g, Mode::Eval, 123);
        assert_eq!(z, g.mu);
    }

    #[test]
    fn zero_sigma_sample_is_mu() {
        let g = gauss(-1.25, 0.0);
        let z = sample_feature(&g, Mode::Train, 7);
        assert_eq!(z, g.mu);
    }

    #[test]
    fn sample_mean_converges_to_mu() {
        // 10^4 draws of one element: mean within 4*sigma/100 of mu.
        let g = gauss(1.5, 0.8);
        let mut acc = 0.0;
        let n = 10_000;
        for i in 0..n {
            acc += sample_feature(&g, Mode::Train, 1000 + i)[[0, 0, 0]];
        }
        let mean = acc / n as f64;
        assert!((mean - 1.5).abs() < 4.0 * 0.8 / 100.0, "mean {mean}");
    }

    #[test]
    fn reconstruction_loss_values() {
        let x = Array3::from_shape_fn((3, 4, 4), |(c, y, z)| (c + y + z) as f64);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let off1 = &x + 1.0;
        assert!((reconstruction_loss(&off1, &x).unwrap() - 1.0).abs() < 1e-12);
        let off2 = &x + 2.0;
        assert!((reconstruction_loss(&off2, &x).unwrap() - 4.0).abs() < 1e-12);
        let bad = Array3::<f64>::zeros((3, 4, 5));
        assert!(reconstruction_loss(&bad, &x).is_err());
    }

    #[test]
    fn kld_fixed_point_and_spot_values() {
        assert_eq!(kld_loss(&gauss(0.0, 1.0)), 0.0);
        assert!((kld_loss(&gauss(1.0, 1.0)) - 0.5).abs() < 1e-12);
        let sigma = std::f64::consts::E.sqrt(); // sigma^2 = e
        let expected = (std::f64::consts::E - 2.0) / 2.0;
        assert!((kld_loss(&gauss(0.0, sigma)) - expected).abs() < 1e-12);
    }

    #[test]
    fn kld_nonnegative_with_equality_only_at_standard() {
        let mut stream = crate::rng::stream(5, "kld", &[]);
        use rand::Rng;
        for _ in 0..500 {
            let mu = stream.random_range(-3.0..3.0);
            let sigma = stream.random_range(0.05..4.0);
            let v = kld_loss(&gauss(mu, sigma));
            assert!(v >= 0.0);
            if mu.abs() > 1e-3 || (sigma - 1.0).abs() > 1e-3 {
                assert!(v > 0.0);
            }
        }
    }
}
