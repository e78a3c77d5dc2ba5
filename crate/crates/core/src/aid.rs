//! Mixture weights, JS divergence and the online triplet loss that trains the
//! adversarial image discriminator to separate clean from perturbed inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;

/// Probability vector over the kernel bank; entries nonnegative, sums to 1
/// within 1e-5.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights(pub Vec<f64>);

impl MixtureWeights {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        let w = MixtureWeights(pi);
        w.check_simplex()?;
        Ok(w)
    }

    pub fn uniform(m: usize) -> Self {
        MixtureWeights(vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn check_simplex(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Validation("empty mixture".into()));
        }
        if let Some(v) = self.0.iter().find(|v| **v < -1e-5) {
            return Err(Error::Validation(format!("negative mixture weight {v}")));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Validation(format!("mixture sums to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Whether an image in a training batch is an original or a perturbed copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Clean,
    Adversarial,
}

/// Jensen-Shannon divergence between two distributions, natural log, with the
/// 0*log(0/q) = 0 convention. Symmetric, bounded by ln 2.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Param(format!("length mismatch {} vs {}", p.len(), q.len())));
    }
    if p.iter().chain(q.iter()).any(|&v| v < 0.0) {
        return Err(Error::Validation("negative probability".into()));
    }
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&ai, &bi)| {
                if ai <= 0.0 {
                    0.0
                } else {
                    ai * (ai / ((ai + bi) / 2.0)).ln()
                }
            })
            .sum()
    };
    Ok(0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p))
}

/// Index triple (anchor, positive, negative) into a batch.
pub type Triplet = (usize, usize, usize);

/// For each anchor, sample one positive (same kind, different index) and one
/// negative (opposite kind) uniformly. Anchors without a valid positive or
/// negative are skipped.
pub fn sample_triplets(labels: &[SampleKind], seed: u64) -> (Vec<Triplet>, usize) {
    let mut stream = rng::stream(seed, "triplet", &[]);
    let mut triplets = Vec::new();
    let mut skipped = 0;
    for (a, &kind) in labels.iter().enumerate() {
        let positives: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(i, &k)| *i != a && k == kind)
            .map(|(i, _)| i)
            .collect();
        let negatives: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &k)| k != kind)
            .map(|(i, _)| i)
            .collect();
        if positives.is_empty() || negatives.is_empty() {
            skipped += 1;
            continue;
        }
        use rand::Rng;
        let p = positives[stream.random_range(0..positives.len())];
        let n = negatives[stream.random_range(0..negatives.len())];
        triplets.push((a, p, n));
    }
    (triplets, skipped)
}

/// Result of the triplet loss: the value plus how many triplets formed.
#[derive(Debug, Clone, Copy)]
pub struct TripletLossStats {
    pub value: f64,
    pub formed: usize,
    pub skipped: usize,
}

/// Mean hinge over sampled triplets:
/// mean_i [ JS(pi_a, pi_p) - JS(pi_a, pi_n) + margin ]_+ .
/// Returns 0 with a warning log when no triplet can be formed.
pub fn aid_triplet_loss(
    pis: &[MixtureWeights],
    labels: &[SampleKind],
    margin: f64,
    seed: u64,
) -> Result<TripletLossStats> {
    if pis.len() != labels.len() {
        return Err(Error::Param("pi batch and labels length mismatch".into()));
    }
    if margin <= 0.0 {
        return Err(Error::Param(format!("margin {margin} must be positive")));
    }
    let (triplets, skipped) = sample_triplets(labels, seed);
    if triplets.is_empty() {
        log::warn!("no valid triplets in batch of {}; triplet loss is 0", labels.len());
        return Ok(TripletLossStats { value: 0.0, formed: 0, skipped });
    }
    let mut acc = 0.0;
    for &(a, p, n) in &triplets {
        let d_ap = js_divergence(pis[a].as_slice(), pis[p].as_slice())?;
        let d_an = js_divergence(pis[a].as_slice(), pis[n].as_slice())?;
        acc += (d_ap - d_an + margin).max(0.0);
    }
    Ok(TripletLossStats {
        value: acc / triplets.len() as f64,
        formed: triplets.len(),
        skipped,
    })
}

/// JS divergence between two rows of a (N, M) node. Softmax outputs are
/// strictly positive, so the log nodes stay finite.
pub fn js_divergence_graph(g: &mut Graph, pi: Var, row_a: usize, row_b: usize) -> Var {
    let pa = g.select_row(pi, row_a);
    let pb = g.select_row(pi, row_b);
    let sum = g.add(pa, pb);
    let mid = g.scale(sum, 0.5);
    let ln_mid = g.ln(mid);
    let ln_pa = g.ln(pa);
    let ln_pb = g.ln(pb);
    let da = g.sub(ln_pa, ln_mid);
    let ta = g.mul(pa, da);
    let ka = g.sum(ta);
    let db = g.sub(ln_pb, ln_mid);
    let tb = g.mul(pb, db);
    let kb = g.sum(tb);
    let both = g.add(ka, kb);
    g.scale(both, 0.5)
}

/// Graph version of `aid_triplet_loss` over the rows of a (N, M) mixture
/// node; samples the same triplets as the plain version for a given seed.
pub fn triplet_loss_graph(
    g: &mut Graph,
    pi: Var,
    labels: &[SampleKind],
    margin: f64,
    seed: u64,
) -> (Var, usize) {
    let (triplets, _) = sample_triplets(labels, seed);
    if triplets.is_empty() {
        log::warn!("no valid triplets in batch of {}; triplet loss is 0", labels.len());
        let zero = g.constant(ndarray::arr0(0.0).into_dyn());
        return (zero, 0);
    }
    let mut acc: Option<Var> = None;
    for &(a, p, n) in &triplets {
        let d_ap = js_divergence_graph(g, pi, a, p);
        let d_an = js_divergence_graph(g, pi, a, n);
        let diff = g.sub(d_ap, d_an);
        let shifted = g.add_scalar(diff, margin);
        let hinge = g.relu(shifted);
        acc = Some(match acc {
            Some(v) => g.add(v, hinge),
            None => hinge,
        });
    }
    let total = acc.unwrap();
    (g.scale(total, 1.0 / triplets.len() as f64), triplets.len())
}
