//! Gumbel-Softmax sampling with straight-through hard samples.
//!
//! Noise is drawn from a stream keyed by `(seed, site, step)` so that a
//! forward pass can be replayed with exactly the same perturbations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Seeded, replayable noise stream for one sampling site at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub site: u64,
    pub step: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, site: u64, step: u64) -> Self {
        Self { seed, site, step }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mixed = splitmix(splitmix(splitmix(self.seed) ^ self.site) ^ self.step);
        ChaCha8Rng::seed_from_u64(mixed)
    }
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Standard Gumbel(0, 1) draws.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // open interval (0, 1)
            let u: f64 = loop {
                let u: f64 = rng.gen();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect()
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("Gumbel-Softmax temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// One Gumbel-Softmax draw over `logits`.
///
/// Soft mode returns `softmax((logits + g) / τ)`; hard mode returns the
/// one-hot of its argmax.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    hard: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(invalid("Gumbel-Softmax needs at least one logit"));
    }
    let noise = sample_gumbel(rng, logits.len());
    let soft = perturbed_softmax(logits, &noise, temperature);
    Ok(if hard { one_hot_argmax(&soft) } else { soft })
}

pub(crate) fn perturbed_softmax(logits: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / temperature).collect();
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One-hot of the first maximal entry.
pub(crate) fn one_hot_argmax(p: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    let mut out = vec![0.0; p.len()];
    out[best] = 1.0;
    out
}

/// Row-wise Gumbel-Softmax on the graph. `logits` is `[n×m]`, `noise` has
/// the same shape. In hard mode the forward value is exactly one-hot and the
/// backward pass uses the soft relaxation (straight-through).
pub fn gumbel_softmax_node(
    g: &mut Graph,
    logits: NodeId,
    noise: &Tensor,
    temperature: f64,
    hard: bool,
) -> Result<NodeId> {
    check_temperature(temperature)?;
    let shape = g.value(logits).shape().to_vec();
    if noise.shape() != shape.as_slice() {
        return Err(invalid("Gumbel noise shape must match logits"));
    }
    let noise = g.constant(noise.clone());
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let soft = g.softmax(scaled, None)?;
    if !hard {
        return Ok(soft);
    }
    let sv = g.value(soft);
    let m = sv.cols();
    let hard_data: Vec<f64> = sv.data().chunks(m).flat_map(one_hot_argmax).collect();
    let hard_t = Tensor::new(&shape, hard_data)?;
    g.straight_through(soft, hard_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_temperature() {
        let mut rng = NoiseKey::new(0, 0, 0).rng();
        assert!(gumbel_softmax(&[0.0, 1.0], 0.0, false, &mut rng).is_err());
        assert!(gumbel_softmax(&[0.0, 1.0], -1.0, true, &mut rng).is_err());
        assert!(gumbel_softmax(&[], 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn soft_is_a_distribution_and_hard_is_one_hot() {
        let mut rng = NoiseKey::new(3, 1, 2).rng();
        for _ in 0..200 {
            let s = gumbel_softmax(&[0.3, -1.2, 2.0, 0.0], 0.7, false, &mut rng).unwrap();
            assert!(s.iter().all(|v| *v >= 0.0));
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let h = gumbel_softmax(&[0.3, -1.2, 2.0, 0.0], 0.7, true, &mut rng).unwrap();
            assert!(h.iter().all(|v| *v == 0.0 || *v == 1.0));
            assert_eq!(h.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn symmetric_logits_average_to_half() {
        let mut rng = NoiseKey::new(11, 0, 0).rng();
        let n = 20_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let s = gumbel_softmax(&[0.0, 0.0], 1.0, false, &mut rng).unwrap();
            acc[0] += s[0];
            acc[1] += s[1];
        }
        assert!((acc[0] / n as f64 - 0.5).abs() < 0.01);
        assert!((acc[1] / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn keyed_streams_replay() {
        let a = sample_gumbel(&mut NoiseKey::new(1, 2, 3).rng(), 8);
        let b = sample_gumbel(&mut NoiseKey::new(1, 2, 3).rng(), 8);
        let c = sample_gumbel(&mut NoiseKey::new(1, 2, 4).rng(), 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
