use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameSampling {
    Random,
    Uniform,
}

/// Ascending frame indices of length `t`.
///
/// Random mode draws without replacement, or with replacement when the video
/// is shorter than `t`. Uniform mode returns `⌊i·len/t⌋`.
pub fn sample_frames<R: Rng + ?Sized>(len: usize, t: usize, mode: FrameSampling, rng: &mut R) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(invalid("cannot sample zero frames"));
    }
    if len == 0 {
        return Err(invalid("video has no frames"));
    }
    let mut idx = match mode {
        FrameSampling::Uniform => (0..t).map(|i| i * len / t).collect(),
        FrameSampling::Random if len >= t => sample(rng, len, t).into_vec(),
        FrameSampling::Random => (0..t).map(|_| rng.gen_range(0..len)).collect::<Vec<_>>(),
    };
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NoiseKey;

    #[test]
    fn uniform_rule() {
        let mut rng = NoiseKey::new(0, 0, 0).rng();
        assert_eq!(sample_frames(10, 5, FrameSampling::Uniform, &mut rng).unwrap(), vec![0, 2, 4, 6, 8]);
        assert!(sample_frames(10, 0, FrameSampling::Uniform, &mut rng).is_err());
    }

    #[test]
    fn random_full_and_short() {
        let mut rng = NoiseKey::new(1, 0, 0).rng();
        assert_eq!(sample_frames(6, 6, FrameSampling::Random, &mut rng).unwrap(), (0..6).collect::<Vec<_>>());
        let s = sample_frames(3, 5, FrameSampling::Random, &mut rng).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().all(|&i| i < 3));
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        let s = sample_frames(20, 5, FrameSampling::Random, &mut rng).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
