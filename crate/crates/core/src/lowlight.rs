//! Low-light synthesis `I = beta * (alpha * X)^gamma` with per-clip
//! parameters drawn uniformly from fixed ranges.

use evseg_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHA_RANGE: (f64, f64) = (0.9, 1.0);
pub const BETA_RANGE: (f64, f64) = (0.5, 1.0);
pub const GAMMA_RANGE: (f64, f64) = (2.0, 3.5);

/// Degradation parameters for one clip; serialized as the clip's sidecar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLightParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl LowLightParams {
    /// Whether every field lies inside its sampling range.
    pub fn in_sampling_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        within(self.alpha, ALPHA_RANGE)
            && within(self.beta, BETA_RANGE)
            && within(self.gamma, GAMMA_RANGE)
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.beta * (self.alpha * x).powf(self.gamma)
    }
}

pub fn sample_params(seed: u64) -> LowLightParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
    let alpha = draw(ALPHA_RANGE);
    let beta = draw(BETA_RANGE);
    let gamma = draw(GAMMA_RANGE);
    LowLightParams {
        alpha,
        beta,
        gamma,
        seed,
    }
}

/// Applies the degradation elementwise. Any value outside `[0, 1]` (or NaN)
/// is rejected as an un-normalized frame.
pub fn degrade(frame: &Tensor, params: &LowLightParams) -> Result<Tensor> {
    if let Some((i, v)) = frame
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::Data(format!(
            "pixel {i} has value {v}; frames must be normalized to [0, 1]"
        )));
    }
    Ok(frame.map(|x| params.apply(x)))
}
