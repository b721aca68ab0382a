use crate::backends::hash::SplitMix64;
use crate::backends::Distribution;
use crate::error::{ApiError, ApiResult};

/// Token selection rule.
#[derive(Debug, Clone)]
pub enum Sampler {
    /// First entry of the distribution: highest probability, lowest id on ties.
    Greedy,
    /// Temperature-scaled sampling among the `k` most likely entries.
    TopK { k: usize, temperature: f64, rng: SplitMix64 },
}

impl Sampler {
    pub fn greedy() -> Self {
        Sampler::Greedy
    }

    pub fn top_k(k: usize, temperature: f64, seed: u64) -> ApiResult<Self> {
        if k == 0 {
            return Err(ApiError::InvalidArgument("top-k needs k >= 1".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(ApiError::InvalidArgument(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Sampler::TopK { k, temperature, rng: SplitMix64::new(seed) })
    }

    pub fn sample(&mut self, dist: &Distribution) -> ApiResult<u32> {
        if dist.is_empty() {
            return Err(ApiError::InvalidArgument("empty distribution".into()));
        }
        match self {
            Sampler::Greedy => Ok(dist.ids[0]),
            Sampler::TopK { k, temperature, rng } => {
                let n = (*k).min(dist.len());
                // Softmax of log(p) / T, shifted by the max for stability.
                let logits: Vec<f64> = dist.probs[..n].iter().map(|p| p.ln() / *temperature).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let u = rng.next_f64() * total;
                let mut acc = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return Ok(dist.ids[i]);
                    }
                }
                Ok(dist.ids[n - 1])
            }
        }
    }
}

/// One-shot form of [`Sampler::sample`].
pub fn sample(dist: &Distribution, sampler: &mut Sampler) -> ApiResult<u32> {
    sampler.sample(dist)
}
