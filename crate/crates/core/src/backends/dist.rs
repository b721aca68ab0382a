use serde::{Deserialize, Serialize};

/// Default truncation bound for next-token distributions.
pub const DEFAULT_TOP_K: usize = 256;

/// Integer weights backing a mock-model distribution, so callers can check
/// normalization in exact arithmetic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExactMass {
    /// Weight of each retained entry, aligned with `Distribution::ids`.
    pub weights: Vec<u64>,
    /// Sum of weights over the full, untruncated vocabulary.
    pub total: u64,
}

/// Truncated next-token distribution, sorted by descending probability with
/// ties broken by ascending token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub ids: Vec<u32>,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactMass>,
}

impl Distribution {
    /// Sorts `(id, prob)` over the full vocabulary and keeps the top `k`.
    pub(crate) fn from_full(probs: &[f64], k: usize) -> Distribution {
        let mut order: Vec<u32> = (0..probs.len() as u32).collect();
        order.sort_by(|&a, &b| {
            probs[b as usize]
                .partial_cmp(&probs[a as usize])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(k.min(probs.len()));
        Distribution {
            probs: order.iter().map(|&i| probs[i as usize]).collect(),
            ids: order,
            exact: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Most likely token (lowest id among ties).
    pub fn max_index(&self) -> Option<u32> {
        self.ids.first().copied()
    }

    pub fn prob_of(&self, token: u32) -> Option<f64> {
        self.ids.iter().position(|&t| t == token).map(|i| self.probs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.ids.iter().copied().zip(self.probs.iter().copied())
    }
}
