use std::cmp::Ordering;

use super::context::Context;
use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub tokens: Vec<u32>,
    /// Sum of natural-log probabilities of `tokens`.
    pub score: f64,
}

/// Score descending, then token sequence ascending.
pub fn rank(a: &Beam, b: &Beam) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over `length` steps keeping `width` hypotheses. Each step
/// expands every hypothesis by its `per_step` most likely tokens. With
/// `normalize` the final choice divides scores by length.
pub async fn beam_search(root: Context, width: usize, length: usize, per_step: usize, normalize: bool) -> ApiResult<Beam> {
    if width == 0 || length == 0 || per_step == 0 {
        return Err(ApiError::InvalidArgument("beam width, length and expansion must be positive".into()));
    }
    let mut beams = vec![(root, Beam { tokens: Vec::new(), score: 0.0 })];
    for step in 0..length {
        let mut candidates: Vec<(usize, Beam)> = Vec::new();
        for (i, (ctx, beam)) in beams.iter_mut().enumerate() {
            let dist = ctx.next_dist_k(per_step).await?;
            for (token, p) in dist.iter() {
                let mut tokens = beam.tokens.clone();
                tokens.push(token);
                candidates.push((i, Beam { tokens, score: beam.score + p.ln() }));
            }
        }
        candidates.sort_by(|a, b| rank(&a.1, &b.1));
        candidates.truncate(width);
        if step + 1 == length {
            if normalize {
                candidates.sort_by(|a, b| {
                    let na = a.1.score / a.1.tokens.len() as f64;
                    let nb = b.1.score / b.1.tokens.len() as f64;
                    nb.total_cmp(&na).then_with(|| a.1.tokens.cmp(&b.1.tokens))
                });
            }
            return Ok(candidates.swap_remove(0).1);
        }
        let mut next = Vec::with_capacity(candidates.len());
        for (i, beam) in candidates {
            let mut child = beams[i].0.fork().await?;
            child.push_token(*beam.tokens.last().expect("non-empty"))?;
            next.push((child, beam));
        }
        beams = next;
    }
    unreachable!("length is positive")
}
