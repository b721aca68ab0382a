use super::hash::{fnv1a64_extend, splitmix64, FNV_OFFSET};
use super::{
    ByteTokenizer, ContextToken, Distribution, ExactMass, InputToken, Model, ModelDescriptor,
    Payload, Source, TokenOutput,
};
use crate::error::{ApiError, ApiResult};

pub const WEIGHT_MODULUS: u64 = 1023;

/// Deterministic stand-in model.
///
/// The output state of a token is the FNV-1a hash of its visible set, i.e.
/// the position-sorted `(position, token)` pairs it attends to, each encoded
/// as `LE64(position) ‖ LE32(token)`. Weights follow from the hash alone.
#[derive(Debug)]
pub struct MockHashModel {
    descriptor: ModelDescriptor,
    tokenizer: ByteTokenizer,
}

impl MockHashModel {
    pub fn new(descriptor: ModelDescriptor) -> Self {
        MockHashModel { descriptor, tokenizer: ByteTokenizer }
    }
}

fn visible_hash(pairs: impl IntoIterator<Item = (u32, u32)>) -> u64 {
    let mut h = FNV_OFFSET;
    for (pos, tok) in pairs {
        fnv1a64_extend(&mut h, &u64::from(pos).to_le_bytes());
        fnv1a64_extend(&mut h, &tok.to_le_bytes());
    }
    h
}

fn weights_for(hash: u64, vocab: u32) -> Vec<u64> {
    (0..u64::from(vocab))
        .map(|v| 1 + splitmix64(hash ^ (v + 1)) % WEIGHT_MODULUS)
        .collect()
}

fn dist_from_hash(hash: u64, vocab: u32, k: usize) -> Distribution {
    let weights = weights_for(hash, vocab);
    let total: u64 = weights.iter().sum();
    let mut order: Vec<u32> = (0..vocab).collect();
    order.sort_by(|&a, &b| weights[b as usize].cmp(&weights[a as usize]).then(a.cmp(&b)));
    order.truncate(k.min(vocab as usize));
    let kept: Vec<u64> = order.iter().map(|&i| weights[i as usize]).collect();
    Distribution {
        probs: kept.iter().map(|&w| w as f64 / total as f64).collect(),
        ids: order,
        exact: Some(ExactMass { weights: kept, total }),
    }
}

/// Mock-model distribution for an explicit visible set, computed without any
/// KV state. `visible` need not be sorted.
pub fn mock_distribution(visible: &[(u32, u32)], k: usize) -> Distribution {
    let mut sorted = visible.to_vec();
    sorted.sort_by_key(|&(p, _)| p);
    dist_from_hash(visible_hash(sorted), super::VOCAB_SIZE, k)
}

fn token_of(payload: &Payload) -> ApiResult<u32> {
    match payload {
        Payload::Token(t) => Ok(*t),
        _ => Err(ApiError::Backend("mock model expects token payloads".into())),
    }
}

impl Model for MockHashModel {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn embed_token(&self, token: u32, _position: u32) -> ApiResult<Payload> {
        Ok(Payload::Token(token))
    }

    fn forward(
        &self,
        context: &[ContextToken<'_>],
        inputs: &[InputToken<'_>],
        attend: &[Vec<Source>],
    ) -> ApiResult<Vec<TokenOutput>> {
        let ctx: Vec<(u32, u32)> = context
            .iter()
            .map(|c| Ok((c.position, token_of(c.payload)?)))
            .collect::<ApiResult<_>>()?;
        let inp: Vec<(u32, u32)> = inputs
            .iter()
            .map(|c| Ok((c.position, token_of(c.payload)?)))
            .collect::<ApiResult<_>>()?;
        Ok(attend
            .iter()
            .enumerate()
            .map(|(i, sources)| {
                let h = visible_hash(sources.iter().map(|s| match *s {
                    Source::Context(j) => ctx[j],
                    Source::Input(j) => inp[j],
                }));
                TokenOutput { kv: Payload::Token(inp[i].1), state: Payload::Hash(h) }
            })
            .collect())
    }

    fn next_dist(&self, state: &Payload, k: usize) -> ApiResult<Distribution> {
        match state {
            Payload::Hash(h) => Ok(dist_from_hash(*h, self.descriptor.vocab_size, k)),
            _ => Err(ApiError::UnfilledEmbed),
        }
    }

    fn tokenizer(&self) -> &ByteTokenizer {
        &self.tokenizer
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BOS, VOCAB_SIZE};

    #[test]
    fn full_truncation_sums_to_one_exactly() {
        let d = mock_distribution(&[(0, BOS)], VOCAB_SIZE as usize);
        let exact = d.exact.as_ref().unwrap();
        assert_eq!(exact.weights.iter().sum::<u64>(), exact.total);
        assert_eq!(d.len(), VOCAB_SIZE as usize);
    }

    #[test]
    fn weights_in_range_and_sorted() {
        let d = mock_distribution(&[(3, 65), (0, BOS)], 256);
        let w = &d.exact.as_ref().unwrap().weights;
        assert_eq!(d.len(), 256);
        assert!(w.iter().all(|&x| (1..=WEIGHT_MODULUS).contains(&x)));
        for i in 1..d.len() {
            assert!(w[i - 1] > w[i] || (w[i - 1] == w[i] && d.ids[i - 1] < d.ids[i]));
        }
    }

    #[test]
    fn order_of_visible_set_is_irrelevant() {
        let a = mock_distribution(&[(0, BOS), (1, 72), (2, 105)], 16);
        let b = mock_distribution(&[(2, 105), (0, BOS), (1, 72)], 16);
        assert_eq!(a, b);
    }
}
