use crate::error::{ApiError, ApiResult};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: u32 = 258;

/// Byte-level tokenizer: ids 0..=255 are raw bytes, 256 is BOS, 257 is EOS.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn tokenize(&self, text: &[u8]) -> Vec<u32> {
        text.iter().map(|&b| u32::from(b)).collect()
    }

    /// Special tokens render as empty bytes.
    pub fn detokenize(&self, ids: &[u32]) -> ApiResult<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => out.push(id as u8),
                BOS | EOS => {}
                _ => return Err(ApiError::UnknownTokenId(id)),
            }
        }
        Ok(out)
    }

    pub fn vocab(&self) -> Vec<Vec<u8>> {
        let mut v: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        v.push(Vec::new());
        v.push(Vec::new());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hello_prompt() {
        let t = ByteTokenizer;
        assert_eq!(t.tokenize(b"Hello, "), vec![72, 101, 108, 108, 111, 44, 32]);
        assert_eq!(t.detokenize(&[72, 105]).unwrap(), b"Hi");
        assert!(t.tokenize(b"").is_empty());
    }

    #[test]
    fn specials_render_empty() {
        let t = ByteTokenizer;
        assert_eq!(t.detokenize(&[BOS, 65, EOS]).unwrap(), b"A");
        assert_eq!(t.detokenize(&[258]), Err(ApiError::UnknownTokenId(258)));
        assert_eq!(t.vocab().len(), VOCAB_SIZE as usize);
    }

    proptest! {
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let t = ByteTokenizer;
            prop_assert_eq!(t.detokenize(&t.tokenize(&bytes)).unwrap(), bytes);
        }
    }
}
