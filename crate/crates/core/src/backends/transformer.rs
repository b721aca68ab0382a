use super::hash::splitmix64;
use super::{
    ByteTokenizer, ContextToken, Distribution, InputToken, Model, ModelDescriptor, Payload, Source,
    TokenOutput,
};
use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerShape {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
}

impl TransformerShape {
    pub const DEFAULT: TransformerShape =
        TransformerShape { layers: 2, d_model: 16, heads: 2, ffn_mult: 4, vocab: 258 };

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Floats stored per token in a KV slot: K and V for every layer.
    pub fn kv_width(&self) -> usize {
        self.layers * 2 * self.d_model
    }
}

const LN_EPS: f64 = 1e-5;

/// Maps a raw 64-bit draw to a weight in `[-0.05, 0.05)`.
fn weight_from_bits(x: u64) -> f64 {
    ((x >> 11) as f64 / (1u64 << 53) as f64) * 0.1 - 0.05
}

struct ParamStream {
    seed: u64,
    next: u64,
}

impl ParamStream {
    fn take(&mut self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v = weight_from_bits(splitmix64(self.seed.wrapping_add(self.next)));
                self.next += 1;
                v
            })
            .collect()
    }

    /// Layer-norm gains are centred on one.
    fn take_gain(&mut self, n: usize) -> Vec<f64> {
        self.take(n).into_iter().map(|w| 1.0 + w).collect()
    }
}

struct Layer {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
}

/// Two-layer pre-norm transformer with ReLU feed-forward, computed in `f64`.
///
/// Parameter `i` is `map(splitmix64(seed + i))`, enumerated in this order:
/// token embedding `[vocab × d]`; then per layer `Wq, Wk, Wv, Wo [d × d]`,
/// `W1 [d × 4d]`, `W2 [4d × d]`, layer-norm 1 gain and bias, layer-norm 2
/// gain and bias; then the final layer-norm gain and bias; then the output
/// projection `[d × vocab]`. Gains are stored as `1 + param`. Matrices are
/// row-major with the input dimension first.
pub struct ToyTransformer {
    descriptor: ModelDescriptor,
    tokenizer: ByteTokenizer,
    shape: TransformerShape,
    embedding: Vec<f64>,
    layers: Vec<Layer>,
    lnf_gain: Vec<f64>,
    lnf_bias: Vec<f64>,
    out_proj: Vec<f64>,
}

impl std::fmt::Debug for ToyTransformer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyTransformer").field("shape", &self.shape).finish_non_exhaustive()
    }
}

fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

pub(crate) fn sinusoid(position: u32, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = f64::from(position) / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl ToyTransformer {
    pub fn new(descriptor: ModelDescriptor, seed: u64) -> Self {
        let shape = TransformerShape {
            vocab: descriptor.vocab_size as usize,
            ..TransformerShape::DEFAULT
        };
        let d = shape.d_model;
        let mut p = ParamStream { seed, next: 0 };
        let embedding = p.take(shape.vocab * d);
        let layers = (0..shape.layers)
            .map(|_| Layer {
                wq: p.take(d * d),
                wk: p.take(d * d),
                wv: p.take(d * d),
                wo: p.take(d * d),
                w1: p.take(d * shape.d_ffn()),
                w2: p.take(shape.d_ffn() * d),
                ln1_gain: p.take_gain(d),
                ln1_bias: p.take(d),
                ln2_gain: p.take_gain(d),
                ln2_bias: p.take(d),
            })
            .collect();
        let lnf_gain = p.take_gain(d);
        let lnf_bias = p.take(d);
        let out_proj = p.take(d * shape.vocab);
        ToyTransformer {
            descriptor,
            tokenizer: ByteTokenizer,
            shape,
            embedding,
            layers,
            lnf_gain,
            lnf_bias,
            out_proj,
        }
    }

    pub fn shape(&self) -> TransformerShape {
        self.shape
    }

    /// Full softmax over the vocabulary for an output state.
    pub fn probabilities(&self, state: &[f64]) -> Vec<f64> {
        let h = layer_norm(state, &self.lnf_gain, &self.lnf_bias);
        let logits = matvec(&h, &self.out_proj, self.shape.vocab);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    fn dense<'a>(&self, p: &'a Payload, width: usize) -> ApiResult<&'a [f64]> {
        match p {
            Payload::Dense(v) if v.len() == width => Ok(v),
            _ => Err(ApiError::Backend("transformer expects dense payloads".into())),
        }
    }
}

impl Model for ToyTransformer {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn embed_token(&self, token: u32, position: u32) -> ApiResult<Payload> {
        let d = self.shape.d_model;
        let t = token as usize;
        if t >= self.shape.vocab {
            return Err(ApiError::UnknownTokenId(token));
        }
        let pe = sinusoid(position, d);
        let row = &self.embedding[t * d..(t + 1) * d];
        Ok(Payload::Dense(row.iter().zip(pe).map(|(e, p)| e + p).collect()))
    }

    fn forward(
        &self,
        context: &[ContextToken<'_>],
        inputs: &[InputToken<'_>],
        attend: &[Vec<Source>],
    ) -> ApiResult<Vec<TokenOutput>> {
        let d = self.shape.d_model;
        let dh = self.shape.d_head();
        let kvw = self.shape.kv_width();
        let scale = 1.0 / (dh as f64).sqrt();

        let ctx_kv: Vec<&[f64]> =
            context.iter().map(|c| self.dense(c.payload, kvw)).collect::<ApiResult<_>>()?;
        let mut own_kv: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
        let mut outputs = Vec::with_capacity(inputs.len());

        for (i, input) in inputs.iter().enumerate() {
            let mut x = self.dense(input.payload, d)?.to_vec();
            let mut kv = vec![0.0; kvw];
            for (l, layer) in self.layers.iter().enumerate() {
                let h = layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias);
                let q = matvec(&h, &layer.wq, d);
                let k = matvec(&h, &layer.wk, d);
                let v = matvec(&h, &layer.wv, d);
                let base = l * 2 * d;
                kv[base..base + d].copy_from_slice(&k);
                kv[base + d..base + 2 * d].copy_from_slice(&v);

                let kv_of = |s: &Source| -> (&[f64], &[f64]) {
                    let row: &[f64] = match *s {
                        Source::Context(j) => ctx_kv[j],
                        Source::Input(j) if j == i => &kv,
                        Source::Input(j) => &own_kv[j],
                    };
                    (&row[base..base + d], &row[base + d..base + 2 * d])
                };

                let mut attn = vec![0.0; d];
                for head in 0..self.shape.heads {
                    let r = head * dh..(head + 1) * dh;
                    let scores: Vec<f64> = attend[i]
                        .iter()
                        .map(|s| {
                            let (ks, _) = kv_of(s);
                            q[r.clone()].iter().zip(&ks[r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                * scale
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for (s, e) in attend[i].iter().zip(&exps) {
                        let (_, vs) = kv_of(s);
                        let w = e / z;
                        for (a, vv) in attn[r.clone()].iter_mut().zip(&vs[r.clone()]) {
                            *a += w * vv;
                        }
                    }
                }
                let o = matvec(&attn, &layer.wo, d);
                for (xi, oi) in x.iter_mut().zip(&o) {
                    *xi += oi;
                }
                let h2 = layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias);
                let mut f = matvec(&h2, &layer.w1, self.shape.d_ffn());
                for v in f.iter_mut() {
                    *v = v.max(0.0);
                }
                let f = matvec(&f, &layer.w2, d);
                for (xi, fi) in x.iter_mut().zip(&f) {
                    *xi += fi;
                }
            }
            outputs.push(TokenOutput { kv: Payload::Dense(kv.clone()), state: Payload::Dense(x) });
            own_kv.push(kv);
        }
        Ok(outputs)
    }

    fn next_dist(&self, state: &Payload, k: usize) -> ApiResult<Distribution> {
        match state {
            Payload::Dense(v) if v.len() == self.shape.d_model => {
                Ok(Distribution::from_full(&self.probabilities(v), k))
            }
            _ => Err(ApiError::UnfilledEmbed),
        }
    }

    fn tokenizer(&self) -> &ByteTokenizer {
        &self.tokenizer
    }
}
