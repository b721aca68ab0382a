use serde::Serialize;

use super::context::{Context, Generated, Stop};
use crate::error::ApiResult;
use crate::runtime::Embed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SpecStats {
    pub verifications: usize,
    pub drafted: usize,
    pub accepted: usize,
}

/// Tokens that followed the most recent earlier occurrence of the sequence's
/// last `n`-gram, at most `k` of them.
pub fn lookup_draft(seq: &[u32], n: usize, k: usize) -> Vec<u32> {
    if n == 0 || k == 0 || seq.len() <= n {
        return Vec::new();
    }
    let key = &seq[seq.len() - n..];
    (0..seq.len() - n)
        .rev()
        .find(|&i| &seq[i..i + n] == key)
        .map(|i| seq[i + n..(i + n + k).min(seq.len())].to_vec())
        .unwrap_or_default()
}

/// Greedy decoding with n-gram prompt-lookup drafts.
///
/// Each verification forwards the pending token plus the draft in one call
/// with one output per input, into a scratch page. The longest prefix of the
/// draft that agrees with the greedy choice is kept: its KV slots are copied
/// into the context and the output of the last kept token becomes the tail.
/// The emitted tokens are exactly those of plain greedy decoding.
pub async fn speculative_generate(ctx: &mut Context, stop: &Stop, ngram: usize, draft_len: usize) -> ApiResult<(Generated, SpecStats)> {
    let host = ctx.host().clone();
    let q = ctx.queue();
    let max_draft = draft_len.min(ctx.model().page_capacity - 1);
    let mut stats = SpecStats::default();
    let mut out = Generated::default();
    let mut ins: Vec<Embed> = Vec::new();
    let mut outs: Vec<Embed> = Vec::new();
    let result = async {
        while out.tokens.len() < stop.max_tokens && !out.stopped {
            let remaining = stop.max_tokens - out.tokens.len();
            let has_pending = ctx.kv_len() < ctx.len();
            let draft = if has_pending { lookup_draft(&ctx.tokens(), ngram, max_draft.min(remaining)) } else { Vec::new() };
            if draft.is_empty() {
                let dist = ctx.next_dist().await?;
                let token = dist.ids[0];
                if ctx.emit(token, stop, &mut out).await? {
                    break;
                }
                ctx.push_token(token)?;
                continue;
            }

            let t0 = ctx.take_pending().expect("pending token");
            let inputs: Vec<u32> = std::iter::once(t0).chain(draft.iter().copied()).collect();
            let m = inputs.len();
            if ins.len() < m {
                ins.extend(host.alloc_emb(q, m - ins.len())?);
                outs.extend(host.alloc_emb(q, m - outs.len())?);
            }
            let scratch = host.alloc_kvpage(q, 1)?[0];
            let start = ctx.kv_len() as u32;
            let positions: Vec<u32> = (start..start + m as u32).collect();
            host.embed_txt(q, &inputs, &positions, &ins[..m])?;
            host.forward(q, &ctx.kv_pages(), &ins[..m], &[scratch], &outs[..m])?;
            let pending: Vec<_> = outs[..m].iter().map(|&e| host.get_next_dist(q, e)).collect();
            let mut dists = Vec::with_capacity(m);
            for f in pending {
                dists.push(f.await?);
            }
            stats.verifications += 1;
            stats.drafted += draft.len();

            let mut accepted = 0;
            while accepted < draft.len() && dists[accepted].ids[0] == draft[accepted] {
                accepted += 1;
            }
            stats.accepted += accepted;
            let mut kept = 1;
            for &token in &draft[..accepted] {
                if ctx.emit(token, stop, &mut out).await? {
                    break;
                }
                kept += 1;
                if out.stopped {
                    break;
                }
            }
            ctx.append_copied(scratch, &inputs[..kept])?;
            host.dealloc_kvpage(q, &[scratch])?;
            let old = ctx.take_tail().expect("context has a tail");
            ctx.set_tail(outs[kept - 1]);
            outs[kept - 1] = old;
            ctx.set_dist(ctx.top_k(), dists.swap_remove(kept - 1));
        }
        Ok::<(), crate::error::ApiError>(())
    }
    .await;
    let spare: Vec<Embed> = ins.into_iter().chain(outs).collect();
    if !spare.is_empty() {
        let _ = host.dealloc_emb(q, &spare);
    }
    result.map(|_| (out, stats))
}
