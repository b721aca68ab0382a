//! Batch handlers and the physical arenas they own.

use super::wire::{BackendInit, BackendRequest, BackendResponse, Call, CallKind, CallOutput, PhysId};
use super::{ContextToken, InputToken, Model, ModelDescriptor, Payload, Source};
use crate::error::{ApiError, ApiResult};

/// Executes homogeneous batches. Implementations hold the physical memory
/// but never decide which slots are allocated.
pub trait Backend {
    fn models(&self) -> Vec<ModelDescriptor>;

    /// Results come back in call order. A failing call never affects its
    /// siblings.
    fn execute(&mut self, req: &BackendRequest) -> BackendResponse;
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvSlot {
    pub position: u32,
    pub payload: Payload,
    pub masked: bool,
}

/// Contents of one physical KV page. Slots fill densely from index 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PageData {
    pub slots: Vec<KvSlot>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub enum EmbedData {
    #[default]
    Empty,
    Input { position: u32, payload: Payload },
    Output { position: u32, payload: Payload },
}

struct Arena {
    model: Box<dyn Model>,
    capacity: usize,
    pages: Vec<PageData>,
    embeds: Vec<EmbedData>,
}

/// In-process inference layer.
pub struct LocalBackend {
    arenas: Vec<Arena>,
}

impl std::fmt::Debug for LocalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LocalBackend").field("models", &self.arenas.len()).finish()
    }
}

impl LocalBackend {
    pub fn new(init: &BackendInit) -> Self {
        let arenas = init
            .models
            .iter()
            .map(|spec| Arena {
                model: spec.build(init.page_capacity, init.max_batch_tokens),
                capacity: init.page_capacity,
                pages: vec![PageData::default(); init.kv_pages],
                embeds: vec![EmbedData::Empty; init.embeds],
            })
            .collect();
        LocalBackend { arenas }
    }

    pub fn page(&self, model: usize, page: PhysId) -> Option<&PageData> {
        self.arenas.get(model)?.pages.get(page as usize)
    }

    pub fn embed(&self, model: usize, embed: PhysId) -> Option<&EmbedData> {
        self.arenas.get(model)?.embeds.get(embed as usize)
    }
}

impl Backend for LocalBackend {
    fn models(&self) -> Vec<ModelDescriptor> {
        self.arenas.iter().map(|a| a.model.descriptor().clone()).collect()
    }

    fn execute(&mut self, req: &BackendRequest) -> BackendResponse {
        let Some(arena) = self.arenas.get_mut(req.model) else {
            let err = Err(ApiError::Backend(format!("no model at index {}", req.model)));
            return BackendResponse { results: vec![err; req.calls.len()] };
        };
        let results = if req.kind == CallKind::Forward {
            arena.forward_batch(&req.calls)
        } else {
            req.calls.iter().map(|c| arena.execute_one(c)).collect()
        };
        BackendResponse { results }
    }
}

struct ForwardPlan {
    kv_writes: Vec<(PhysId, KvSlot)>,
    outputs: Vec<(PhysId, u32, Payload)>,
}

impl Arena {
    fn page_mut(&mut self, id: PhysId) -> ApiResult<&mut PageData> {
        self.pages
            .get_mut(id as usize)
            .ok_or_else(|| ApiError::Backend(format!("page {id} out of range")))
    }

    fn page(&self, id: PhysId) -> ApiResult<&PageData> {
        self.pages
            .get(id as usize)
            .ok_or_else(|| ApiError::Backend(format!("page {id} out of range")))
    }

    fn embed(&self, id: PhysId) -> ApiResult<&EmbedData> {
        self.embeds
            .get(id as usize)
            .ok_or_else(|| ApiError::Backend(format!("embed {id} out of range")))
    }

    fn embed_mut(&mut self, id: PhysId) -> ApiResult<&mut EmbedData> {
        self.embeds
            .get_mut(id as usize)
            .ok_or_else(|| ApiError::Backend(format!("embed {id} out of range")))
    }

    fn execute_one(&mut self, call: &Call) -> ApiResult<CallOutput> {
        match call {
            Call::AllocKv { pages } => {
                for &p in pages {
                    self.page_mut(p)?.slots.clear();
                }
                Ok(CallOutput::Unit)
            }
            Call::AllocEmb { embeds } => {
                for &e in embeds {
                    *self.embed_mut(e)? = EmbedData::Empty;
                }
                Ok(CallOutput::Unit)
            }
            Call::DeallocKv { .. } | Call::DeallocEmb { .. } => Ok(CallOutput::Unit),
            Call::EmbedText { tokens, positions, embeds } => {
                if tokens.len() != positions.len() || tokens.len() != embeds.len() {
                    return Err(ApiError::LengthMismatch);
                }
                let vocab = self.model.descriptor().vocab_size;
                let mut payloads = Vec::with_capacity(tokens.len());
                for (&t, &p) in tokens.iter().zip(positions) {
                    if t >= vocab {
                        return Err(ApiError::UnknownTokenId(t));
                    }
                    payloads.push(self.model.embed_token(t, p)?);
                }
                for &e in embeds {
                    self.embed(e)?;
                }
                for ((&e, &position), payload) in embeds.iter().zip(positions).zip(payloads) {
                    *self.embed_mut(e)? = EmbedData::Input { position, payload };
                }
                Ok(CallOutput::Unit)
            }
            Call::NextDist { embed, k } => match self.embed(*embed)? {
                EmbedData::Output { payload, .. } => {
                    Ok(CallOutput::Dist(self.model.next_dist(payload, *k)?))
                }
                _ => Err(ApiError::UnfilledEmbed),
            },
            Call::Mask { page, mask } => {
                let data = self.page_mut(*page)?;
                if mask.len() != data.slots.len() {
                    return Err(ApiError::LengthMismatch);
                }
                for (slot, &m) in data.slots.iter_mut().zip(mask) {
                    slot.masked = m;
                }
                Ok(CallOutput::Unit)
            }
            Call::Copy { src, src_start, dst, dst_start, len } => {
                let capacity = self.capacity;
                let src_slots = self.page(*src)?.slots.clone();
                if src_start + len > src_slots.len() {
                    return Err(ApiError::RangeMismatch);
                }
                let dst_page = self.page_mut(*dst)?;
                if *dst_start > dst_page.slots.len() || dst_start + len > capacity {
                    return Err(ApiError::RangeMismatch);
                }
                for i in 0..*len {
                    let slot = src_slots[src_start + i].clone();
                    let at = dst_start + i;
                    if at < dst_page.slots.len() {
                        dst_page.slots[at] = slot;
                    } else {
                        dst_page.slots.push(slot);
                    }
                }
                Ok(CallOutput::Unit)
            }
            Call::Tokenize { text } => Ok(CallOutput::Tokens(self.model.tokenizer().tokenize(text))),
            Call::Detokenize { ids } => Ok(CallOutput::Bytes(self.model.tokenizer().detokenize(ids)?)),
            Call::Vocab => Ok(CallOutput::Vocab(self.model.tokenizer().vocab())),
            Call::Forward { .. } => Err(ApiError::Backend("forward outside a forward batch".into())),
        }
    }

    /// Runs a forward batch with batched-kernel semantics: every call's input
    /// embeds are read before any call runs, KV appends become visible to
    /// later calls as each call completes, and output embeds are written
    /// after the whole batch.
    fn forward_batch(&mut self, calls: &[Call]) -> Vec<ApiResult<CallOutput>> {
        let snapshots: Vec<ApiResult<Vec<(u32, Payload)>>> = calls
            .iter()
            .map(|c| match c {
                Call::Forward { iemb, .. } => iemb
                    .iter()
                    .map(|&e| match self.embed(e)? {
                        EmbedData::Input { position, payload } => Ok((*position, payload.clone())),
                        _ => Err(ApiError::UnfilledEmbed),
                    })
                    .collect(),
                _ => Err(ApiError::Backend("mixed call kinds in forward batch".into())),
            })
            .collect();

        let mut results = Vec::with_capacity(calls.len());
        let mut pending_outputs = Vec::new();
        for (call, snapshot) in calls.iter().zip(snapshots) {
            let Call::Forward { ikv, okv, oemb, mask, .. } = call else {
                results.push(Err(ApiError::Backend("mixed call kinds in forward batch".into())));
                continue;
            };
            let plan = snapshot
                .and_then(|inputs| self.plan_forward(ikv, &inputs, okv, oemb, mask.as_deref()));
            match plan {
                Ok(plan) => {
                    for (page, slot) in plan.kv_writes {
                        self.pages[page as usize].slots.push(slot);
                    }
                    pending_outputs.extend(plan.outputs);
                    results.push(Ok(CallOutput::Unit));
                }
                Err(e) => results.push(Err(e)),
            }
        }
        for (embed, position, payload) in pending_outputs {
            self.embeds[embed as usize] = EmbedData::Output { position, payload };
        }
        results
    }

    fn plan_forward(
        &self,
        ikv: &[PhysId],
        inputs: &[(u32, Payload)],
        okv: &[PhysId],
        oemb: &[PhysId],
        mask: Option<&[Vec<bool>]>,
    ) -> ApiResult<ForwardPlan> {
        if inputs.is_empty() {
            return Err(ApiError::InvalidArgument("forward needs at least one input embed".into()));
        }
        if oemb.len() > inputs.len() {
            return Err(ApiError::LengthMismatch);
        }
        for e in oemb {
            self.embed(*e)?;
        }
        if inputs.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(ApiError::PositionOrder);
        }

        let mut context: Vec<ContextToken<'_>> = Vec::new();
        for &p in ikv {
            for slot in self.page(p)?.slots.iter().filter(|s| !s.masked) {
                context.push(ContextToken { position: slot.position, payload: &slot.payload });
            }
        }
        let mut ctx_positions: Vec<u32> = context.iter().map(|c| c.position).collect();
        ctx_positions.sort_unstable();
        if ctx_positions.windows(2).any(|w| w[0] == w[1])
            || inputs.iter().any(|(p, _)| ctx_positions.binary_search(p).is_ok())
        {
            return Err(ApiError::PositionOrder);
        }

        let n_ctx = context.len();
        if let Some(m) = mask {
            if m.len() != inputs.len() || m.iter().any(|row| row.len() != n_ctx + inputs.len()) {
                return Err(ApiError::MaskShapeMismatch);
            }
            // Inputs are computed in order, so a row may not select later inputs.
            if m.iter().enumerate().any(|(i, row)| row[n_ctx + i + 1..].iter().any(|&b| b)) {
                return Err(ApiError::MaskShapeMismatch);
            }
        }

        let mut free_slots = Vec::new();
        if !okv.is_empty() {
            let mut seen = std::collections::HashSet::new();
            for &p in okv {
                if !seen.insert(p) {
                    return Err(ApiError::InvalidArgument("duplicate output page".into()));
                }
                let filled = self.page(p)?.slots.len();
                free_slots.extend(std::iter::repeat_n(p, self.capacity.saturating_sub(filled)));
            }
            if free_slots.len() < inputs.len() {
                return Err(ApiError::SlotOverflow);
            }
        }

        let attend: Vec<Vec<Source>> = inputs
            .iter()
            .enumerate()
            .map(|(i, &(pos, _))| {
                let mut srcs: Vec<(u32, Source)> = Vec::new();
                for (j, c) in context.iter().enumerate() {
                    let visible = match mask {
                        Some(m) => m[i][j],
                        None => c.position < pos,
                    };
                    if visible {
                        srcs.push((c.position, Source::Context(j)));
                    }
                }
                for (j, &(p, _)) in inputs[..i].iter().enumerate() {
                    if mask.is_none_or(|m| m[i][n_ctx + j]) {
                        srcs.push((p, Source::Input(j)));
                    }
                }
                srcs.push((pos, Source::Input(i)));
                srcs.sort_by_key(|&(p, _)| p);
                srcs.into_iter().map(|(_, s)| s).collect()
            })
            .collect();

        let input_tokens: Vec<InputToken<'_>> =
            inputs.iter().map(|(p, payload)| InputToken { position: *p, payload }).collect();
        let outs = self.model.forward(&context, &input_tokens, &attend)?;

        let kv_writes = if okv.is_empty() {
            Vec::new()
        } else {
            outs.iter()
                .zip(inputs)
                .zip(&free_slots)
                .map(|((o, (pos, _)), &page)| {
                    (page, KvSlot { position: *pos, payload: o.kv.clone(), masked: false })
                })
                .collect()
        };
        let skip = inputs.len() - oemb.len();
        let outputs = oemb
            .iter()
            .zip(outs.into_iter().zip(inputs).skip(skip))
            .map(|(&e, (o, (pos, _)))| (e, *pos, o.state))
            .collect();
        Ok(ForwardPlan { kv_writes, outputs })
    }
}
