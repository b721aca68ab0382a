use std::rc::Rc;

use crate::backends::{Distribution, ModelDescriptor, BOS, EOS};
use crate::control::ForwardArgs;
use crate::error::{ApiError, ApiResult};
use crate::runtime::{Embed, Host, KvPage, Queue};

use super::sampler::Sampler;

/// A KV page held by one or more contexts of the same instance. The last
/// holder releases it on the queue that allocated (or imported) it.
struct Page {
    host: Host,
    queue: Queue,
    handle: KvPage,
    /// Imported pages can never be written.
    readonly: bool,
}

impl Drop for Page {
    fn drop(&mut self) {
        let _ = self.host.dealloc_kvpage(self.queue, &[self.handle]);
    }
}

/// Attention restricted to the first `sink` tokens plus the `size` most
/// recent ones (the current token included).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub sink: u32,
    pub size: u32,
}

impl Window {
    pub fn sees(&self, query: u32, key: u32) -> bool {
        key == query || key < self.sink || key + self.size > query
    }
}

/// When to stop generating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stop {
    pub max_tokens: usize,
    /// Stop before emitting EOS.
    pub eos: bool,
    /// Stop once the generated bytes end with this sequence (kept in the output).
    pub stop_string: Option<Vec<u8>>,
}

impl Stop {
    pub fn max_tokens(n: usize) -> Self {
        Stop { max_tokens: n, eos: true, stop_string: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Generated {
    pub tokens: Vec<u32>,
    pub bytes: Vec<u8>,
    /// Set when the stop string or EOS ended the run early.
    pub stopped: bool,
}

impl Generated {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }
}

/// A token sequence whose KV state lives in pages owned by the context.
///
/// Pages hold KV for tokens `[0, n)` at positions `0..n`, packed densely in
/// page order, and the tail embed holds the output state of token `n - 1`.
/// A sampled token that has not been forwarded yet is kept pending and goes
/// out with the next forward, so no token is ever processed twice.
pub struct Context {
    host: Host,
    queue: Queue,
    model: ModelDescriptor,
    pages: Vec<Rc<Page>>,
    tokens: Vec<u32>,
    pending: Option<u32>,
    tail: Option<Embed>,
    inputs: Vec<Embed>,
    dist: Option<(usize, Distribution)>,
    window: Option<Window>,
    masks: Vec<Vec<bool>>,
    vocab: Option<Rc<Vec<Vec<u8>>>>,
    stream: bool,
    top_k: usize,
}

impl std::fmt::Debug for Context {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Context")
            .field("queue", &self.queue)
            .field("tokens", &self.tokens.len())
            .field("pending", &self.pending)
            .field("pages", &self.pages.len())
            .finish()
    }
}

impl Context {
    /// Empty context on a fresh queue. The first fill starts with BOS.
    pub fn new(host: &Host, model: &str) -> ApiResult<Self> {
        let queue = host.create_queue(model)?;
        let model = host.queue_model(queue)?;
        Ok(Context {
            host: host.clone(),
            queue,
            model,
            pages: Vec::new(),
            tokens: Vec::new(),
            pending: None,
            tail: None,
            inputs: Vec::new(),
            dist: None,
            window: None,
            masks: Vec::new(),
            vocab: None,
            stream: false,
            top_k: crate::backends::DEFAULT_TOP_K,
        })
    }

    /// Context over pages imported from another instance. `tokens` are the
    /// tokens whose KV the pages hold, BOS included.
    pub fn from_imported(host: &Host, model: &str, pages: Vec<KvPage>, tokens: Vec<u32>) -> ApiResult<Self> {
        let mut ctx = Context::new(host, model)?;
        let cap = ctx.model.page_capacity;
        if pages.len() != tokens.len().div_ceil(cap) {
            return Err(ApiError::LengthMismatch);
        }
        ctx.pages = pages
            .into_iter()
            .map(|handle| Rc::new(Page { host: host.clone(), queue: ctx.queue, handle, readonly: true }))
            .collect();
        ctx.masks = (0..ctx.pages.len()).map(|i| vec![false; cap.min(tokens.len() - i * cap)]).collect();
        ctx.tokens = tokens;
        Ok(ctx)
    }

    /// Streams every generated token to the client with `send`.
    pub fn streaming(mut self, on: bool) -> Self {
        self.stream = on;
        self
    }

    pub fn with_window(mut self, window: Window) -> Self {
        self.window = Some(window);
        self
    }

    pub fn host(&self) -> &Host {
        &self.host
    }

    pub fn queue(&self) -> Queue {
        self.queue
    }

    pub fn model(&self) -> &ModelDescriptor {
        &self.model
    }

    /// Tokens in the context, pending one included.
    pub fn tokens(&self) -> Vec<u32> {
        self.tokens.iter().copied().chain(self.pending).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len() + usize::from(self.pending.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of tokens whose KV is in the pages.
    pub fn kv_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn page_handles(&self) -> Vec<KvPage> {
        self.pages.iter().map(|p| p.handle).collect()
    }

    fn cap(&self) -> usize {
        self.model.page_capacity
    }

    /// Tokenizes and prefills `text`.
    pub async fn fill(&mut self, text: &str) -> ApiResult<()> {
        let ids = self.host.tokenize(self.queue, text).await?;
        self.fill_tokens(&ids)
    }

    /// Queues the forward passes for `ids` (plus BOS on an empty context and
    /// any pending token). Nothing is awaited.
    pub fn fill_tokens(&mut self, ids: &[u32]) -> ApiResult<()> {
        let mut all: Vec<u32> = Vec::with_capacity(ids.len() + 2);
        if self.tokens.is_empty() && self.pending.is_none() {
            all.push(BOS);
        }
        all.extend(self.pending.take());
        all.extend_from_slice(ids);
        if all.is_empty() {
            return Ok(());
        }
        let chunk = self.model.max_batch_tokens.max(1);
        for part in all.chunks(chunk) {
            self.forward_tokens(part)?;
        }
        Ok(())
    }

    /// Appends a token without forwarding it yet.
    pub fn push_token(&mut self, token: u32) -> ApiResult<()> {
        if self.tokens.is_empty() {
            self.fill_tokens(&[])?;
        }
        if let Some(p) = self.pending.take() {
            self.forward_tokens(&[p])?;
        }
        self.pending = Some(token);
        self.dist = None;
        Ok(())
    }

    fn flush(&mut self) -> ApiResult<()> {
        if self.tokens.is_empty() || self.pending.is_some() {
            self.fill_tokens(&[])?;
        }
        Ok(())
    }

    /// Makes sure pages can take `extra` more tokens after the current ones,
    /// replacing a shared or read-only partial tail page with a private copy.
    fn reserve(&mut self, extra: usize) -> ApiResult<()> {
        let cap = self.cap();
        let n = self.tokens.len();
        if !n.is_multiple_of(cap) {
            let last = n / cap;
            let shared = self.pages[last].readonly || Rc::strong_count(&self.pages[last]) > 1;
            if shared {
                let fill = n % cap;
                let dst = self.host.alloc_kvpage(self.queue, 1)?[0];
                self.host.copy_kvpage(self.queue, self.pages[last].handle, 0..fill, dst, 0..fill)?;
                self.pages[last] = Rc::new(Page { host: self.host.clone(), queue: self.queue, handle: dst, readonly: false });
            }
        }
        let need = (n + extra).div_ceil(cap);
        if need > self.pages.len() {
            let fresh = self.host.alloc_kvpage(self.queue, need - self.pages.len())?;
            for handle in fresh {
                self.pages.push(Rc::new(Page { host: self.host.clone(), queue: self.queue, handle, readonly: false }));
                self.masks.push(Vec::new());
            }
        }
        Ok(())
    }

    fn ensure_inputs(&mut self, n: usize) -> ApiResult<()> {
        if self.inputs.len() < n {
            let more = self.host.alloc_emb(self.queue, n - self.inputs.len())?;
            self.inputs.extend(more);
        }
        if self.tail.is_none() {
            self.tail = Some(self.host.alloc_emb(self.queue, 1)?[0]);
        }
        Ok(())
    }

    /// Output pages for an append at the current length.
    fn output_pages(&self) -> Vec<KvPage> {
        self.pages[self.tokens.len() / self.cap()..].iter().map(|p| p.handle).collect()
    }

    pub(crate) fn top_k(&self) -> usize {
        self.top_k
    }

    /// Pages holding the current tokens.
    pub fn kv_pages(&self) -> Vec<KvPage> {
        self.context_pages()
    }

    fn context_pages(&self) -> Vec<KvPage> {
        self.pages[..self.tokens.len().div_ceil(self.cap())].iter().map(|p| p.handle).collect()
    }

    fn forward_tokens(&mut self, part: &[u32]) -> ApiResult<()> {
        let n = self.tokens.len();
        self.reserve(part.len())?;
        self.ensure_inputs(part.len())?;
        let positions: Vec<u32> = (n..n + part.len()).map(|p| p as u32).collect();
        let iemb = self.inputs[..part.len()].to_vec();
        self.host.embed_txt(self.queue, part, &positions, &iemb)?;
        let mask = match self.window {
            Some(w) => Some(self.window_mask(w, &positions)?),
            None => None,
        };
        let args = ForwardArgs {
            ikv: self.context_pages(),
            iemb,
            okv: self.output_pages(),
            oemb: vec![self.tail.expect("allocated")],
            mask,
        };
        self.host.forward_with(self.queue, args)?;
        self.tokens.extend_from_slice(part);
        let cap = self.cap();
        for (i, _) in part.iter().enumerate() {
            let idx = n + i;
            self.masks[idx / cap].push(false);
        }
        self.dist = None;
        Ok(())
    }

    /// Masks context tokens that no input of this forward can see and
    /// builds the per-row mask for the rest.
    fn window_mask(&mut self, w: Window, positions: &[u32]) -> ApiResult<Vec<Vec<bool>>> {
        let cap = self.cap();
        let first = positions[0];
        for (pi, mask) in self.masks.iter_mut().enumerate() {
            let mut changed = false;
            for (slot, m) in mask.iter_mut().enumerate() {
                let q = (pi * cap + slot) as u32;
                if !*m && !w.sees(first, q) {
                    *m = true;
                    changed = true;
                }
            }
            if changed {
                self.host.mask_kvpage(self.queue, self.pages[pi].handle, mask)?;
            }
        }
        let visible_ctx: Vec<u32> = self
            .masks
            .iter()
            .enumerate()
            .flat_map(|(pi, m)| m.iter().enumerate().filter(|(_, &x)| !x).map(move |(s, _)| (pi * cap + s) as u32))
            .collect();
        Ok(positions
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                visible_ctx
                    .iter()
                    .map(|&q| w.sees(p, q))
                    .chain(positions.iter().enumerate().map(|(j, &q)| j <= i && w.sees(p, q)))
                    .collect()
            })
            .collect())
    }

    /// Distribution over the token after the current ones.
    pub async fn next_dist(&mut self) -> ApiResult<Distribution> {
        let k = self.top_k;
        self.next_dist_k(k).await
    }

    pub async fn next_dist_k(&mut self, k: usize) -> ApiResult<Distribution> {
        self.flush()?;
        if let Some((ck, d)) = &self.dist {
            if *ck >= k {
                let mut d = d.clone();
                d.ids.truncate(k);
                d.probs.truncate(k);
                if let Some(e) = d.exact.as_mut() {
                    e.weights.truncate(k);
                }
                return Ok(d);
            }
        }
        let tail = self.tail.ok_or(ApiError::UnfilledEmbed)?;
        let d = self.host.get_next_dist_k(self.queue, tail, k).await?;
        self.dist = Some((k, d.clone()));
        Ok(d)
    }

    /// Caches a distribution known to describe the next token.
    pub(crate) fn set_dist(&mut self, k: usize, d: Distribution) {
        self.dist = Some((k, d));
    }

    async fn vocab(&mut self) -> ApiResult<Rc<Vec<Vec<u8>>>> {
        if self.vocab.is_none() {
            let v = self.host.get_vocabs(self.queue).await?;
            self.vocab = Some(Rc::new(v));
        }
        Ok(self.vocab.clone().expect("set"))
    }

    /// Bytes of one token.
    pub async fn token_bytes(&mut self, token: u32) -> ApiResult<Vec<u8>> {
        let v = self.vocab().await?;
        v.get(token as usize).cloned().ok_or(ApiError::UnknownTokenId(token))
    }

    /// Records a token chosen by the caller: streams it if enabled and
    /// applies the stop rules. Returns true when generation should stop
    /// before the token.
    pub(crate) async fn emit(&mut self, token: u32, stop: &Stop, out: &mut Generated) -> ApiResult<bool> {
        if stop.eos && token == EOS {
            out.stopped = true;
            return Ok(true);
        }
        let bytes = self.token_bytes(token).await?;
        if self.stream {
            self.host.send(&bytes)?;
        }
        out.tokens.push(token);
        out.bytes.extend_from_slice(&bytes);
        if let Some(s) = &stop.stop_string {
            if !s.is_empty() && out.bytes.ends_with(s) {
                out.stopped = true;
            }
        }
        Ok(false)
    }

    /// The decode loop: sample, append, repeat.
    pub async fn generate_until(&mut self, stop: &Stop, sampler: &mut Sampler) -> ApiResult<Generated> {
        let mut out = Generated::default();
        while out.tokens.len() < stop.max_tokens && !out.stopped {
            let dist = self.next_dist().await?;
            let token = sampler.sample(&dist)?;
            if self.emit(token, stop, &mut out).await? {
                break;
            }
            self.push_token(token)?;
        }
        Ok(out)
    }

    /// A new context on its own queue sharing this one's prefix.
    ///
    /// Full pages are shared read-only; a partially filled tail page is
    /// copied. Waits until the parent's queued work (including the copy) is
    /// done so the child's queue can use the pages right away.
    pub async fn fork(&mut self) -> ApiResult<Context> {
        if self.is_empty() {
            return Err(ApiError::InvalidArgument("cannot fork an empty context".into()));
        }
        let k = self.dist.as_ref().map_or(self.top_k, |(k, _)| *k);
        let dist = self.next_dist_k(k).await?;
        let cap = self.cap();
        let n = self.tokens.len();
        let queue = self.host.create_queue(&self.model.name)?;
        let mut pages: Vec<Rc<Page>> = self.pages[..n / cap].to_vec();
        let mut masks: Vec<Vec<bool>> = self.masks[..n / cap].to_vec();
        let fill = n % cap;
        if fill > 0 {
            let src = self.pages[n / cap].handle;
            let dst = self.host.alloc_kvpage(self.queue, 1)?[0];
            self.host.copy_kvpage(self.queue, src, 0..fill, dst, 0..fill)?;
            pages.push(Rc::new(Page { host: self.host.clone(), queue: self.queue, handle: dst, readonly: false }));
            masks.push(self.masks[n / cap].clone());
            self.host.synchronize(self.queue).await?;
        }
        Ok(Context {
            host: self.host.clone(),
            queue,
            model: self.model.clone(),
            pages,
            tokens: self.tokens.clone(),
            pending: None,
            tail: None,
            inputs: Vec::new(),
            dist: Some((k, dist)),
            window: self.window,
            masks,
            vocab: self.vocab.clone(),
            stream: self.stream,
            top_k: self.top_k,
        })
    }

    /// Waits for all queued work, then releases everything.
    pub async fn close(self) -> ApiResult<()> {
        self.host.synchronize(self.queue).await
    }

    pub(crate) fn take_tail(&mut self) -> Option<Embed> {
        self.tail.take()
    }

    pub(crate) fn set_tail(&mut self, e: Embed) {
        self.tail = Some(e);
    }

    pub(crate) fn take_pending(&mut self) -> Option<u32> {
        self.pending.take()
    }

    /// Appends KV already computed elsewhere: slots `[0, count)` of `src`
    /// are copied behind the current tokens.
    pub(crate) fn append_copied(&mut self, src: KvPage, tokens: &[u32]) -> ApiResult<()> {
        let cap = self.cap();
        self.reserve(tokens.len())?;
        let mut done = 0;
        while done < tokens.len() {
            let n = self.tokens.len();
            let (pi, off) = (n / cap, n % cap);
            let take = (cap - off).min(tokens.len() - done);
            self.host.copy_kvpage(self.queue, src, done..done + take, self.pages[pi].handle, off..off + take)?;
            self.tokens.extend_from_slice(&tokens[done..done + take]);
            self.masks[pi].extend(std::iter::repeat_n(false, take));
            done += take;
        }
        self.dist = None;
        Ok(())
    }
}

impl Drop for Context {
    fn drop(&mut self) {
        let mut embeds = std::mem::take(&mut self.inputs);
        embeds.extend(self.tail.take());
        if !embeds.is_empty() {
            let _ = self.host.dealloc_emb(self.queue, &embeds);
        }
    }
}
