//! The host API as seen by an inferlet.
//!
//! Every method is scoped to the calling instance. Calls that involve a
//! command queue are validated immediately and executed later by the
//! backend; those that return data do so through a completion future.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use super::http::{HttpResponse, Method};
use super::{InstanceStatus, KernelState};
use crate::backends::wire::CallOutput;
use crate::backends::{Distribution, ModelDescriptor, Trait};
use crate::control::completion::Map;
use crate::control::{arbitrate_pool, completion, Arbitration, Completion, ForwardArgs, QueueId};
use crate::error::{ApiError, ApiResult};
use crate::resources::{InstanceId, ResourceHandle, ResourceKind};

pub type KvPage = ResourceHandle;
pub type Embed = ResourceHandle;

/// A command queue owned by the calling instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Queue(pub QueueId);

/// A topic subscription owned by the calling instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subscription(pub u64);

pub type CallFuture<T> = Map<ApiResult<CallOutput>, fn(ApiResult<CallOutput>) -> ApiResult<T>>;

fn unexpected(o: CallOutput) -> ApiError {
    ApiError::Backend(format!("unexpected call output {o:?}"))
}

fn as_dist(r: ApiResult<CallOutput>) -> ApiResult<Distribution> {
    match r? {
        CallOutput::Dist(d) => Ok(d),
        o => Err(unexpected(o)),
    }
}

fn as_tokens(r: ApiResult<CallOutput>) -> ApiResult<Vec<u32>> {
    match r? {
        CallOutput::Tokens(t) => Ok(t),
        o => Err(unexpected(o)),
    }
}

fn as_bytes(r: ApiResult<CallOutput>) -> ApiResult<Vec<u8>> {
    match r? {
        CallOutput::Bytes(b) => Ok(b),
        o => Err(unexpected(o)),
    }
}

fn as_vocab(r: ApiResult<CallOutput>) -> ApiResult<Vec<Vec<u8>>> {
    match r? {
        CallOutput::Vocab(v) => Ok(v),
        o => Err(unexpected(o)),
    }
}

fn typed<T>(
    r: ApiResult<Completion<ApiResult<CallOutput>>>,
    f: fn(ApiResult<CallOutput>) -> ApiResult<T>,
) -> CallFuture<T> {
    r.unwrap_or_else(|e| Completion::ready(Err(e))).map(f)
}

/// Capability handle passed to an inferlet's entry point.
#[derive(Clone)]
pub struct Host {
    pub(crate) state: Rc<RefCell<KernelState>>,
    pub(crate) id: InstanceId,
}

impl std::fmt::Debug for Host {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Host").field("instance", &self.id).finish()
    }
}

impl Host {
    pub fn instance_id(&self) -> InstanceId {
        self.id
    }

    fn with<T>(&self, f: impl FnOnce(&mut KernelState) -> ApiResult<T>) -> ApiResult<T> {
        let mut st = self.state.borrow_mut();
        st.check_running(self.id)?;
        f(&mut st)
    }

    // Runtime and messaging.

    pub fn get_arg(&self) -> Vec<String> {
        self.state.borrow().instances.get(&self.id).map(|i| i.args.clone()).unwrap_or_default()
    }

    pub fn send(&self, msg: impl AsRef<[u8]>) -> ApiResult<()> {
        self.with(|st| {
            st.emit_message(self.id, msg.as_ref().to_vec());
            Ok(())
        })
    }

    /// Next client message. Resolves to `ClientGone` once the client has
    /// disconnected and the mailbox is empty.
    pub fn receive(&self) -> Completion<ApiResult<Vec<u8>>> {
        self.with(|st| Ok(st.receive(self.id))).unwrap_or_else(|e| Completion::ready(Err(e)))
    }

    pub fn broadcast(&self, topic: &str, msg: impl AsRef<[u8]>) -> ApiResult<()> {
        self.with(|st| {
            st.broadcast(topic, msg.as_ref());
            Ok(())
        })
    }

    pub fn subscribe(&self, topic: &str) -> ApiResult<Subscription> {
        self.with(|st| Ok(st.subscribe(self.id, topic)))
    }

    pub fn unsubscribe(&self, sub: Subscription) -> ApiResult<()> {
        self.with(|st| st.unsubscribe(self.id, sub))
    }

    /// Next message published on the subscription's topic.
    pub fn next_message(&self, sub: Subscription) -> Completion<ApiResult<Vec<u8>>> {
        self.with(|st| st.next_message(self.id, sub)).unwrap_or_else(|e| Completion::ready(Err(e)))
    }

    fn http(&self, method: Method, url: &str, body: Vec<u8>) -> Completion<ApiResult<HttpResponse>> {
        let (r, c) = completion();
        let mut st = self.state.borrow_mut();
        if let Err(e) = st.check_running(self.id) {
            return Completion::ready(Err(e));
        }
        let now = st.control.now();
        st.http.start(method, url, body, now, r);
        c
    }

    pub fn http_get(&self, url: &str) -> Completion<ApiResult<HttpResponse>> {
        self.http(Method::Get, url, Vec::new())
    }

    pub fn http_post(&self, url: &str, body: impl Into<Vec<u8>>) -> Completion<ApiResult<HttpResponse>> {
        self.http(Method::Post, url, body.into())
    }

    pub fn available_models(&self) -> Vec<ModelDescriptor> {
        self.state.borrow().control.models().to_vec()
    }

    pub fn available_traits(&self, model: &str) -> ApiResult<Vec<Trait>> {
        let st = self.state.borrow();
        let i = st.control.model_index(model)?;
        Ok(st.control.models()[i].traits.iter().copied().collect())
    }

    // Queues.

    pub fn create_queue(&self, model: &str) -> ApiResult<Queue> {
        self.with(|st| st.control.create_queue(self.id, model).map(Queue))
    }

    pub fn queue_model(&self, q: Queue) -> ApiResult<ModelDescriptor> {
        self.with(|st| {
            let i = st.control.queue_model(self.id, q.0)?;
            Ok(st.control.models()[i].clone())
        })
    }

    pub fn set_queue_priority(&self, q: Queue, priority: i32) -> ApiResult<()> {
        self.with(|st| st.control.set_priority(self.id, q.0, priority))
    }

    pub fn synchronize(&self, q: Queue) -> Completion<ApiResult<()>> {
        self.with(|st| st.control.synchronize(self.id, q.0)).unwrap_or_else(|e| Completion::ready(Err(e)))
    }

    // Resources.

    fn alloc(&self, q: Queue, kind: ResourceKind, n: usize) -> ApiResult<Vec<ResourceHandle>> {
        self.with(|st| loop {
            match st.control.alloc(self.id, q.0, kind, n) {
                Err(ApiError::PoolExhausted) => match arbitrate_pool(&st.live(), self.id) {
                    Arbitration::Terminate(victim) => {
                        st.exit(victim, InstanceStatus::Terminated("resource contention".into()));
                    }
                    Arbitration::TerminateRequester => {
                        st.exit(self.id, InstanceStatus::Terminated("resource contention".into()));
                        return Err(ApiError::Terminated("resource contention".into()));
                    }
                    Arbitration::Exhausted => return Err(ApiError::PoolExhausted),
                },
                other => return other,
            }
        })
    }

    pub fn alloc_kvpage(&self, q: Queue, count: usize) -> ApiResult<Vec<KvPage>> {
        self.alloc(q, ResourceKind::KvPage, count)
    }

    pub fn alloc_emb(&self, q: Queue, count: usize) -> ApiResult<Vec<Embed>> {
        self.alloc(q, ResourceKind::Embed, count)
    }

    pub fn dealloc_kvpage(&self, q: Queue, pages: &[KvPage]) -> ApiResult<()> {
        self.with(|st| st.control.dealloc(self.id, q.0, ResourceKind::KvPage, pages))
    }

    pub fn dealloc_emb(&self, q: Queue, embeds: &[Embed]) -> ApiResult<()> {
        self.with(|st| st.control.dealloc(self.id, q.0, ResourceKind::Embed, embeds))
    }

    pub fn copy_kvpage(&self, q: Queue, src: KvPage, src_range: Range<usize>, dst: KvPage, dst_range: Range<usize>) -> ApiResult<()> {
        self.with(|st| st.control.copy(self.id, q.0, &src, src_range, &dst, dst_range))
    }

    pub fn mask_kvpage(&self, q: Queue, page: KvPage, mask: &[bool]) -> ApiResult<()> {
        self.with(|st| st.control.mask(self.id, q.0, &page, mask))
    }

    pub fn export_kvpage(&self, pages: &[KvPage], name: &str) -> ApiResult<()> {
        self.with(|st| st.control.export(self.id, pages, name))
    }

    pub fn import_kvpage(&self, name: &str) -> ApiResult<Vec<KvPage>> {
        self.with(|st| st.control.import(self.id, name))
    }

    pub fn unexport_kvpage(&self, name: &str) -> ApiResult<()> {
        self.with(|st| st.control.unexport(self.id, name))
    }

    // Model calls.

    pub fn tokenize(&self, q: Queue, text: &str) -> CallFuture<Vec<u32>> {
        self.tokenize_bytes(q, text.as_bytes())
    }

    pub fn tokenize_bytes(&self, q: Queue, text: &[u8]) -> CallFuture<Vec<u32>> {
        typed(self.with(|st| st.control.tokenize(self.id, q.0, text)), as_tokens)
    }

    pub fn detokenize(&self, q: Queue, ids: &[u32]) -> CallFuture<Vec<u8>> {
        typed(self.with(|st| st.control.detokenize(self.id, q.0, ids)), as_bytes)
    }

    pub fn get_vocabs(&self, q: Queue) -> CallFuture<Vec<Vec<u8>>> {
        typed(self.with(|st| st.control.vocab(self.id, q.0)), as_vocab)
    }

    pub fn embed_txt(&self, q: Queue, tokens: &[u32], positions: &[u32], embeds: &[Embed]) -> ApiResult<()> {
        self.with(|st| st.control.embed_txt(self.id, q.0, tokens, positions, embeds))
    }

    pub fn forward(&self, q: Queue, ikv: &[KvPage], iemb: &[Embed], okv: &[KvPage], oemb: &[Embed]) -> ApiResult<()> {
        self.forward_with(
            q,
            ForwardArgs { ikv: ikv.to_vec(), iemb: iemb.to_vec(), okv: okv.to_vec(), oemb: oemb.to_vec(), mask: None },
        )
    }

    /// Forward with an explicit attention mask: one row per input embed,
    /// one column per unmasked context token followed by one per input.
    pub fn forward_masked(
        &self,
        q: Queue,
        ikv: &[KvPage],
        iemb: &[Embed],
        okv: &[KvPage],
        oemb: &[Embed],
        mask: Vec<Vec<bool>>,
    ) -> ApiResult<()> {
        self.forward_with(
            q,
            ForwardArgs {
                ikv: ikv.to_vec(),
                iemb: iemb.to_vec(),
                okv: okv.to_vec(),
                oemb: oemb.to_vec(),
                mask: Some(mask),
            },
        )
    }

    pub fn forward_with(&self, q: Queue, args: ForwardArgs) -> ApiResult<()> {
        self.with(|st| st.control.forward(self.id, q.0, args))
    }

    pub fn get_next_dist(&self, q: Queue, emb: Embed) -> CallFuture<Distribution> {
        typed(self.with(|st| st.control.next_dist(self.id, q.0, &emb, None)), as_dist)
    }

    pub fn get_next_dist_k(&self, q: Queue, emb: Embed, k: usize) -> CallFuture<Distribution> {
        typed(self.with(|st| st.control.next_dist(self.id, q.0, &emb, Some(k))), as_dist)
    }
}
