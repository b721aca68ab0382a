//! The control layer: command queues, batch scheduling, dispatch to the
//! backend and result delivery.
//!
//! `Control` is a single-threaded coordinator. Inferlets submit calls
//! through it; every call is validated and handle-resolved at submission,
//! then waits on its queue until the scheduler places it in a batch. The
//! backend executes a batch synchronously when it is dispatched, and the
//! results are delivered once the batch's service time has elapsed on the
//! coordinator clock.

pub mod completion;
pub mod log;
pub mod scheduler;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backends::wire::{BackendRequest, Call, CallKind, CallOutput, PhysId};
use crate::backends::{Backend, ModelDescriptor, Trait};
use crate::error::{ApiError, ApiResult};
use crate::resources::{InstanceId, Lookup, ResourceHandle, ResourceKind, Resources};

pub use completion::{completion, Completion, Resolver};
pub use log::{Event, EventLog};
pub use scheduler::{form_batch, fusible, BatchCaps, Formation, PendingCall, Plan, Policy, QueueId};

use scheduler::{Effects, QueueView};

/// Synthetic per-batch service time: `c0 + c1 * units` microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceModel {
    pub c0_us: u64,
    pub c1_us: u64,
}

impl Default for ServiceModel {
    fn default() -> Self {
        ServiceModel { c0_us: 1000, c1_us: 50 }
    }
}

impl ServiceModel {
    pub fn cost(&self, units: usize) -> u64 {
        self.c0_us + self.c1_us * units as u64
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Clock {
    Virtual(u64),
    Wall(Instant),
}

impl Clock {
    pub fn now(&self) -> u64 {
        match self {
            Clock::Virtual(t) => *t,
            Clock::Wall(start) => start.elapsed().as_micros() as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlConfig {
    pub policy: Policy,
    pub caps: BatchCaps,
    pub service: ServiceModel,
    pub top_k_default: usize,
    pub log_events: bool,
    pub virtual_clock: bool,
    pub kv_pages: usize,
    pub embeds: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            policy: Policy::Adaptive,
            caps: BatchCaps::default(),
            service: ServiceModel::default(),
            top_k_default: crate::backends::DEFAULT_TOP_K,
            log_events: false,
            virtual_clock: true,
            kv_pages: 1024,
            embeds: 4096,
        }
    }
}

/// Backend activity counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BackendStats {
    pub batches: u64,
    pub calls: u64,
    pub units: u64,
    pub busy_us: u64,
    /// Batch size (calls) to number of batches.
    pub histogram: BTreeMap<usize, u64>,
    /// Forward batches only: batch size to count.
    pub forward_histogram: BTreeMap<usize, u64>,
}

struct CommandQueue {
    owner: InstanceId,
    model: usize,
    priority: i32,
    pending: VecDeque<PendingCall>,
    inflight: usize,
    deferred: Option<ApiError>,
    waiters: Vec<Resolver<ApiResult<()>>>,
}

impl CommandQueue {
    fn idle(&self) -> bool {
        self.pending.is_empty() && self.inflight == 0
    }
}

struct Inflight {
    batch: u64,
    finish_at: u64,
    model: usize,
    kind: CallKind,
    members: Vec<(QueueId, PendingCall)>,
    results: Vec<ApiResult<CallOutput>>,
}

/// Handle arguments of a forward call.
#[derive(Debug, Clone, Default)]
pub struct ForwardArgs {
    pub ikv: Vec<ResourceHandle>,
    pub iemb: Vec<ResourceHandle>,
    pub okv: Vec<ResourceHandle>,
    pub oemb: Vec<ResourceHandle>,
    pub mask: Option<Vec<Vec<bool>>>,
}

/// Next step of the FCFS contention policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arbitration {
    /// Terminate this younger instance and retry.
    Terminate(InstanceId),
    /// The requester is the most recently created instance: terminate it.
    TerminateRequester,
    /// The requester is alone; report exhaustion and let it continue.
    Exhausted,
}

/// Picks the next contention victim. `live` holds running instances as
/// (id, creation sequence). Instances created after the requester go first,
/// youngest first; once none remain the requester is itself the youngest and
/// is terminated, unless it is the only instance.
pub fn arbitrate_pool(live: &[(InstanceId, u64)], requester: InstanceId) -> Arbitration {
    match live.iter().max_by_key(|(_, created)| *created) {
        Some(&(id, _)) if id != requester => Arbitration::Terminate(id),
        _ if live.iter().any(|(id, _)| *id != requester) => Arbitration::TerminateRequester,
        _ => Arbitration::Exhausted,
    }
}

pub struct Control {
    pub resources: Resources,
    backend: Box<dyn Backend>,
    models: Vec<ModelDescriptor>,
    queues: BTreeMap<QueueId, CommandQueue>,
    next_queue: QueueId,
    next_seq: u64,
    next_batch: u64,
    config: ControlConfig,
    clock: Clock,
    inflight: Option<Inflight>,
    wake_at: Option<u64>,
    log: EventLog,
    stats: BackendStats,
}

impl std::fmt::Debug for Control {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Control")
            .field("queues", &self.queues.len())
            .field("now", &self.now())
            .field("busy", &self.inflight.is_some())
            .finish()
    }
}

impl Control {
    pub fn new(backend: Box<dyn Backend>, config: ControlConfig) -> Self {
        let models = backend.models();
        let clock = if config.virtual_clock { Clock::Virtual(0) } else { Clock::Wall(Instant::now()) };
        Control {
            resources: Resources::new(models.len(), config.kv_pages, config.embeds),
            backend,
            models,
            queues: BTreeMap::new(),
            next_queue: 1,
            next_seq: 0,
            next_batch: 0,
            config,
            clock,
            inflight: None,
            wake_at: None,
            log: EventLog::new(config.log_events),
            stats: BackendStats::default(),
        }
    }

    pub fn config(&self) -> &ControlConfig {
        &self.config
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.config.policy = policy;
    }

    pub fn set_caps(&mut self, caps: BatchCaps) {
        self.config.caps = caps;
    }

    pub fn models(&self) -> &[ModelDescriptor] {
        &self.models
    }

    pub fn model_index(&self, name: &str) -> ApiResult<usize> {
        self.models
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| ApiError::UnknownModel(name.into()))
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self.clock, Clock::Virtual(_))
    }

    /// Moves a virtual clock forward; no effect on a wall clock.
    pub fn advance_to(&mut self, t: u64) {
        if let Clock::Virtual(now) = &mut self.clock {
            *now = (*now).max(t);
        }
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn log_mut(&mut self) -> &mut EventLog {
        &mut self.log
    }

    pub fn stats(&self) -> &BackendStats {
        &self.stats
    }

    pub fn is_busy(&self) -> bool {
        self.inflight.is_some()
    }

    pub fn pending_calls(&self) -> usize {
        self.queues.values().map(|q| q.pending.len()).sum()
    }

    /// Earliest time at which the coordinator has work: a batch finishing or
    /// a time-based policy becoming eligible.
    pub fn next_deadline(&self) -> Option<u64> {
        match (&self.inflight, self.wake_at) {
            (Some(b), _) => Some(b.finish_at),
            (None, w) => w,
        }
    }

    pub fn register_instance(&mut self, id: InstanceId) {
        self.resources.create_space(id);
    }

    /// Cancels the instance's queued calls, drops its queues and releases
    /// its address space. Calls already dispatched finish normally but their
    /// results are discarded.
    pub fn retire_instance(&mut self, id: InstanceId) {
        let now = self.now();
        let owned: Vec<QueueId> = self.queues.iter().filter(|(_, q)| q.owner == id).map(|(k, _)| *k).collect();
        for qid in owned {
            let q = self.queues.remove(&qid).expect("queue listed");
            for pc in q.pending {
                self.log.push(|| Event::Cancel { t: now, queue: qid, instance: id, seq: pc.seq });
                apply_effects(&mut self.resources, q.model, &pc.effects);
                if let Some(r) = pc.reply {
                    r.resolve(Err(ApiError::Terminated("instance exited".into())));
                }
            }
            for w in q.waiters {
                w.resolve(Err(ApiError::Terminated("instance exited".into())));
            }
        }
        self.resources.destroy_space(id);
    }

    fn queue(&self, inst: InstanceId, q: QueueId) -> ApiResult<&CommandQueue> {
        self.queues.get(&q).filter(|c| c.owner == inst).ok_or(ApiError::InvalidQueue)
    }

    fn require(&self, model: usize, t: Trait) -> ApiResult<()> {
        if self.models[model].has(t) {
            Ok(())
        } else {
            Err(ApiError::MissingTrait(t))
        }
    }

    pub fn create_queue(&mut self, inst: InstanceId, model: &str) -> ApiResult<QueueId> {
        let model = self.model_index(model)?;
        if !self.resources.has_space(inst) {
            return Err(ApiError::Terminated("instance exited".into()));
        }
        let id = self.next_queue;
        self.next_queue += 1;
        self.queues.insert(
            id,
            CommandQueue {
                owner: inst,
                model,
                priority: 0,
                pending: VecDeque::new(),
                inflight: 0,
                deferred: None,
                waiters: Vec::new(),
            },
        );
        Ok(id)
    }

    pub fn queue_model(&self, inst: InstanceId, q: QueueId) -> ApiResult<usize> {
        self.queue(inst, q).map(|c| c.model)
    }

    pub fn set_priority(&mut self, inst: InstanceId, q: QueueId, priority: i32) -> ApiResult<()> {
        self.queue(inst, q)?;
        self.queues.get_mut(&q).expect("checked").priority = priority;
        Ok(())
    }

    /// Resolves when the queue has neither pending nor inflight calls, with
    /// the first deferred error raised by a fire-and-forget call since the
    /// previous synchronize.
    pub fn synchronize(&mut self, inst: InstanceId, q: QueueId) -> ApiResult<Completion<ApiResult<()>>> {
        self.queue(inst, q)?;
        let queue = self.queues.get_mut(&q).expect("checked");
        if queue.idle() {
            return Ok(Completion::ready(queue.deferred.take().map_or(Ok(()), Err)));
        }
        let (r, c) = completion();
        queue.waiters.push(r);
        Ok(c)
    }

    fn push(
        &mut self,
        inst: InstanceId,
        q: QueueId,
        call: Call,
        positions: Option<Vec<u32>>,
        reply: Option<Resolver<ApiResult<CallOutput>>>,
        effects: Effects,
    ) {
        let now = self.now();
        let seq = self.next_seq;
        self.next_seq += 1;
        let (kind, units) = (call.kind(), call.units());
        self.log.push(|| Event::Submit { t: now, queue: q, instance: inst, call: kind, seq, units });
        let queue = self.queues.get_mut(&q).expect("validated queue");
        queue.pending.push_back(PendingCall { call, instance: inst, seq, enqueued_at: now, positions, reply, effects });
    }

    fn push_reply(&mut self, inst: InstanceId, q: QueueId, call: Call) -> Completion<ApiResult<CallOutput>> {
        let (r, c) = completion();
        self.push(inst, q, call, None, Some(r), Effects::default());
        c
    }

    fn kv_phys(&self, inst: InstanceId, model: usize, h: &ResourceHandle) -> ApiResult<(PhysId, bool)> {
        let m = self.resources.kv(inst, h).map_err(Lookup::for_use)?;
        if m.model != model {
            return Err(ApiError::InvalidHandle);
        }
        Ok((m.phys, self.resources.kv_mutable(m)))
    }

    fn emb_phys(&self, inst: InstanceId, model: usize, h: &ResourceHandle) -> ApiResult<(PhysId, Option<u32>)> {
        let m = self.resources.emb(inst, h).map_err(Lookup::for_use)?;
        if m.model != model {
            return Err(ApiError::InvalidHandle);
        }
        Ok((m.phys, m.position))
    }

    /// Reserves `n` resources now and queues the backend-side reset.
    /// `PoolExhausted` is returned without side effects so the caller can
    /// run the contention policy and retry.
    pub fn alloc(&mut self, inst: InstanceId, q: QueueId, kind: ResourceKind, n: usize) -> ApiResult<Vec<ResourceHandle>> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::Allocate)?;
        let granted = match kind {
            ResourceKind::KvPage => self.resources.alloc_kv(inst, model, n),
            ResourceKind::Embed => self.resources.alloc_emb(inst, model, n),
        };
        let now = self.now();
        self.log.push(|| Event::Alloc {
            t: now,
            instance: inst,
            model,
            kind: format!("{kind:?}"),
            count: n,
            granted: granted.is_ok(),
        });
        let granted = granted?;
        let phys: Vec<PhysId> = granted.iter().map(|g| g.1).collect();
        let call = match kind {
            ResourceKind::KvPage => Call::AllocKv { pages: phys },
            ResourceKind::Embed => Call::AllocEmb { embeds: phys },
        };
        self.push(inst, q, call, None, None, Effects::default());
        Ok(granted.into_iter().map(|g| g.0).collect())
    }

    /// Invalidates the handles immediately; the physical slots return to
    /// the pool once the queued call completes.
    pub fn dealloc(&mut self, inst: InstanceId, q: QueueId, kind: ResourceKind, handles: &[ResourceHandle]) -> ApiResult<()> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::Allocate)?;
        for h in handles {
            let m = match kind {
                ResourceKind::KvPage => self.resources.kv(inst, h).map(|m| m.model),
                ResourceKind::Embed => self.resources.emb(inst, h).map(|m| m.model),
            };
            if m.map_err(Lookup::for_free)? != model {
                return Err(ApiError::InvalidHandle);
            }
        }
        if handles.is_empty() {
            return Ok(());
        }
        let (call, effects) = match kind {
            ResourceKind::KvPage => {
                let phys = self.resources.unmap_kv(inst, handles)?;
                (Call::DeallocKv { pages: phys.clone() }, Effects { release_kv: phys, ..Effects::default() })
            }
            ResourceKind::Embed => {
                let phys = self.resources.unmap_emb(inst, handles)?;
                (Call::DeallocEmb { embeds: phys.clone() }, Effects { release_emb: phys, ..Effects::default() })
            }
        };
        self.push(inst, q, call, None, None, effects);
        Ok(())
    }

    pub fn embed_txt(
        &mut self,
        inst: InstanceId,
        q: QueueId,
        tokens: &[u32],
        positions: &[u32],
        embeds: &[ResourceHandle],
    ) -> ApiResult<()> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::InputText)?;
        if tokens.len() != positions.len() || tokens.len() != embeds.len() {
            return Err(ApiError::LengthMismatch);
        }
        let phys = embeds
            .iter()
            .map(|h| self.emb_phys(inst, model, h).map(|p| p.0))
            .collect::<ApiResult<Vec<_>>>()?;
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.models[model].vocab_size) {
            return Err(ApiError::UnknownTokenId(t));
        }
        if tokens.is_empty() {
            return Ok(());
        }
        for (h, &p) in embeds.iter().zip(positions) {
            self.resources.set_emb_position(inst, h, Some(p));
        }
        let call = Call::EmbedText { tokens: tokens.to_vec(), positions: positions.to_vec(), embeds: phys };
        self.push(inst, q, call, None, None, Effects::default());
        Ok(())
    }

    pub fn forward(&mut self, inst: InstanceId, q: QueueId, args: ForwardArgs) -> ApiResult<()> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::Forward)?;
        if args.iemb.is_empty() {
            return Err(ApiError::InvalidArgument("forward needs at least one input embed".into()));
        }
        if args.oemb.len() > args.iemb.len() {
            return Err(ApiError::LengthMismatch);
        }
        let ikv = args
            .ikv
            .iter()
            .map(|h| self.kv_phys(inst, model, h).map(|p| p.0))
            .collect::<ApiResult<Vec<_>>>()?;
        let mut okv = Vec::with_capacity(args.okv.len());
        for h in &args.okv {
            let (p, mutable) = self.kv_phys(inst, model, h)?;
            if !mutable {
                return Err(ApiError::ImmutableTarget);
            }
            okv.push(p);
        }
        let mut iemb = Vec::with_capacity(args.iemb.len());
        let mut positions = Some(Vec::with_capacity(args.iemb.len()));
        for h in &args.iemb {
            let (p, pos) = self.emb_phys(inst, model, h)?;
            iemb.push(p);
            match (pos, positions.as_mut()) {
                (Some(pos), Some(v)) => v.push(pos),
                _ => positions = None,
            }
        }
        let oemb = args
            .oemb
            .iter()
            .map(|h| self.emb_phys(inst, model, h).map(|p| p.0))
            .collect::<ApiResult<Vec<_>>>()?;
        for h in &args.oemb {
            self.resources.set_emb_position(inst, h, None);
        }
        self.resources.add_pending_write(model, &okv);
        let effects = Effects { writes: okv.clone(), ..Effects::default() };
        let call = Call::Forward { ikv, iemb, okv, oemb, mask: args.mask };
        self.push(inst, q, call, positions, None, effects);
        Ok(())
    }

    pub fn next_dist(
        &mut self,
        inst: InstanceId,
        q: QueueId,
        emb: &ResourceHandle,
        k: Option<usize>,
    ) -> ApiResult<Completion<ApiResult<CallOutput>>> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::OutputText)?;
        let (embed, _) = self.emb_phys(inst, model, emb)?;
        let k = k.unwrap_or(self.config.top_k_default);
        if k == 0 {
            return Err(ApiError::InvalidArgument("k must be positive".into()));
        }
        Ok(self.push_reply(inst, q, Call::NextDist { embed, k }))
    }

    pub fn mask(&mut self, inst: InstanceId, q: QueueId, page: &ResourceHandle, mask: &[bool]) -> ApiResult<()> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::Forward)?;
        let (phys, mutable) = self.kv_phys(inst, model, page)?;
        if !mutable {
            return Err(ApiError::ImmutableTarget);
        }
        self.resources.add_pending_write(model, &[phys]);
        let effects = Effects { writes: vec![phys], ..Effects::default() };
        self.push(inst, q, Call::Mask { page: phys, mask: mask.to_vec() }, None, None, effects);
        Ok(())
    }

    pub fn copy(
        &mut self,
        inst: InstanceId,
        q: QueueId,
        src: &ResourceHandle,
        src_range: Range<usize>,
        dst: &ResourceHandle,
        dst_range: Range<usize>,
    ) -> ApiResult<()> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::Allocate)?;
        let (src_phys, _) = self.kv_phys(inst, model, src)?;
        let (dst_phys, mutable) = self.kv_phys(inst, model, dst)?;
        if !mutable {
            return Err(ApiError::ImmutableTarget);
        }
        let cap = self.models[model].page_capacity;
        if src_range.len() != dst_range.len()
            || src_range.start > src_range.end
            || src_range.end > cap
            || dst_range.end > cap
        {
            return Err(ApiError::RangeMismatch);
        }
        if src_range.is_empty() {
            return Ok(());
        }
        self.resources.add_pending_write(model, &[dst_phys]);
        let effects = Effects { writes: vec![dst_phys], ..Effects::default() };
        let call = Call::Copy {
            src: src_phys,
            src_start: src_range.start,
            dst: dst_phys,
            dst_start: dst_range.start,
            len: src_range.len(),
        };
        self.push(inst, q, call, None, None, effects);
        Ok(())
    }

    pub fn tokenize(&mut self, inst: InstanceId, q: QueueId, text: &[u8]) -> ApiResult<Completion<ApiResult<CallOutput>>> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::Tokenize)?;
        Ok(self.push_reply(inst, q, Call::Tokenize { text: text.to_vec() }))
    }

    pub fn detokenize(&mut self, inst: InstanceId, q: QueueId, ids: &[u32]) -> ApiResult<Completion<ApiResult<CallOutput>>> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::Tokenize)?;
        Ok(self.push_reply(inst, q, Call::Detokenize { ids: ids.to_vec() }))
    }

    pub fn vocab(&mut self, inst: InstanceId, q: QueueId) -> ApiResult<Completion<ApiResult<CallOutput>>> {
        let model = self.queue(inst, q)?.model;
        self.require(model, Trait::Tokenize)?;
        Ok(self.push_reply(inst, q, Call::Vocab))
    }

    pub fn export(&mut self, inst: InstanceId, handles: &[ResourceHandle], name: &str) -> ApiResult<()> {
        if let Some(h) = handles.first() {
            let model = self.resources.kv(inst, h).map_err(Lookup::for_use)?.model;
            self.require(model, Trait::Allocate)?;
        }
        self.resources.export(inst, handles, name)
    }

    pub fn import(&mut self, inst: InstanceId, name: &str) -> ApiResult<Vec<ResourceHandle>> {
        self.resources.import(inst, name).map(|(_, h)| h)
    }

    pub fn unexport(&mut self, inst: InstanceId, name: &str) -> ApiResult<()> {
        self.resources.unexport(inst, name)
    }

    /// Delivers the inflight batch if its finish time has passed. Returns
    /// whether anything was delivered.
    pub fn complete_due(&mut self) -> bool {
        let now = self.now();
        match &self.inflight {
            Some(b) if b.finish_at <= now => {}
            _ => return false,
        }
        let batch = self.inflight.take().expect("checked");
        let mut touched = BTreeSet::new();
        for ((qid, pc), result) in batch.members.into_iter().zip(batch.results) {
            apply_effects(&mut self.resources, batch.model, &pc.effects);
            let ok = result.is_ok();
            let positions = match (&pc.positions, batch.kind) {
                (Some(p), CallKind::Forward) if ok => p.clone(),
                _ => Vec::new(),
            };
            self.log.push(|| Event::Complete {
                t: now,
                batch: batch.batch,
                queue: qid,
                instance: pc.instance,
                call: batch.kind,
                seq: pc.seq,
                ok,
                positions,
            });
            let Some(queue) = self.queues.get_mut(&qid) else { continue };
            queue.inflight -= 1;
            touched.insert(qid);
            match (pc.reply, result) {
                (Some(r), res) => r.resolve(res),
                (None, Err(e)) => {
                    queue.deferred.get_or_insert(e);
                }
                (None, Ok(_)) => {}
            }
        }
        for qid in touched {
            let queue = self.queues.get_mut(&qid).expect("touched queue exists");
            if queue.idle() && !queue.waiters.is_empty() {
                let res = queue.deferred.take().map_or(Ok(()), Err);
                for w in queue.waiters.drain(..) {
                    w.resolve(res.clone());
                }
            }
        }
        true
    }

    /// Forms and executes a batch if the backend is idle and the policy
    /// allows it. Returns whether a batch was dispatched.
    pub fn try_dispatch(&mut self) -> bool {
        self.dispatch_under(self.config.policy)
    }

    /// Dispatches whatever is pending, ignoring a batch-size threshold.
    /// Used when nothing else can happen: without it a size-based policy
    /// would wait forever once fewer than `k` calls can ever be pending.
    pub fn flush_stalled(&mut self) -> bool {
        if self.inflight.is_some() || self.wake_at.is_some() || self.pending_calls() == 0 {
            return false;
        }
        match self.config.policy {
            Policy::K(_) => self.dispatch_under(Policy::Adaptive),
            _ => false,
        }
    }

    fn dispatch_under(&mut self, policy: Policy) -> bool {
        if self.inflight.is_some() {
            return false;
        }
        let now = self.now();
        let views: Vec<QueueView<'_>> = self
            .queues
            .iter()
            .filter(|(_, q)| !q.pending.is_empty())
            .map(|(&id, q)| QueueView { id, model: q.model, priority: q.priority, pending: &q.pending })
            .collect();
        let plan = match form_batch(&views, policy, self.config.caps, now) {
            Formation::Dispatch(plan) => plan,
            Formation::WaitUntil(t) => {
                self.wake_at = Some(t);
                return false;
            }
            Formation::Idle => {
                self.wake_at = None;
                return false;
            }
        };
        self.wake_at = None;
        let batch = self.next_batch;
        self.next_batch += 1;

        let mut members = Vec::with_capacity(plan.calls());
        for &(qid, n) in &plan.take {
            let queue = self.queues.get_mut(&qid).expect("planned queue");
            queue.inflight += n;
            members.extend(queue.pending.drain(..n).map(|pc| (qid, pc)));
        }
        let mut groups = Vec::with_capacity(members.len());
        let mut group = 0u32;
        for (i, (qid, _)) in members.iter().enumerate() {
            if i > 0 && members[i - 1].0 != *qid {
                group += 1;
            }
            groups.push(group);
        }
        let req = BackendRequest {
            model: plan.model,
            kind: plan.kind,
            calls: members.iter().map(|(_, pc)| pc.call.clone()).collect(),
            groups,
        };
        let units: usize = req.calls.iter().map(Call::units).sum();
        let calls = req.calls.len();
        self.log.push(|| Event::Form { t: now, batch, call: plan.kind, model: plan.model, calls, units });

        let started = Instant::now();
        let resp = self.backend.execute(&req);
        let (cost, finish_at) = if self.is_virtual() {
            let cost = self.config.service.cost(units);
            (cost, now + cost)
        } else {
            let cost = started.elapsed().as_micros() as u64;
            (cost, now + cost)
        };
        self.log.push(|| Event::Dispatch { t: now, batch, cost_us: cost, finish_at });

        self.stats.batches += 1;
        self.stats.calls += calls as u64;
        self.stats.units += units as u64;
        self.stats.busy_us += cost;
        *self.stats.histogram.entry(calls).or_default() += 1;
        if plan.kind == CallKind::Forward {
            *self.stats.forward_histogram.entry(calls).or_default() += 1;
        }

        let mut results = resp.results;
        results.resize_with(calls, || Err(ApiError::Backend("missing result".into())));
        self.inflight = Some(Inflight { batch, finish_at, model: plan.model, kind: plan.kind, members, results });
        true
    }
}

fn apply_effects(resources: &mut Resources, model: usize, effects: &Effects) {
    resources.release_kv(model, &effects.release_kv);
    resources.release_emb(model, &effects.release_emb);
    resources.finish_pending_write(model, &effects.writes);
}
