//! The application layer: inferlet lifecycle, the single-threaded executor
//! that drives inferlet futures, messaging, pub/sub and outbound HTTP.
//!
//! A [`Kernel`] owns the control layer and every running instance. It is
//! driven explicitly: [`Kernel::run_now`] does all work available at the
//! current instant, and on a virtual clock [`Kernel::run_until_idle`] keeps
//! advancing time to the next event until nothing is left to do.

mod host;
pub mod http;
pub mod programs;
#[cfg(feature = "wasm")]
pub mod wasm;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::future::Future;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backends::process::ProcessBackend;
use crate::backends::wire::BackendInit;
use crate::backends::{Backend, LocalBackend, ModelDescriptor, ModelSpec};
use crate::control::{completion, BatchCaps, Completion, Control, ControlConfig, Event, Policy, Resolver, ServiceModel};
use crate::error::{ApiError, ApiResult, InferletError, LaunchError};
use crate::resources::InstanceId;

pub use host::{CallFuture, Embed, Host, KvPage, Queue, Subscription};
pub use http::{Fixture, HttpResponse, Method};
pub use programs::{program_hash, BuiltinFn, InferletFuture, ProgramRegistry};

/// Kernel configuration. Field names double as the server config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub models: Vec<ModelSpec>,
    pub kv_pages: usize,
    pub embeds: usize,
    pub page_capacity: usize,
    pub top_k_default: usize,
    pub max_batch_tokens: usize,
    pub max_batch_calls: usize,
    pub policy: Policy,
    pub service_c0_us: u64,
    pub service_c1_us: u64,
    pub http_allowlist: Vec<String>,
    pub http_timeout_ms: u64,
    pub mailbox_capacity: usize,
    pub log_events: bool,
    pub virtual_clock: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            models: vec![ModelSpec::mock("mock-hash"), ModelSpec::transformer("toy-transformer", 42)],
            kv_pages: 4096,
            embeds: 8192,
            page_capacity: 16,
            top_k_default: crate::backends::DEFAULT_TOP_K,
            max_batch_tokens: 4096,
            max_batch_calls: 256,
            policy: Policy::Adaptive,
            service_c0_us: 1000,
            service_c1_us: 50,
            http_allowlist: Vec::new(),
            http_timeout_ms: 30_000,
            mailbox_capacity: 1024,
            log_events: false,
            virtual_clock: true,
        }
    }
}

impl KernelConfig {
    pub fn backend_init(&self) -> BackendInit {
        BackendInit {
            models: self.models.clone(),
            kv_pages: self.kv_pages,
            embeds: self.embeds,
            page_capacity: self.page_capacity,
            max_batch_tokens: self.max_batch_tokens,
        }
    }

    fn control_config(&self) -> ControlConfig {
        ControlConfig {
            policy: self.policy,
            caps: BatchCaps { max_batch_tokens: self.max_batch_tokens, max_batch_calls: self.max_batch_calls },
            service: ServiceModel { c0_us: self.service_c0_us, c1_us: self.service_c1_us },
            top_k_default: self.top_k_default,
            log_events: self.log_events,
            virtual_clock: self.virtual_clock,
            kv_pages: self.kv_pages,
            embeds: self.embeds,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(1..=32).contains(&self.page_capacity) {
            return Err(format!("page_capacity must be in 1..=32, got {}", self.page_capacity));
        }
        if self.models.is_empty() {
            return Err("at least one model is required".into());
        }
        let names: BTreeSet<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        if names.len() != self.models.len() {
            return Err("model names must be unique".into());
        }
        if self.max_batch_tokens == 0 || self.max_batch_calls == 0 || self.mailbox_capacity == 0 {
            return Err("batch caps and mailbox capacity must be positive".into());
        }
        if self.top_k_default == 0 {
            return Err("top_k_default must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail", rename_all = "snake_case")]
pub enum InstanceStatus {
    Running,
    Finished(String),
    Failed(String),
    Terminated(String),
}

impl InstanceStatus {
    pub fn is_running(&self) -> bool {
        matches!(self, InstanceStatus::Running)
    }

    pub fn label(&self) -> &'static str {
        match self {
            InstanceStatus::Running => "running",
            InstanceStatus::Finished(_) => "finished",
            InstanceStatus::Failed(_) => "failed",
            InstanceStatus::Terminated(_) => "terminated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputKind {
    Message(Vec<u8>),
    Exit(InstanceStatus),
}

/// Something an instance produced for its client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputEvent {
    pub t: u64,
    pub instance: InstanceId,
    pub kind: OutputKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchInfo {
    pub instance: InstanceId,
    pub program: String,
    pub cache_hit: bool,
    pub latency_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub id: InstanceId,
    pub program: String,
    pub args: Vec<String>,
    pub created_at: u64,
    pub status: InstanceStatus,
}

/// Messages and exit status of one completed run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub instance: InstanceId,
    pub messages: Vec<Vec<u8>>,
    pub status: InstanceStatus,
    pub finished_at: u64,
}

impl RunResult {
    pub fn text(&self) -> String {
        self.messages.iter().map(|m| String::from_utf8_lossy(m)).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backend start failed: {0}")]
    Backend(#[from] std::io::Error),
}

struct Sub {
    topic: String,
    queue: VecDeque<Vec<u8>>,
    waiter: Option<Resolver<ApiResult<Vec<u8>>>>,
}

pub(crate) struct Instance {
    program: String,
    pub(crate) args: Vec<String>,
    created_at: u64,
    status: InstanceStatus,
    mailbox: VecDeque<Vec<u8>>,
    receivers: VecDeque<Resolver<ApiResult<Vec<u8>>>>,
    client_gone: bool,
    subs: BTreeMap<u64, Sub>,
}

/// State shared between the kernel and every [`Host`].
pub(crate) struct KernelState {
    pub(crate) control: Control,
    pub(crate) instances: BTreeMap<InstanceId, Instance>,
    pub(crate) http: http::HttpState,
    topics: BTreeMap<String, BTreeSet<(InstanceId, u64)>>,
    outputs: Vec<OutputEvent>,
    to_reap: Vec<InstanceId>,
    next_instance: InstanceId,
    next_sub: u64,
    mailbox_capacity: usize,
}

impl KernelState {
    pub(crate) fn check_running(&self, id: InstanceId) -> ApiResult<()> {
        match self.instances.get(&id).map(|i| &i.status) {
            Some(InstanceStatus::Running) => Ok(()),
            Some(InstanceStatus::Terminated(r)) => Err(ApiError::Terminated(r.clone())),
            _ => Err(ApiError::Terminated("instance exited".into())),
        }
    }

    /// Running instances as (id, creation sequence). Ids are issued in
    /// creation order.
    pub(crate) fn live(&self) -> Vec<(InstanceId, u64)> {
        self.instances.iter().filter(|(_, i)| i.status.is_running()).map(|(&id, _)| (id, id)).collect()
    }

    pub(crate) fn emit_message(&mut self, id: InstanceId, msg: Vec<u8>) {
        let t = self.control.now();
        self.outputs.push(OutputEvent { t, instance: id, kind: OutputKind::Message(msg) });
    }

    /// Moves an instance out of `Running` and releases everything it owns.
    pub(crate) fn exit(&mut self, id: InstanceId, status: InstanceStatus) -> bool {
        let Some(inst) = self.instances.get_mut(&id) else { return false };
        if !inst.status.is_running() {
            return false;
        }
        inst.status = status.clone();
        inst.mailbox.clear();
        inst.receivers.clear();
        let subs = std::mem::take(&mut inst.subs);
        for (sid, sub) in subs {
            if let Some(set) = self.topics.get_mut(&sub.topic) {
                set.remove(&(id, sid));
            }
        }
        self.control.retire_instance(id);
        let t = self.control.now();
        let label = match &status {
            InstanceStatus::Running => "running".to_string(),
            InstanceStatus::Finished(_) => "finished".to_string(),
            InstanceStatus::Failed(e) => format!("failed: {e}"),
            InstanceStatus::Terminated(r) => format!("terminated: {r}"),
        };
        self.control.log_mut().push(|| Event::Exit { t, instance: id, status: label });
        self.outputs.push(OutputEvent { t, instance: id, kind: OutputKind::Exit(status) });
        self.to_reap.push(id);
        true
    }

    pub(crate) fn receive(&mut self, id: InstanceId) -> Completion<ApiResult<Vec<u8>>> {
        let inst = self.instances.get_mut(&id).expect("running instance");
        if let Some(m) = inst.mailbox.pop_front() {
            return Completion::ready(Ok(m));
        }
        if inst.client_gone {
            return Completion::ready(Err(ApiError::ClientGone));
        }
        let (r, c) = completion();
        inst.receivers.push_back(r);
        c
    }

    pub(crate) fn subscribe(&mut self, id: InstanceId, topic: &str) -> Subscription {
        let sid = self.next_sub;
        self.next_sub += 1;
        let inst = self.instances.get_mut(&id).expect("running instance");
        inst.subs.insert(sid, Sub { topic: topic.into(), queue: VecDeque::new(), waiter: None });
        self.topics.entry(topic.into()).or_default().insert((id, sid));
        Subscription(sid)
    }

    pub(crate) fn unsubscribe(&mut self, id: InstanceId, sub: Subscription) -> ApiResult<()> {
        let inst = self.instances.get_mut(&id).expect("running instance");
        let s = inst.subs.remove(&sub.0).ok_or(ApiError::InvalidHandle)?;
        if let Some(set) = self.topics.get_mut(&s.topic) {
            set.remove(&(id, sub.0));
        }
        Ok(())
    }

    pub(crate) fn next_message(&mut self, id: InstanceId, sub: Subscription) -> ApiResult<Completion<ApiResult<Vec<u8>>>> {
        let inst = self.instances.get_mut(&id).expect("running instance");
        let s = inst.subs.get_mut(&sub.0).ok_or(ApiError::InvalidHandle)?;
        if let Some(m) = s.queue.pop_front() {
            return Ok(Completion::ready(Ok(m)));
        }
        if s.waiter.is_some() {
            return Err(ApiError::Busy("a receive is already pending on this subscription".into()));
        }
        let (r, c) = completion();
        s.waiter = Some(r);
        Ok(c)
    }

    /// Delivers to every current subscriber; silently dropped if none.
    pub(crate) fn broadcast(&mut self, topic: &str, msg: &[u8]) {
        let Some(subs) = self.topics.get(topic) else { return };
        for &(iid, sid) in subs {
            let Some(s) = self.instances.get_mut(&iid).and_then(|i| i.subs.get_mut(&sid)) else { continue };
            match s.waiter.take() {
                Some(w) => w.resolve(Ok(msg.to_vec())),
                None => s.queue.push_back(msg.to_vec()),
            }
        }
    }
}

#[derive(Default)]
struct ReadyQueue {
    inner: Mutex<(VecDeque<InstanceId>, BTreeSet<InstanceId>)>,
}

impl ReadyQueue {
    fn push(&self, id: InstanceId) {
        let mut g = self.inner.lock().expect("ready queue");
        if g.1.insert(id) {
            g.0.push_back(id);
        }
    }

    fn pop(&self) -> Option<InstanceId> {
        let mut g = self.inner.lock().expect("ready queue");
        let id = g.0.pop_front()?;
        g.1.remove(&id);
        Some(id)
    }

    fn is_empty(&self) -> bool {
        self.inner.lock().expect("ready queue").0.is_empty()
    }
}

struct TaskWaker {
    id: InstanceId,
    ready: Arc<ReadyQueue>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.ready.push(self.id);
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.ready.push(self.id);
    }
}

/// The serving kernel: control layer, executor and program registry.
pub struct Kernel {
    state: Rc<RefCell<KernelState>>,
    tasks: BTreeMap<InstanceId, (InferletFuture, Waker)>,
    ready: Arc<ReadyQueue>,
    programs: ProgramRegistry,
    #[cfg(feature = "wasm")]
    compiled: BTreeMap<String, wasm::Compiled>,
}

impl std::fmt::Debug for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Kernel").field("tasks", &self.tasks.len()).finish()
    }
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".into()
    }
}

impl Kernel {
    /// Kernel with an in-process backend and the built-in inferlets.
    pub fn new(config: KernelConfig) -> Result<Self, KernelError> {
        config.validate().map_err(KernelError::Config)?;
        let backend = LocalBackend::new(&config.backend_init());
        Self::with_backend(config, Box::new(backend))
    }

    /// Kernel whose backend runs in a child process started as
    /// `<program> <args...>`.
    pub fn with_process_backend(config: KernelConfig, program: &std::path::Path, args: &[&str]) -> Result<Self, KernelError> {
        config.validate().map_err(KernelError::Config)?;
        let backend = ProcessBackend::spawn(program, args, &config.backend_init())?;
        Self::with_backend(config, Box::new(backend))
    }

    pub fn with_backend(config: KernelConfig, backend: Box<dyn Backend>) -> Result<Self, KernelError> {
        config.validate().map_err(KernelError::Config)?;
        let control = Control::new(backend, config.control_config());
        let state = KernelState {
            control,
            instances: BTreeMap::new(),
            http: http::HttpState::new(config.http_allowlist.clone(), config.http_timeout_ms),
            topics: BTreeMap::new(),
            outputs: Vec::new(),
            to_reap: Vec::new(),
            next_instance: 1,
            next_sub: 0,
            mailbox_capacity: config.mailbox_capacity,
        };
        let mut kernel = Kernel {
            state: Rc::new(RefCell::new(state)),
            tasks: BTreeMap::new(),
            ready: Arc::new(ReadyQueue::default()),
            programs: ProgramRegistry::default(),
            #[cfg(feature = "wasm")]
            compiled: BTreeMap::new(),
        };
        crate::inferlib::register_builtins(&mut kernel);
        Ok(kernel)
    }

    pub fn register_builtin<F, Fut>(&mut self, name: &str, f: F) -> String
    where
        F: Fn(Host) -> Fut + 'static,
        Fut: Future<Output = Result<String, InferletError>> + 'static,
    {
        self.programs.register_builtin(name, Rc::new(move |h| Box::pin(f(h))))
    }

    pub fn builtin_names(&self) -> Vec<String> {
        self.programs.builtin_names()
    }

    /// Stores program bytes; returns the content hash.
    pub fn upload_program(&mut self, bytes: &[u8]) -> String {
        self.programs.upload(bytes).0
    }

    pub fn has_program(&self, reference: &str) -> bool {
        self.programs.resolve(reference).is_some()
    }

    pub fn launch(&mut self, program: &str, args: Vec<String>) -> Result<LaunchInfo, LaunchError> {
        let started = Instant::now();
        let prog = self.programs.resolve(program).cloned().ok_or_else(|| LaunchError::UnknownProgram(program.into()))?;
        let id = {
            let mut st = self.state.borrow_mut();
            let id = st.next_instance;
            st.next_instance += 1;
            id
        };
        let host = Host { state: self.state.clone(), id };
        let (fut, cache_hit): (InferletFuture, bool) = match &prog.body {
            programs::ProgramBody::Builtin(f) => (f(host), self.programs.mark_loaded(&prog.hash)),
            #[cfg(feature = "wasm")]
            programs::ProgramBody::Bytecode(bytes) => {
                let hit = self.compiled.contains_key(&prog.hash);
                if !hit {
                    let compiled = wasm::Compiled::new(bytes).map_err(LaunchError::LoadFailure)?;
                    self.compiled.insert(prog.hash.clone(), compiled);
                }
                self.programs.mark_loaded(&prog.hash);
                let guest = wasm::instantiate(&self.compiled[&prog.hash], host, args.clone()).map_err(LaunchError::LoadFailure)?;
                (guest, hit)
            }
            #[cfg(not(feature = "wasm"))]
            programs::ProgramBody::Bytecode(_) => {
                return Err(LaunchError::LoadFailure("bytecode support is disabled in this build".into()))
            }
        };
        let latency_us = started.elapsed().as_micros() as u64;
        {
            let mut st = self.state.borrow_mut();
            let t = st.control.now();
            st.instances.insert(
                id,
                Instance {
                    program: prog.name.clone(),
                    args,
                    created_at: t,
                    status: InstanceStatus::Running,
                    mailbox: VecDeque::new(),
                    receivers: VecDeque::new(),
                    client_gone: false,
                    subs: BTreeMap::new(),
                },
            );
            st.control.register_instance(id);
            let name = prog.name.clone();
            st.control.log_mut().push(|| Event::Launch { t, instance: id, program: name });
        }
        let waker = Waker::from(Arc::new(TaskWaker { id, ready: self.ready.clone() }));
        self.tasks.insert(id, (fut, waker));
        self.ready.push(id);
        Ok(LaunchInfo { instance: id, program: prog.hash, cache_hit, latency_us })
    }

    /// Queues a client message for the instance's `receive`.
    pub fn send_message(&mut self, id: InstanceId, msg: Vec<u8>) -> ApiResult<()> {
        let mut st = self.state.borrow_mut();
        let cap = st.mailbox_capacity;
        let inst = st.instances.get_mut(&id).ok_or_else(|| ApiError::InvalidArgument(format!("no instance {id}")))?;
        if !inst.status.is_running() {
            return Err(ApiError::Terminated(inst.status.label().into()));
        }
        if let Some(r) = inst.receivers.pop_front() {
            r.resolve(Ok(msg));
        } else if inst.mailbox.len() >= cap {
            return Err(ApiError::Busy("mailbox full".into()));
        } else {
            inst.mailbox.push_back(msg);
        }
        Ok(())
    }

    /// Marks the launching client as gone; pending and future receives
    /// fail with `ClientGone` once the mailbox drains.
    pub fn disconnect_client(&mut self, id: InstanceId) {
        let mut st = self.state.borrow_mut();
        if let Some(inst) = st.instances.get_mut(&id) {
            inst.client_gone = true;
            for r in inst.receivers.drain(..) {
                r.resolve(Err(ApiError::ClientGone));
            }
        }
    }

    /// Terminates a running instance. Returns false if it was not running.
    pub fn terminate(&mut self, id: InstanceId, reason: &str) -> bool {
        let exited = self.state.borrow_mut().exit(id, InstanceStatus::Terminated(reason.into()));
        self.reap();
        exited
    }

    pub fn status(&self, id: InstanceId) -> Option<InstanceStatus> {
        self.state.borrow().instances.get(&id).map(|i| i.status.clone())
    }

    pub fn instances(&self) -> Vec<InstanceInfo> {
        self.state
            .borrow()
            .instances
            .iter()
            .map(|(&id, i)| InstanceInfo {
                id,
                program: i.program.clone(),
                args: i.args.clone(),
                created_at: i.created_at,
                status: i.status.clone(),
            })
            .collect()
    }

    /// Drops bookkeeping for exited instances.
    pub fn forget_exited(&mut self) {
        self.state.borrow_mut().instances.retain(|_, i| i.status.is_running());
    }

    pub fn models(&self) -> Vec<ModelDescriptor> {
        self.state.borrow().control.models().to_vec()
    }

    pub fn now(&self) -> u64 {
        self.state.borrow().control.now()
    }

    pub fn control(&self) -> Ref<'_, Control> {
        Ref::map(self.state.borrow(), |s| &s.control)
    }

    pub fn control_mut(&self) -> RefMut<'_, Control> {
        RefMut::map(self.state.borrow_mut(), |s| &mut s.control)
    }

    pub fn add_http_fixture(&mut self, method: Method, url: &str, fixture: Fixture) {
        self.state.borrow_mut().http.add_fixture(method, url, fixture);
    }

    pub fn set_http_notifier(&mut self, f: Arc<dyn Fn() + Send + Sync>) {
        self.state.borrow_mut().http.set_notifier(f);
    }

    pub fn take_outputs(&mut self) -> Vec<OutputEvent> {
        std::mem::take(&mut self.state.borrow_mut().outputs)
    }

    /// Removes and returns the outputs of one instance, leaving the rest.
    pub fn take_outputs_for(&mut self, id: InstanceId) -> Vec<OutputEvent> {
        let mut st = self.state.borrow_mut();
        let (mine, rest) = std::mem::take(&mut st.outputs).into_iter().partition(|o| o.instance == id);
        st.outputs = rest;
        mine
    }

    fn reap(&mut self) {
        loop {
            let ids = std::mem::take(&mut self.state.borrow_mut().to_reap);
            if ids.is_empty() {
                break;
            }
            for id in ids {
                // Dropping the future runs inferlet destructors, which may
                // call back into the host.
                drop(self.tasks.remove(&id));
            }
        }
    }

    fn poll_ready(&mut self) -> bool {
        let mut progressed = false;
        while let Some(id) = self.ready.pop() {
            if !self.state.borrow().instances.get(&id).is_some_and(|i| i.status.is_running()) {
                continue;
            }
            let Some((fut, waker)) = self.tasks.get_mut(&id) else { continue };
            progressed = true;
            let mut cx = Context::from_waker(waker);
            let outcome = catch_unwind(AssertUnwindSafe(|| fut.as_mut().poll(&mut cx)));
            let status = match outcome {
                Ok(Poll::Pending) => None,
                Ok(Poll::Ready(Ok(v))) => Some(InstanceStatus::Finished(v)),
                Ok(Poll::Ready(Err(e))) => Some(InstanceStatus::Failed(e.to_string())),
                Err(payload) => Some(InstanceStatus::Failed(format!("panic: {}", panic_message(&*payload)))),
            };
            if let Some(status) = status {
                let task = self.tasks.remove(&id);
                self.state.borrow_mut().exit(id, status);
                drop(task);
            }
            self.reap();
        }
        progressed
    }

    /// Does all work available at the current instant: polls runnable
    /// inferlets, delivers due results and dispatches batches. Dispatch only
    /// happens once no inferlet is runnable, so every call submitted at this
    /// instant is visible to batch formation.
    pub fn run_now(&mut self) {
        loop {
            let mut progress = self.poll_ready();
            {
                let mut st = self.state.borrow_mut();
                let now = st.control.now();
                progress |= st.control.complete_due();
                progress |= st.http.complete_due(now);
            }
            if !self.ready.is_empty() {
                continue;
            }
            progress |= self.state.borrow_mut().control.try_dispatch();
            if !progress {
                let mut st = self.state.borrow_mut();
                let http_idle = st.http.next_deadline().is_none() && !st.http.has_external();
                if http_idle && st.control.flush_stalled() {
                    continue;
                }
                break;
            }
        }
    }

    /// Next time at which a batch finishes, a timer fires or a simulated
    /// HTTP response arrives.
    pub fn next_event(&self) -> Option<u64> {
        let st = self.state.borrow();
        match (st.control.next_deadline(), st.http.next_deadline()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn advance_to(&mut self, t: u64) {
        self.state.borrow_mut().control.advance_to(t);
    }

    /// Runs until nothing can make progress. On a virtual clock this jumps
    /// from event to event; instances still waiting afterwards are blocked
    /// on something that will never happen without outside input.
    pub fn run_until_idle(&mut self) {
        self.run_until(u64::MAX);
    }

    /// Like [`Kernel::run_until_idle`] but never advances a virtual clock
    /// past `limit`.
    pub fn run_until(&mut self, limit: u64) {
        loop {
            self.run_now();
            let virtual_clock = self.state.borrow().control.is_virtual();
            match self.next_event() {
                Some(t) if virtual_clock && t <= limit => self.advance_to(t),
                Some(t) if !virtual_clock => {
                    let now = self.now();
                    if t > now {
                        std::thread::sleep(Duration::from_micros((t - now).min(10_000)));
                    }
                }
                _ => {
                    let external = self.state.borrow().http.has_external();
                    if !external {
                        break;
                    }
                    self.state.borrow().http.wait_external(Duration::from_millis(10));
                }
            }
        }
    }

    /// Launches a program and runs the kernel until idle, returning that
    /// instance's messages and status.
    pub fn run_program(&mut self, program: &str, args: Vec<String>) -> Result<RunResult, LaunchError> {
        let info = self.launch(program, args)?;
        self.run_until_idle();
        Ok(self.collect(info.instance))
    }

    /// Drains one instance's outputs into a [`RunResult`].
    pub fn collect(&mut self, id: InstanceId) -> RunResult {
        let mut messages = Vec::new();
        let mut finished_at = self.now();
        for o in self.take_outputs_for(id) {
            match o.kind {
                OutputKind::Message(m) => messages.push(m),
                OutputKind::Exit(_) => finished_at = o.t,
            }
        }
        let status = self.status(id).unwrap_or(InstanceStatus::Failed("unknown instance".into()));
        RunResult { instance: id, messages, status, finished_at }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel() -> Kernel {
        let cfg = KernelConfig { log_events: true, ..KernelConfig::default() };
        Kernel::new(cfg).unwrap()
    }

    #[test]
    fn args_round_trip_and_echo() {
        let mut k = kernel();
        k.register_builtin("args", |h: Host| async move {
            let args = h.get_arg();
            h.send(args.join(","))?;
            Ok("done".to_string())
        });
        let r = k.run_program("args", vec!["a".into(), "b c".into()]).unwrap();
        assert_eq!(r.messages, vec![b"a,b c".to_vec()]);
        assert_eq!(r.status, InstanceStatus::Finished("done".into()));
    }

    #[test]
    fn receive_then_client_gone() {
        let mut k = kernel();
        k.register_builtin("pong", |h: Host| async move {
            loop {
                match h.receive().await {
                    Ok(m) => h.send(m)?,
                    Err(ApiError::ClientGone) => return Ok("bye".to_string()),
                    Err(e) => return Err(e.into()),
                }
            }
        });
        let id = k.launch("pong", vec![]).unwrap().instance;
        k.run_until_idle();
        k.send_message(id, b"ping".to_vec()).unwrap();
        k.send_message(id, b"again".to_vec()).unwrap();
        k.run_until_idle();
        k.disconnect_client(id);
        k.run_until_idle();
        let r = k.collect(id);
        assert_eq!(r.messages, vec![b"ping".to_vec(), b"again".to_vec()]);
        assert_eq!(r.status, InstanceStatus::Finished("bye".into()));
    }

    #[test]
    fn unknown_program() {
        let mut k = kernel();
        assert!(matches!(k.launch("nope", vec![]), Err(LaunchError::UnknownProgram(_))));
    }

    #[test]
    fn panic_becomes_failed_and_releases_resources() {
        let mut k = kernel();
        k.register_builtin("crash", |h: Host| async move {
            let q = h.create_queue("mock-hash")?;
            h.alloc_kvpage(q, 3)?;
            h.synchronize(q).await?;
            panic!("boom");
        });
        let r = k.run_program("crash", vec![]).unwrap();
        assert_eq!(r.status, InstanceStatus::Failed("panic: boom".into()));
        k.control().resources.check_conservation().unwrap();
        assert_eq!(k.control().resources.stats(0).kv_free, 4096);
    }

    #[test]
    fn pubsub_delivers_in_order() {
        let mut k = kernel();
        k.register_builtin("sub", |h: Host| async move {
            let s = h.subscribe("t")?;
            h.send("ready")?;
            let a = h.next_message(s).await?;
            let b = h.next_message(s).await?;
            h.send([a, b].concat())?;
            Ok(String::new())
        });
        k.register_builtin("pub", |h: Host| async move {
            h.broadcast("t", "A")?;
            h.broadcast("t", "B")?;
            h.broadcast("empty-topic", "x")?;
            Ok(String::new())
        });
        let s1 = k.launch("sub", vec![]).unwrap().instance;
        let s2 = k.launch("sub", vec![]).unwrap().instance;
        k.run_until_idle();
        k.run_program("pub", vec![]).unwrap();
        for s in [s1, s2] {
            assert_eq!(k.collect(s).messages, vec![b"ready".to_vec(), b"AB".to_vec()]);
        }
    }

    #[test]
    fn http_denied_without_allowlist() {
        let mut k = kernel();
        k.register_builtin("fetch", |h: Host| async move {
            match h.http_get("http://tools.local/x").await {
                Err(ApiError::Denied(_)) => Ok("denied".to_string()),
                other => Ok(format!("{other:?}")),
            }
        });
        let r = k.run_program("fetch", vec![]).unwrap();
        assert_eq!(r.status, InstanceStatus::Finished("denied".into()));
    }
}
