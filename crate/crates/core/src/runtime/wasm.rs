//! Bytecode inferlets on wasmi.
//!
//! A guest runs on its own thread with blocking host imports. Each import
//! forwards a request to the kernel thread and waits for the reply, so guest
//! code only ever runs while the kernel is polling that instance's future:
//! scheduling stays deterministic and the [`Host`] never leaves the kernel
//! thread. The import set is documented in `docs/abi.md`.

use std::future::Future;
use std::pin::Pin;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::task::{Context, Poll};
use std::time::Duration;

use wasmi::{Caller, Engine, Error, Extern, Linker, Module, Store};

use super::programs::InferletFuture;
use super::{Host, Queue, Subscription};
use crate::control::ForwardArgs;
use crate::error::{ApiError, ApiResult, InferletError};
use crate::resources::{ResourceHandle, ResourceKind};

const MODULE: &str = "inferlet";

/// Longest a guest may compute between host calls before it is failed.
const GUEST_STALL: Duration = Duration::from_secs(30);

/// A validated, compiled module. Cheap to clone.
#[derive(Clone)]
pub struct Compiled {
    engine: Engine,
    module: Module,
}

impl Compiled {
    /// Accepts binary wasm or text format.
    pub fn new(bytes: &[u8]) -> Result<Self, String> {
        let engine = Engine::default();
        let module = Module::new(&engine, bytes).map_err(|e| e.to_string())?;
        let has_run = module.exports().any(|e| e.name() == "run");
        if !has_run {
            return Err("module does not export `run`".into());
        }
        Ok(Compiled { engine, module })
    }
}

enum Req {
    Send(Vec<u8>),
    Receive,
    Broadcast(String, Vec<u8>),
    Subscribe(String),
    NextMessage(u64),
    HttpGet(String),
    HttpPost(String, Vec<u8>),
    CreateQueue(String),
    SetPriority(u32, i32),
    Synchronize(u32),
    Alloc(u32, ResourceKind, usize),
    Dealloc(u32, ResourceKind, Vec<u32>),
    Copy { q: u32, src: u32, src_range: (u32, u32), dst: u32, dst_range: (u32, u32) },
    Mask(u32, u32, Vec<bool>),
    Export(Vec<u32>, String),
    Import(String),
    Unexport(String),
    Tokenize(u32, Vec<u8>),
    Detokenize(u32, Vec<u32>),
    EmbedTxt { q: u32, tokens: Vec<u32>, positions: Vec<u32>, embeds: Vec<u32> },
    Forward { q: u32, ikv: Vec<u32>, iemb: Vec<u32>, okv: Vec<u32>, oemb: Vec<u32> },
    NextDist(u32, u32, Option<usize>),
    Models,
    Traits(String),
}

/// Return value plus the bytes left for `buf_read`.
type Reply = ApiResult<(i32, Vec<u8>)>;

enum GuestMsg {
    Call(Req),
    Done(Result<String, InferletError>),
}

struct GuestData {
    tx: Sender<GuestMsg>,
    rx: Receiver<Reply>,
    args: Vec<String>,
    buf: Vec<u8>,
    result: String,
}

fn u32s_to_bytes(v: impl IntoIterator<Item = u32>) -> Vec<u8> {
    v.into_iter().flat_map(u32::to_le_bytes).collect()
}

fn handle_indices(hs: &[ResourceHandle]) -> Vec<u8> {
    u32s_to_bytes(hs.iter().map(|h| h.index as u32))
}

fn ok(code: usize) -> Reply {
    Ok((code as i32, Vec::new()))
}

fn with_buf(code: usize, buf: Vec<u8>) -> Reply {
    Ok((code as i32, buf))
}

fn ready(r: Reply) -> Pin<Box<dyn Future<Output = Reply>>> {
    Box::pin(std::future::ready(r))
}

struct GuestTask {
    host: Host,
    to_guest: Sender<Reply>,
    from_guest: Receiver<GuestMsg>,
    pending: Option<Pin<Box<dyn Future<Output = Reply>>>>,
}

impl GuestTask {
    fn handle(&self, kind: ResourceKind, index: u32) -> ResourceHandle {
        ResourceHandle { owner: self.host.id, kind, index: index as u64 }
    }

    fn handles(&self, kind: ResourceKind, v: &[u32]) -> Vec<ResourceHandle> {
        v.iter().map(|&i| self.handle(kind, i)).collect()
    }

    fn dispatch(&self, req: Req) -> Pin<Box<dyn Future<Output = Reply>>> {
        let h = self.host.clone();
        let kv = ResourceKind::KvPage;
        let emb = ResourceKind::Embed;
        match req {
            Req::Send(m) => ready(h.send(m).and_then(|_| ok(0))),
            Req::Receive => Box::pin(async move { h.receive().await.map(|m| (m.len() as i32, m)) }),
            Req::Broadcast(t, m) => ready(h.broadcast(&t, m).and_then(|_| ok(0))),
            Req::Subscribe(t) => ready(h.subscribe(&t).map(|s| (s.0 as i32, Vec::new()))),
            Req::NextMessage(s) => {
                Box::pin(async move { h.next_message(Subscription(s)).await.map(|m| (m.len() as i32, m)) })
            }
            Req::HttpGet(url) => Box::pin(async move { h.http_get(&url).await.map(|r| (r.status as i32, r.body)) }),
            Req::HttpPost(url, body) => {
                Box::pin(async move { h.http_post(&url, body).await.map(|r| (r.status as i32, r.body)) })
            }
            Req::CreateQueue(m) => ready(h.create_queue(&m).map(|q| (q.0 as i32, Vec::new()))),
            Req::SetPriority(q, p) => ready(h.set_queue_priority(Queue(q as u64), p).and_then(|_| ok(0))),
            Req::Synchronize(q) => Box::pin(async move { h.synchronize(Queue(q as u64)).await.map(|_| (0, Vec::new())) }),
            Req::Alloc(q, kind, n) => {
                let r = match kind {
                    ResourceKind::KvPage => h.alloc_kvpage(Queue(q as u64), n),
                    ResourceKind::Embed => h.alloc_emb(Queue(q as u64), n),
                };
                ready(r.map(|hs| (hs.len() as i32, handle_indices(&hs))))
            }
            Req::Dealloc(q, kind, v) => {
                let hs = self.handles(kind, &v);
                let r = match kind {
                    ResourceKind::KvPage => h.dealloc_kvpage(Queue(q as u64), &hs),
                    ResourceKind::Embed => h.dealloc_emb(Queue(q as u64), &hs),
                };
                ready(r.and_then(|_| ok(0)))
            }
            Req::Copy { q, src, src_range, dst, dst_range } => ready(
                h.copy_kvpage(
                    Queue(q as u64),
                    self.handle(kv, src),
                    src_range.0 as usize..src_range.1 as usize,
                    self.handle(kv, dst),
                    dst_range.0 as usize..dst_range.1 as usize,
                )
                .and_then(|_| ok(0)),
            ),
            Req::Mask(q, page, m) => ready(h.mask_kvpage(Queue(q as u64), self.handle(kv, page), &m).and_then(|_| ok(0))),
            Req::Export(pages, name) => ready(h.export_kvpage(&self.handles(kv, &pages), &name).and_then(|_| ok(0))),
            Req::Import(name) => ready(h.import_kvpage(&name).map(|hs| (hs.len() as i32, handle_indices(&hs)))),
            Req::Unexport(name) => ready(h.unexport_kvpage(&name).and_then(|_| ok(0))),
            Req::Models => {
                let names: Vec<String> = h.available_models().into_iter().map(|m| m.name).collect();
                let buf = names.join("\n").into_bytes();
                ready(with_buf(buf.len(), buf))
            }
            Req::Traits(model) => ready(h.available_traits(&model).map(|ts| {
                let names: Vec<String> = ts.iter().map(|t| format!("{t:?}")).collect();
                let buf = names.join("\n").into_bytes();
                (buf.len() as i32, buf)
            })),
            Req::Tokenize(q, text) => Box::pin(async move {
                let ids = h.tokenize_bytes(Queue(q as u64), &text).await?;
                with_buf(ids.len(), u32s_to_bytes(ids))
            }),
            Req::Detokenize(q, ids) => Box::pin(async move {
                let bytes = h.detokenize(Queue(q as u64), &ids).await?;
                with_buf(bytes.len(), bytes)
            }),
            Req::EmbedTxt { q, tokens, positions, embeds } => {
                ready(h.embed_txt(Queue(q as u64), &tokens, &positions, &self.handles(emb, &embeds)).and_then(|_| ok(0)))
            }
            Req::Forward { q, ikv, iemb, okv, oemb } => ready(
                h.forward_with(
                    Queue(q as u64),
                    ForwardArgs {
                        ikv: self.handles(kv, &ikv),
                        iemb: self.handles(emb, &iemb),
                        okv: self.handles(kv, &okv),
                        oemb: self.handles(emb, &oemb),
                        mask: None,
                    },
                )
                .and_then(|_| ok(0)),
            ),
            Req::NextDist(q, e, k) => {
                let handle = self.handle(emb, e);
                Box::pin(async move {
                    let d = match k {
                        Some(k) => h.get_next_dist_k(Queue(q as u64), handle, k).await?,
                        None => h.get_next_dist(Queue(q as u64), handle).await?,
                    };
                    let buf = d
                        .ids
                        .iter()
                        .zip(&d.probs)
                        .flat_map(|(id, p)| id.to_le_bytes().into_iter().chain(p.to_le_bytes()))
                        .collect();
                    with_buf(d.ids.len(), buf)
                })
            }
        }
    }
}

impl Future for GuestTask {
    type Output = Result<String, InferletError>;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        loop {
            if let Some(p) = self.pending.as_mut() {
                let reply = match p.as_mut().poll(cx) {
                    Poll::Pending => return Poll::Pending,
                    Poll::Ready(r) => r,
                };
                self.pending = None;
                // A send failure means the guest already stopped; the
                // receive below reports how.
                let _ = self.to_guest.send(reply);
            }
            match self.from_guest.recv_timeout(GUEST_STALL) {
                Ok(GuestMsg::Call(req)) => {
                    let fut = self.dispatch(req);
                    self.pending = Some(fut);
                }
                Ok(GuestMsg::Done(r)) => return Poll::Ready(r),
                Err(RecvTimeoutError::Timeout) => {
                    return Poll::Ready(Err(InferletError::Message("guest made no progress".into())))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Poll::Ready(Err(InferletError::Message("guest thread exited".into())))
                }
            }
        }
    }
}

/// Starts a guest for `host`'s instance and returns its future.
pub fn instantiate(compiled: &Compiled, host: Host, args: Vec<String>) -> Result<InferletFuture, String> {
    let (to_kernel, from_guest) = channel();
    let (to_guest, from_kernel) = channel();
    let compiled = compiled.clone();
    let (init_tx, init_rx) = channel::<Result<(), String>>();
    std::thread::Builder::new()
        .name(format!("guest-{}", host.id))
        .spawn(move || guest_main(compiled, GuestData { tx: to_kernel, rx: from_kernel, args, buf: Vec::new(), result: String::new() }, init_tx))
        .map_err(|e| e.to_string())?;
    init_rx.recv().map_err(|_| "guest thread failed to start".to_string())??;
    Ok(Box::pin(GuestTask { host, to_guest, from_guest, pending: None }))
}

fn guest_main(compiled: Compiled, data: GuestData, init: Sender<Result<(), String>>) {
    let tx = data.tx.clone();
    let mut store = Store::new(&compiled.engine, data);
    let mut linker = Linker::new(&compiled.engine);
    let run = define_imports(&mut linker)
        .map_err(|e| e.to_string())
        .and_then(|_| linker.instantiate_and_start(&mut store, &compiled.module).map_err(|e| e.to_string()))
        .and_then(|inst| inst.get_typed_func::<(), i32>(&store, "run").map_err(|e| e.to_string()));
    let run = match run {
        Ok(f) => {
            let _ = init.send(Ok(()));
            f
        }
        Err(e) => {
            let _ = init.send(Err(e));
            return;
        }
    };
    let outcome = match run.call(&mut store, ()) {
        Ok(0) => Ok(std::mem::take(&mut store.data_mut().result)),
        Ok(code) => Err(InferletError::Message(format!("run returned {code}"))),
        Err(e) => Err(InferletError::Message(format!("trap: {e}"))),
    };
    let _ = tx.send(GuestMsg::Done(outcome));
}

type Cx<'a> = Caller<'a, GuestData>;

fn memory(caller: &Cx<'_>) -> Result<wasmi::Memory, Error> {
    match caller.get_export("memory") {
        Some(Extern::Memory(m)) => Ok(m),
        _ => Err(Error::new("guest does not export `memory`")),
    }
}

fn read_bytes(caller: &Cx<'_>, ptr: i32, len: i32) -> Result<Vec<u8>, Error> {
    if len < 0 {
        return Err(Error::new("negative length"));
    }
    let mut buf = vec![0u8; len as usize];
    memory(caller)?.read(caller, ptr as u32 as usize, &mut buf).map_err(|e| Error::new(e.to_string()))?;
    Ok(buf)
}

fn read_str(caller: &Cx<'_>, ptr: i32, len: i32) -> Result<String, Error> {
    String::from_utf8(read_bytes(caller, ptr, len)?).map_err(|_| Error::new("string is not utf-8"))
}

fn read_u32s(caller: &Cx<'_>, ptr: i32, n: i32) -> Result<Vec<u32>, Error> {
    let bytes = read_bytes(caller, ptr, n.checked_mul(4).ok_or_else(|| Error::new("length overflow"))?)?;
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

fn write_bytes(caller: &mut Cx<'_>, ptr: i32, bytes: &[u8]) -> Result<(), Error> {
    let mem = memory(caller)?;
    mem.write(caller, ptr as u32 as usize, bytes).map_err(|e| Error::new(e.to_string()))
}

/// Round trip to the kernel. API errors come back as negative codes.
fn call(caller: &mut Cx<'_>, req: Req) -> Result<i32, Error> {
    let data = caller.data_mut();
    data.tx.send(GuestMsg::Call(req)).map_err(|_| Error::new("instance stopped"))?;
    match data.rx.recv().map_err(|_| Error::new("instance stopped"))? {
        Ok((code, buf)) => {
            data.buf = buf;
            Ok(code)
        }
        Err(e) => {
            data.buf.clear();
            Ok(e.code() as i32)
        }
    }
}

fn kind_of(kv: bool) -> ResourceKind {
    if kv {
        ResourceKind::KvPage
    } else {
        ResourceKind::Embed
    }
}

fn define_imports(l: &mut Linker<GuestData>) -> Result<(), wasmi::errors::LinkerError> {
    l.func_wrap(MODULE, "arg_count", |c: Cx<'_>| -> i32 { c.data().args.len() as i32 })?;
    l.func_wrap(MODULE, "arg_read", |mut c: Cx<'_>, i: i32, ptr: i32, cap: i32| -> Result<i32, Error> {
        let Some(arg) = c.data().args.get(i as usize).cloned() else {
            return Ok(ApiError::InvalidArgument(String::new()).code() as i32);
        };
        let n = arg.len().min(cap.max(0) as usize);
        write_bytes(&mut c, ptr, &arg.as_bytes()[..n])?;
        Ok(arg.len() as i32)
    })?;
    l.func_wrap(MODULE, "buf_read", |mut c: Cx<'_>, ptr: i32, cap: i32| -> Result<i32, Error> {
        let buf = std::mem::take(&mut c.data_mut().buf);
        let n = buf.len().min(cap.max(0) as usize);
        write_bytes(&mut c, ptr, &buf[..n])?;
        let len = buf.len() as i32;
        c.data_mut().buf = buf;
        Ok(len)
    })?;
    l.func_wrap(MODULE, "set_result", |mut c: Cx<'_>, ptr: i32, len: i32| -> Result<i32, Error> {
        let s = read_str(&c, ptr, len)?;
        c.data_mut().result = s;
        Ok(0)
    })?;
    l.func_wrap(MODULE, "send", |mut c: Cx<'_>, ptr: i32, len: i32| -> Result<i32, Error> {
        let m = read_bytes(&c, ptr, len)?;
        call(&mut c, Req::Send(m))
    })?;
    l.func_wrap(MODULE, "receive", |mut c: Cx<'_>| -> Result<i32, Error> { call(&mut c, Req::Receive) })?;
    l.func_wrap(MODULE, "broadcast", |mut c: Cx<'_>, tp: i32, tl: i32, mp: i32, ml: i32| -> Result<i32, Error> {
        let t = read_str(&c, tp, tl)?;
        let m = read_bytes(&c, mp, ml)?;
        call(&mut c, Req::Broadcast(t, m))
    })?;
    l.func_wrap(MODULE, "subscribe", |mut c: Cx<'_>, tp: i32, tl: i32| -> Result<i32, Error> {
        let t = read_str(&c, tp, tl)?;
        call(&mut c, Req::Subscribe(t))
    })?;
    l.func_wrap(MODULE, "next_message", |mut c: Cx<'_>, sub: i32| -> Result<i32, Error> {
        call(&mut c, Req::NextMessage(sub as u32 as u64))
    })?;
    l.func_wrap(MODULE, "http_get", |mut c: Cx<'_>, up: i32, ul: i32| -> Result<i32, Error> {
        let u = read_str(&c, up, ul)?;
        call(&mut c, Req::HttpGet(u))
    })?;
    l.func_wrap(MODULE, "http_post", |mut c: Cx<'_>, up: i32, ul: i32, bp: i32, bl: i32| -> Result<i32, Error> {
        let u = read_str(&c, up, ul)?;
        let b = read_bytes(&c, bp, bl)?;
        call(&mut c, Req::HttpPost(u, b))
    })?;
    l.func_wrap(MODULE, "available_models", |mut c: Cx<'_>| -> Result<i32, Error> { call(&mut c, Req::Models) })?;
    l.func_wrap(MODULE, "available_traits", |mut c: Cx<'_>, np: i32, nl: i32| -> Result<i32, Error> {
        let n = read_str(&c, np, nl)?;
        call(&mut c, Req::Traits(n))
    })?;
    l.func_wrap(MODULE, "create_queue", |mut c: Cx<'_>, np: i32, nl: i32| -> Result<i32, Error> {
        let n = read_str(&c, np, nl)?;
        call(&mut c, Req::CreateQueue(n))
    })?;
    l.func_wrap(MODULE, "set_queue_priority", |mut c: Cx<'_>, q: i32, p: i32| -> Result<i32, Error> {
        call(&mut c, Req::SetPriority(q as u32, p))
    })?;
    l.func_wrap(MODULE, "synchronize", |mut c: Cx<'_>, q: i32| -> Result<i32, Error> {
        call(&mut c, Req::Synchronize(q as u32))
    })?;
    for (name, kv) in [("alloc_kvpage", true), ("alloc_emb", false)] {
        l.func_wrap(MODULE, name, move |mut c: Cx<'_>, q: i32, n: i32| -> Result<i32, Error> {
            call(&mut c, Req::Alloc(q as u32, kind_of(kv), n.max(0) as usize))
        })?;
    }
    for (name, kv) in [("dealloc_kvpage", true), ("dealloc_emb", false)] {
        l.func_wrap(MODULE, name, move |mut c: Cx<'_>, q: i32, ptr: i32, n: i32| -> Result<i32, Error> {
            let v = read_u32s(&c, ptr, n)?;
            call(&mut c, Req::Dealloc(q as u32, kind_of(kv), v))
        })?;
    }
    l.func_wrap(
        MODULE,
        "copy_kvpage",
        |mut c: Cx<'_>, q: i32, src: i32, s0: i32, s1: i32, dst: i32, d0: i32, d1: i32| -> Result<i32, Error> {
            let (s0, s1, d0, d1) = (s0 as u32, s1 as u32, d0 as u32, d1 as u32);
            if s1 < s0 || d1 < d0 {
                return Ok(ApiError::RangeMismatch.code() as i32);
            }
            call(&mut c, Req::Copy { q: q as u32, src: src as u32, src_range: (s0, s1), dst: dst as u32, dst_range: (d0, d1) })
        },
    )?;
    l.func_wrap(MODULE, "mask_kvpage", |mut c: Cx<'_>, q: i32, page: i32, ptr: i32, n: i32| -> Result<i32, Error> {
        let m = read_bytes(&c, ptr, n)?.into_iter().map(|b| b != 0).collect();
        call(&mut c, Req::Mask(q as u32, page as u32, m))
    })?;
    l.func_wrap(MODULE, "export_kvpage", |mut c: Cx<'_>, ptr: i32, n: i32, np: i32, nl: i32| -> Result<i32, Error> {
        let pages = read_u32s(&c, ptr, n)?;
        let name = read_str(&c, np, nl)?;
        call(&mut c, Req::Export(pages, name))
    })?;
    l.func_wrap(MODULE, "import_kvpage", |mut c: Cx<'_>, np: i32, nl: i32| -> Result<i32, Error> {
        let name = read_str(&c, np, nl)?;
        call(&mut c, Req::Import(name))
    })?;
    l.func_wrap(MODULE, "unexport_kvpage", |mut c: Cx<'_>, np: i32, nl: i32| -> Result<i32, Error> {
        let name = read_str(&c, np, nl)?;
        call(&mut c, Req::Unexport(name))
    })?;
    l.func_wrap(MODULE, "tokenize", |mut c: Cx<'_>, q: i32, ptr: i32, len: i32| -> Result<i32, Error> {
        let text = read_bytes(&c, ptr, len)?;
        call(&mut c, Req::Tokenize(q as u32, text))
    })?;
    l.func_wrap(MODULE, "detokenize", |mut c: Cx<'_>, q: i32, ptr: i32, n: i32| -> Result<i32, Error> {
        let ids = read_u32s(&c, ptr, n)?;
        call(&mut c, Req::Detokenize(q as u32, ids))
    })?;
    l.func_wrap(
        MODULE,
        "embed_txt",
        |mut c: Cx<'_>, q: i32, tp: i32, pp: i32, ep: i32, n: i32| -> Result<i32, Error> {
            let tokens = read_u32s(&c, tp, n)?;
            let positions = read_u32s(&c, pp, n)?;
            let embeds = read_u32s(&c, ep, n)?;
            call(&mut c, Req::EmbedTxt { q: q as u32, tokens, positions, embeds })
        },
    )?;
    l.func_wrap(
        MODULE,
        "forward",
        |mut c: Cx<'_>, q: i32, ikp: i32, ikn: i32, iep: i32, ien: i32, okp: i32, okn: i32, oep: i32, oen: i32| -> Result<i32, Error> {
            let ikv = read_u32s(&c, ikp, ikn)?;
            let iemb = read_u32s(&c, iep, ien)?;
            let okv = read_u32s(&c, okp, okn)?;
            let oemb = read_u32s(&c, oep, oen)?;
            call(&mut c, Req::Forward { q: q as u32, ikv, iemb, okv, oemb })
        },
    )?;
    l.func_wrap(MODULE, "get_next_dist", |mut c: Cx<'_>, q: i32, e: i32, k: i32| -> Result<i32, Error> {
        let k = (k > 0).then_some(k as usize);
        call(&mut c, Req::NextDist(q as u32, e as u32, k))
    })?;
    Ok(())
}
