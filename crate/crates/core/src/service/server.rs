//! TCP front end. One reader and one writer thread per connection; every
//! request funnels into a single kernel thread over a channel, so the
//! kernel (which is not `Send`) never leaves the thread that built it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::config::ServerConfig;
use super::protocol::{decode_client, ClientFrame, ServerFrame};
use crate::error::ErrorCode;
use crate::frame::{read_frame_bytes, write_frame};
use crate::resources::InstanceId;
use crate::runtime::{InstanceStatus, Kernel, KernelError, OutputKind};

type ConnId = u64;

/// Reason recorded when a client asks for termination.
pub const CLIENT_TERMINATE_REASON: &str = "client_request";
const SHUTDOWN_REASON: &str = "server_shutdown";
const IDLE_POLL: Duration = Duration::from_millis(50);

enum Command {
    Open { conn: ConnId, out: Sender<ServerFrame> },
    Request { conn: ConnId, body: Vec<u8> },
    /// The connection broke the framing rules and will be closed.
    Fatal { conn: ConnId, reason: String },
    Closed { conn: ConnId },
    Wake,
    Stop,
}

/// How the kernel thread builds its kernel.
pub enum BackendChoice {
    InProcess,
    /// Spawn `<program> <args...>` and speak the backend codec over its stdio.
    Process { program: std::path::PathBuf, args: Vec<String> },
}

/// A running server. Dropping the handle shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    commands: Sender<Command>,
    stopping: Arc<AtomicBool>,
    kernel_thread: Option<JoinHandle<()>>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.kernel_thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.commands.send(Command::Stop);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.kernel_thread.take() {
            let _ = t.join();
        }
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds, builds the kernel and starts serving in background threads.
pub fn start(config: ServerConfig) -> Result<ServerHandle, KernelError> {
    let backend = if config.split_backend {
        let exe = std::env::current_exe()?;
        BackendChoice::Process { program: exe, args: vec!["backend".into()] }
    } else {
        BackendChoice::InProcess
    };
    start_with(config, backend)
}

pub fn start_with(config: ServerConfig, backend: BackendChoice) -> Result<ServerHandle, KernelError> {
    let listener = TcpListener::bind(&config.listen)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = mpsc::channel();
    let (ready_tx, ready_rx) = mpsc::channel();
    let kernel_cfg = config.kernel.clone();
    let notify = tx.clone();
    let kernel_thread = std::thread::Builder::new().name("kernel".into()).spawn(move || {
        let built = match backend {
            BackendChoice::InProcess => Kernel::new(kernel_cfg),
            BackendChoice::Process { program, args } => {
                let args: Vec<&str> = args.iter().map(String::as_str).collect();
                Kernel::with_process_backend(kernel_cfg, &program, &args)
            }
        };
        let mut kernel = match built {
            Ok(k) => {
                let _ = ready_tx.send(Ok(()));
                k
            }
            Err(e) => {
                let _ = ready_tx.send(Err(e));
                return;
            }
        };
        let notify = std::sync::Mutex::new(notify);
        kernel.set_http_notifier(Arc::new(move || {
            let _ = notify.lock().map(|n| n.send(Command::Wake));
        }));
        Coordinator::new(kernel).run(rx);
    })?;
    match ready_rx.recv() {
        Ok(Ok(())) => {}
        Ok(Err(e)) => return Err(e),
        Err(_) => return Err(KernelError::Backend(io::Error::other("kernel thread exited during start"))),
    }
    let stopping = Arc::new(AtomicBool::new(false));
    let accept_thread = {
        let tx = tx.clone();
        let stopping = stopping.clone();
        std::thread::Builder::new().name("accept".into()).spawn(move || accept_loop(listener, tx, stopping))?
    };
    log::info!("listening on {addr}");
    Ok(ServerHandle { addr, commands: tx, stopping, kernel_thread: Some(kernel_thread), accept_thread: Some(accept_thread) })
}

fn accept_loop(listener: TcpListener, tx: Sender<Command>, stopping: Arc<AtomicBool>) {
    let mut next: ConnId = 1;
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let conn = next;
        next += 1;
        if let Err(e) = open_connection(conn, stream, &tx) {
            log::warn!("connection {conn} setup failed: {e}");
        }
    }
}

fn open_connection(conn: ConnId, stream: TcpStream, tx: &Sender<Command>) -> io::Result<()> {
    let _ = stream.set_nodelay(true);
    let write_half = stream.try_clone()?;
    let (out_tx, out_rx) = mpsc::channel::<ServerFrame>();
    if tx.send(Command::Open { conn, out: out_tx }).is_err() {
        return Ok(());
    }
    std::thread::Builder::new().name(format!("conn-{conn}-w")).spawn(move || {
        let mut w = BufWriter::new(&write_half);
        for frame in out_rx {
            if write_frame(&mut w, &frame).is_err() {
                break;
            }
        }
        let _ = write_half.shutdown(Shutdown::Both);
    })?;
    let tx = tx.clone();
    std::thread::Builder::new().name(format!("conn-{conn}-r")).spawn(move || {
        let mut r = BufReader::new(&stream);
        loop {
            match read_frame_bytes(&mut r) {
                Ok(Some(body)) => {
                    if tx.send(Command::Request { conn, body }).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                    let _ = tx.send(Command::Fatal { conn, reason: e.to_string() });
                    return;
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(Command::Closed { conn });
    })?;
    Ok(())
}

struct Coordinator {
    kernel: Kernel,
    conns: BTreeMap<ConnId, Sender<ServerFrame>>,
    watchers: BTreeMap<InstanceId, BTreeSet<ConnId>>,
    owners: BTreeMap<InstanceId, ConnId>,
    virtual_clock: bool,
}

impl Coordinator {
    fn new(kernel: Kernel) -> Self {
        let virtual_clock = kernel.control().is_virtual();
        Coordinator { kernel, conns: BTreeMap::new(), watchers: BTreeMap::new(), owners: BTreeMap::new(), virtual_clock }
    }

    fn run(mut self, rx: Receiver<Command>) {
        loop {
            self.kernel.run_now();
            self.route_outputs();
            let next = self.kernel.next_event();
            let cmd = match next {
                Some(t) if self.virtual_clock => match rx.try_recv() {
                    Ok(c) => c,
                    Err(TryRecvError::Empty) => {
                        self.kernel.advance_to(t);
                        continue;
                    }
                    Err(TryRecvError::Disconnected) => break,
                },
                _ => {
                    let wait = match next {
                        Some(t) => Duration::from_micros(t.saturating_sub(self.kernel.now())).min(IDLE_POLL),
                        None => IDLE_POLL,
                    };
                    match rx.recv_timeout(wait) {
                        Ok(c) => c,
                        Err(RecvTimeoutError::Timeout) => continue,
                        Err(RecvTimeoutError::Disconnected) => break,
                    }
                }
            };
            if !self.handle(cmd) {
                break;
            }
        }
        let running: Vec<InstanceId> = self.kernel.instances().iter().filter(|i| i.status.is_running()).map(|i| i.id).collect();
        for id in running {
            self.kernel.terminate(id, SHUTDOWN_REASON);
        }
        self.route_outputs();
        log::info!("server stopped");
    }

    fn handle(&mut self, cmd: Command) -> bool {
        match cmd {
            Command::Open { conn, out } => {
                self.conns.insert(conn, out);
            }
            Command::Request { conn, body } => {
                let reply = match decode_client(&body) {
                    Ok(frame) => self.request(conn, frame),
                    Err(e) => ServerFrame::error(e.id, ErrorCode::InvalidArgument, e.message),
                };
                self.push(conn, reply);
            }
            Command::Fatal { conn, reason } => {
                log::warn!("closing connection {conn}: {reason}");
                self.push(conn, ServerFrame::error(None, ErrorCode::InvalidArgument, format!("closing connection: {reason}")));
                self.close(conn);
            }
            Command::Closed { conn } => self.close(conn),
            Command::Wake => {}
            Command::Stop => return false,
        }
        true
    }

    fn request(&mut self, conn: ConnId, frame: ClientFrame) -> ServerFrame {
        match frame {
            ClientFrame::UploadProgram { id, data } => {
                let existed = self.kernel.has_program(&crate::runtime::program_hash(&data));
                let program = self.kernel.upload_program(&data);
                ServerFrame::Uploaded { id, program, existed }
            }
            ClientFrame::Launch { id, program, args } => match self.kernel.launch(&program, args) {
                Ok(info) => {
                    self.owners.insert(info.instance, conn);
                    self.watchers.entry(info.instance).or_default().insert(conn);
                    ServerFrame::Launched {
                        id,
                        instance: info.instance,
                        program: info.program,
                        cache_hit: info.cache_hit,
                        latency_us: info.latency_us,
                    }
                }
                Err(e) => ServerFrame::error(Some(id), e.code(), e.to_string()),
            },
            ClientFrame::Send { id, instance, data } => {
                if self.owners.get(&instance) != Some(&conn) {
                    return ServerFrame::error(Some(id), ErrorCode::Denied, format!("instance {instance} belongs to another client"));
                }
                match self.kernel.send_message(instance, data) {
                    Ok(()) => ServerFrame::Ack { id },
                    Err(e) => ServerFrame::error(Some(id), e.code(), e.to_string()),
                }
            }
            ClientFrame::Stream { id, instance } => match self.kernel.status(instance) {
                None => ServerFrame::error(Some(id), ErrorCode::NotFound, format!("no instance {instance}")),
                Some(status) if !status.is_running() => {
                    self.push(conn, ServerFrame::Ack { id });
                    ServerFrame::Exit { instance, status }
                }
                Some(_) => {
                    self.watchers.entry(instance).or_default().insert(conn);
                    ServerFrame::Ack { id }
                }
            },
            ClientFrame::Terminate { id, instance } => {
                if self.kernel.status(instance).is_none() {
                    return ServerFrame::error(Some(id), ErrorCode::NotFound, format!("no instance {instance}"));
                }
                let was_running = self.kernel.terminate(instance, CLIENT_TERMINATE_REASON);
                // Watchers get the exit push before the reply.
                self.route_outputs();
                let status = self.kernel.status(instance).unwrap_or(InstanceStatus::Terminated(CLIENT_TERMINATE_REASON.into()));
                ServerFrame::Terminated { id, instance, was_running, status }
            }
            ClientFrame::QueryModels { id } => ServerFrame::Models { id, models: self.kernel.models() },
            ClientFrame::QueryInstances { id } => ServerFrame::Instances { id, instances: self.kernel.instances() },
        }
    }

    fn route_outputs(&mut self) {
        for event in self.kernel.take_outputs() {
            let (frame, exited) = match event.kind {
                OutputKind::Message(data) => (ServerFrame::Message { instance: event.instance, data }, false),
                OutputKind::Exit(status) => (ServerFrame::Exit { instance: event.instance, status }, true),
            };
            let targets: Vec<ConnId> = self.watchers.get(&event.instance).map(|s| s.iter().copied().collect()).unwrap_or_default();
            for conn in targets {
                self.push(conn, frame.clone());
            }
            if exited {
                self.watchers.remove(&event.instance);
                self.owners.remove(&event.instance);
            }
        }
    }

    fn push(&mut self, conn: ConnId, frame: ServerFrame) {
        if let Some(out) = self.conns.get(&conn) {
            if out.send(frame).is_err() {
                self.conns.remove(&conn);
            }
        }
    }

    fn close(&mut self, conn: ConnId) {
        self.conns.remove(&conn);
        for set in self.watchers.values_mut() {
            set.remove(&conn);
        }
        let owned: Vec<InstanceId> = self.owners.iter().filter(|(_, &c)| c == conn).map(|(&i, _)| i).collect();
        for id in owned {
            self.owners.remove(&id);
            self.kernel.disconnect_client(id);
        }
    }
}
