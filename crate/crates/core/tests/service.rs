mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::process::Command;

use common::transcript::*;
use common::*;
use inferlet_core::backends::{ModelDescriptor, Trait};
use inferlet_core::frame::{read_frame_bytes, write_frame, MAX_FRAME};
use inferlet_core::runtime::{InstanceInfo, InstanceStatus, Kernel, KernelConfig};
use inferlet_core::service::protocol::decode_client;
use inferlet_core::service::{self, BackendChoice, Client, ClientFrame, ServerConfig, ServerFrame, ServerHandle};
use proptest::prelude::*;

fn server(virtual_clock: bool) -> ServerHandle {
    let mut cfg = ServerConfig { listen: "127.0.0.1:0".into(), ..ServerConfig::default() };
    cfg.kernel.virtual_clock = virtual_clock;
    service::start(cfg).unwrap()
}

fn hello_oracle() -> Vec<u8> {
    render(&greedy(&bytes("Hello, "), 10, true))
}

// ---- golden transcript ----

#[test]
fn golden_transcript_replays_exactly() {
    let (req_path, resp_path) = (fixture("transcript.client.bin"), fixture("transcript.server.bin"));
    if std::env::var_os("INFERLET_RECORD_FIXTURES").is_some() {
        let requests = transcript_requests();
        let s = server(true);
        let replies = drive(s.addr(), &requests);
        std::fs::write(&req_path, join_frames(&requests)).unwrap();
        std::fs::write(&resp_path, join_frames(&replies)).unwrap();
    }
    let requests = split_frames(&std::fs::read(&req_path).unwrap());
    let recorded = split_frames(&std::fs::read(&resp_path).unwrap());

    // Every documented frame decodes and re-encodes to the same bytes.
    for body in &requests {
        if let Ok(f) = decode_client(body) {
            assert_eq!(&serde_json::to_vec(&f).unwrap(), body);
        }
    }
    for body in &recorded {
        let f: ServerFrame = serde_json::from_slice(body).unwrap();
        assert_eq!(&serde_json::to_vec(&f).unwrap(), body);
    }

    let s = server(true);
    let replayed = drive(s.addr(), &requests);
    assert_eq!(replayed, recorded);

    // The transcript's text completion streams the oracle's ten tokens.
    let text: Vec<u8> = recorded
        .iter()
        .filter_map(|b| match serde_json::from_slice(b).unwrap() {
            ServerFrame::Message { instance: 3, data } => Some(data),
            _ => None,
        })
        .flatten()
        .collect();
    assert_eq!(text, hello_oracle());
}

// ---- frame round trip ----

fn status() -> impl Strategy<Value = InstanceStatus> {
    prop_oneof![
        Just(InstanceStatus::Running),
        any::<String>().prop_map(InstanceStatus::Finished),
        any::<String>().prop_map(InstanceStatus::Failed),
        any::<String>().prop_map(InstanceStatus::Terminated),
    ]
}

fn client_frame() -> impl Strategy<Value = ClientFrame> {
    let bytes = proptest::collection::vec(any::<u8>(), 0..64);
    prop_oneof![
        (any::<u64>(), bytes.clone()).prop_map(|(id, data)| ClientFrame::UploadProgram { id, data }),
        (any::<u64>(), any::<String>(), proptest::collection::vec(any::<String>(), 0..4))
            .prop_map(|(id, program, args)| ClientFrame::Launch { id, program, args }),
        (any::<u64>(), any::<u64>(), bytes).prop_map(|(id, instance, data)| ClientFrame::Send { id, instance, data }),
        (any::<u64>(), any::<u64>()).prop_map(|(id, instance)| ClientFrame::Stream { id, instance }),
        (any::<u64>(), any::<u64>()).prop_map(|(id, instance)| ClientFrame::Terminate { id, instance }),
        any::<u64>().prop_map(|id| ClientFrame::QueryModels { id }),
        any::<u64>().prop_map(|id| ClientFrame::QueryInstances { id }),
    ]
}

fn server_frame() -> impl Strategy<Value = ServerFrame> {
    let model = (any::<String>(), proptest::sample::subsequence(Trait::ALL.to_vec(), 0..=5), any::<u32>(), 1usize..64, 1usize..4096)
        .prop_map(|(name, traits, vocab_size, page_capacity, max_batch_tokens)| ModelDescriptor {
            name,
            traits: traits.into_iter().collect(),
            vocab_size,
            page_capacity,
            max_batch_tokens,
        });
    let info = (any::<u64>(), any::<String>(), proptest::collection::vec(any::<String>(), 0..3), any::<u64>(), status())
        .prop_map(|(id, program, args, created_at, status)| InstanceInfo { id, program, args, created_at, status });
    prop_oneof![
        (any::<u64>(), any::<String>(), any::<bool>()).prop_map(|(id, program, existed)| ServerFrame::Uploaded { id, program, existed }),
        (any::<u64>(), any::<u64>(), any::<String>(), any::<bool>(), any::<u64>()).prop_map(
            |(id, instance, program, cache_hit, latency_us)| ServerFrame::Launched { id, instance, program, cache_hit, latency_us }
        ),
        any::<u64>().prop_map(|id| ServerFrame::Ack { id }),
        (any::<u64>(), any::<u64>(), any::<bool>(), status())
            .prop_map(|(id, instance, was_running, status)| ServerFrame::Terminated { id, instance, was_running, status }),
        (any::<u64>(), proptest::collection::vec(model, 0..3)).prop_map(|(id, models)| ServerFrame::Models { id, models }),
        (any::<u64>(), proptest::collection::vec(info, 0..3)).prop_map(|(id, instances)| ServerFrame::Instances { id, instances }),
        (proptest::option::of(any::<u64>()), any::<i32>(), any::<String>())
            .prop_map(|(id, code, message)| ServerFrame::Error { id, code, message }),
        (any::<u64>(), proptest::collection::vec(any::<u8>(), 0..64)).prop_map(|(instance, data)| ServerFrame::Message { instance, data }),
        (any::<u64>(), status()).prop_map(|(instance, status)| ServerFrame::Exit { instance, status }),
    ]
}

proptest! {
    #[test]
    fn frames_round_trip(c in client_frame(), s in server_frame()) {
        let mut buf = Vec::new();
        write_frame(&mut buf, &c).unwrap();
        write_frame(&mut buf, &s).unwrap();
        let mut r = buf.as_slice();
        let body = read_frame_bytes(&mut r).unwrap().unwrap();
        prop_assert_eq!(decode_client(&body).unwrap(), c);
        let back: ServerFrame = inferlet_core::frame::read_frame(&mut r).unwrap().unwrap();
        prop_assert_eq!(back, s);
        prop_assert!(r.is_empty());
    }
}

// ---- server behavior ----

#[test]
fn bad_requests_get_errors_and_connection_survives() {
    let s = server(false);
    let mut raw = TcpStream::connect(s.addr()).unwrap();
    for (body, id) in [(&br#"{"op":"frobnicate","id":4}"#[..], Some(4)), (b"{not json", None), (br#"{"op":"launch"}"#, None)] {
        raw.write_all(&(body.len() as u32).to_be_bytes()).unwrap();
        raw.write_all(body).unwrap();
        let reply: ServerFrame = inferlet_core::frame::read_frame(&mut raw).unwrap().unwrap();
        assert!(matches!(reply, ServerFrame::Error { id: got, code: -1, .. } if got == id), "{reply:?}");
    }
    write_frame(&mut raw, &ClientFrame::QueryModels { id: 9 }).unwrap();
    let reply: ServerFrame = inferlet_core::frame::read_frame(&mut raw).unwrap().unwrap();
    assert!(matches!(reply, ServerFrame::Models { id: 9, .. }));
}

#[test]
fn oversize_frame_closes_connection_with_reason() {
    let s = server(false);
    let mut raw = TcpStream::connect(s.addr()).unwrap();
    raw.write_all(&((MAX_FRAME + 1) as u32).to_be_bytes()).unwrap();
    let reply: ServerFrame = inferlet_core::frame::read_frame(&mut raw).unwrap().unwrap();
    assert!(matches!(reply, ServerFrame::Error { id: None, ref message, .. } if message.contains("too large")), "{reply:?}");
    let mut rest = Vec::new();
    raw.read_to_end(&mut rest).unwrap();
    assert!(rest.is_empty());
}

#[test]
fn query_models_matches_runtime() {
    let s = server(false);
    let mut c = Client::connect(s.addr()).unwrap();
    let k = Kernel::new(KernelConfig::default()).unwrap();
    assert_eq!(c.models().unwrap(), k.models());
}

#[test]
fn terminate_running_instance() {
    let s = server(false);
    let mut c = Client::connect(s.addr()).unwrap();
    let info = c.launch("echo", &[]).unwrap();
    c.send(info.instance, b"ping").unwrap();
    let (was_running, status) = c.terminate(info.instance).unwrap();
    assert!(was_running);
    assert_eq!(status, InstanceStatus::Terminated("client_request".into()));
    let mut msgs = Vec::new();
    let exit = c.wait_exit(info.instance, |m| msgs.push(m.to_vec())).unwrap();
    assert_eq!(exit, status);
    assert_eq!(msgs, vec![b"ping".to_vec()]);
    let (again, _) = c.terminate(info.instance).unwrap();
    assert!(!again);
}

#[test]
fn only_the_owner_may_send() {
    let s = server(false);
    let mut a = Client::connect(s.addr()).unwrap();
    let mut b = Client::connect(s.addr()).unwrap();
    let info = a.launch("echo", &[]).unwrap();
    assert!(matches!(b.send(info.instance, b"x"), Err(service::ClientError::Server { code: -19, .. })));
}

#[test]
fn concurrent_clients_are_isolated() {
    const CLIENTS: usize = 6;
    const LAUNCHES: usize = 4;
    let s = server(false);
    let addr = s.addr();
    let threads: Vec<_> = (0..CLIENTS)
        .map(|c| {
            std::thread::spawn(move || {
                let mut client = Client::connect(addr).unwrap();
                let mut ids = Vec::new();
                for l in 0..LAUNCHES {
                    let id = client.launch("echo", &[]).unwrap().instance;
                    for n in 0..3 {
                        client.send(id, format!("c{c}-l{l}-m{n}").as_bytes()).unwrap();
                    }
                    ids.push(id);
                }
                let mut seen: Vec<(u64, String)> = Vec::new();
                while seen.len() < LAUNCHES * 3 {
                    match client.next_push().unwrap() {
                        ServerFrame::Message { instance, data } => seen.push((instance, String::from_utf8(data).unwrap())),
                        other => panic!("unexpected push {other:?}"),
                    }
                }
                (c, ids, seen)
            })
        })
        .collect();
    let mut all_ids = Vec::new();
    for t in threads {
        let (c, ids, seen) = t.join().unwrap();
        assert_eq!(seen.len(), LAUNCHES * 3);
        for (instance, msg) in &seen {
            let l = ids.iter().position(|i| i == instance).expect("message from a foreign instance");
            assert!(msg.starts_with(&format!("c{c}-l{l}-")), "leaked {msg} to client {c}");
        }
        for (l, id) in ids.iter().enumerate() {
            let mine: Vec<&str> = seen.iter().filter(|(i, _)| i == id).map(|(_, m)| m.as_str()).collect();
            assert_eq!(mine, (0..3).map(|n| format!("c{c}-l{l}-m{n}")).collect::<Vec<_>>());
        }
        all_ids.extend(ids);
    }
    all_ids.sort();
    all_ids.dedup();
    assert_eq!(all_ids.len(), CLIENTS * LAUNCHES);
}

#[test]
fn disconnect_ends_receive_loop() {
    let s = server(false);
    let mut watcher = Client::connect(s.addr()).unwrap();
    let id = {
        let mut owner = Client::connect(s.addr()).unwrap();
        let id = owner.launch("echo", &[]).unwrap().instance;
        owner.send(id, b"one").unwrap();
        watcher.stream(id).unwrap();
        id
    };
    let status = watcher.wait_exit(id, |_| {}).unwrap();
    assert_eq!(status, InstanceStatus::Finished(r#"{"echoed":1}"#.into()));
}

#[test]
fn split_backend_serves_same_tokens() {
    let mut cfg = ServerConfig { listen: "127.0.0.1:0".into(), ..ServerConfig::default() };
    cfg.split_backend = true;
    let backend = BackendChoice::Process { program: env!("CARGO_BIN_EXE_inferlet").into(), args: vec!["backend".into()] };
    let s = service::start_with(cfg, backend).unwrap();
    let mut c = Client::connect(s.addr()).unwrap();
    let info = c.launch("text_completion", &args(&["--prompt", "Hello, ", "--max-tokens", "10"])).unwrap();
    let mut text = Vec::new();
    let status = c.wait_exit(info.instance, |m| text.extend_from_slice(m)).unwrap();
    assert!(matches!(status, InstanceStatus::Finished(_)));
    assert_eq!(text, hello_oracle());
}

// ---- command line ----

fn cli(server: &str, argv: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_inferlet")).env("INFERLET_SERVER", server).args(argv).output().unwrap()
}

#[test]
fn cli_run_prints_ten_tokens() {
    let s = server(false);
    let addr = s.addr().to_string();
    let mut want = hello_oracle();
    assert_eq!(want.len(), 10);
    want.push(b'\n');
    for argv in [
        &["run", "text_completion", "--prompt", "Hello, ", "--max-tokens", "10"][..],
        &["run", "text_completion", "--", "--prompt", "Hello, ", "--max-tokens", "10"][..],
    ] {
        let out = cli(&addr, argv);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(out.stdout, want);
    }
}

#[test]
fn cli_run_uploads_module_files() {
    let s = server(false);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("greet.wat");
    std::fs::write(&path, GREET).unwrap();
    let out = cli(&s.addr().to_string(), &["run", path.to_str().unwrap(), "hello"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(out.stdout, b"hello\n");
}

#[test]
fn cli_run_against_dead_server_fails() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let out = cli(&port.to_string(), &["run", "text_completion"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn cli_run_reports_failure_exit_code() {
    let s = server(false);
    let out = cli(&s.addr().to_string(), &["run", "text_completion", "--model", "no-such-model"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_kill_and_ls() {
    let s = server(false);
    let addr = s.addr().to_string();
    let mut c = Client::connect(s.addr()).unwrap();
    let done = c.launch("text_completion", &args(&["--max-tokens", "1"])).unwrap().instance;
    c.wait_exit(done, |_| {}).unwrap();
    let out = cli(&addr, &["kill", &done.to_string()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("nothing to do"));

    let live = c.launch("echo", &[]).unwrap().instance;
    let out = cli(&addr, &["ls"]);
    let listing = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(listing.contains("mock-hash") && listing.contains("running"), "{listing}");
    let out = cli(&addr, &["kill", &live.to_string()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("terminated instance"));
    assert_eq!(c.wait_exit(live, |_| {}).unwrap(), InstanceStatus::Terminated("client_request".into()));

    let out = cli(&addr, &["kill", "999"]);
    assert!(!out.status.success());
}
