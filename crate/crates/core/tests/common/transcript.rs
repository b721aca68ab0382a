//! Golden transcript fixtures and the replay driver.

use std::io::Write;
use std::net::TcpStream;
use std::path::PathBuf;

use inferlet_core::frame::read_frame_bytes;
use inferlet_core::service::{ClientFrame, ServerFrame};

pub const GREET: &str = r#"
  (module
    (import "inferlet" "arg_read" (func $arg_read (param i32 i32 i32) (result i32)))
    (import "inferlet" "send" (func $send (param i32 i32) (result i32)))
    (import "inferlet" "set_result" (func $set_result (param i32 i32) (result i32)))
    (memory (export "memory") 1)
    (data (i32.const 512) "ok")
    (func (export "run") (result i32)
      (local $n i32)
      (local.set $n (call $arg_read (i32.const 0) (i32.const 0) (i32.const 256)))
      (drop (call $send (i32.const 0) (local.get $n)))
      (drop (call $set_result (i32.const 512) (i32.const 2)))
      (i32.const 0)))
"#;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn split_frames(mut bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    while let Some(body) = read_frame_bytes(&mut bytes).unwrap() {
        out.push(body);
    }
    out
}

pub fn join_frames(bodies: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for b in bodies {
        out.extend_from_slice(&(b.len() as u32).to_be_bytes());
        out.extend_from_slice(b);
    }
    out
}

pub fn transcript_requests() -> Vec<Vec<u8>> {
    let hello = ["--prompt", "Hello, ", "--max-tokens", "10"].map(String::from).to_vec();
    let hash = inferlet_core::runtime::program_hash(GREET.as_bytes());
    let frames = [
        ClientFrame::UploadProgram { id: 1, data: GREET.as_bytes().to_vec() },
        ClientFrame::Launch { id: 2, program: hash.clone(), args: vec!["hi there".into()] },
        ClientFrame::Launch { id: 3, program: hash, args: vec!["again".into()] },
        ClientFrame::Launch { id: 4, program: "text_completion".into(), args: hello },
        ClientFrame::QueryModels { id: 5 },
        ClientFrame::QueryInstances { id: 6 },
        ClientFrame::Terminate { id: 7, instance: 1 },
    ];
    let mut bodies: Vec<Vec<u8>> = frames.iter().map(|f| serde_json::to_vec(f).unwrap()).collect();
    bodies.push(br#"{"op":"frobnicate","id":8}"#.to_vec());
    bodies
}

/// Sends each request and collects replies until its response arrives,
/// plus, for launches, every push up to the instance's exit.
pub fn drive(addr: std::net::SocketAddr, requests: &[Vec<u8>]) -> Vec<Vec<u8>> {
    let mut s = TcpStream::connect(addr).unwrap();
    let mut replies = Vec::new();
    for body in requests {
        s.write_all(&(body.len() as u32).to_be_bytes()).unwrap();
        s.write_all(body).unwrap();
        let id: serde_json::Value = serde_json::from_slice(body).unwrap();
        let id = id["id"].as_u64();
        let mut waiting_exit = None;
        loop {
            let raw = read_frame_bytes(&mut s).unwrap().expect("server closed");
            let mut frame: ServerFrame = serde_json::from_slice(&raw).unwrap();
            if let ServerFrame::Launched { latency_us, instance, .. } = &mut frame {
                *latency_us = 0;
                waiting_exit = Some(*instance);
            }
            replies.push(serde_json::to_vec(&frame).unwrap());
            match (&frame, waiting_exit) {
                (ServerFrame::Exit { instance, .. }, Some(i)) if *instance == i => break,
                (f, None) if f.id() == id => break,
                _ => {}
            }
        }
    }
    replies
}
