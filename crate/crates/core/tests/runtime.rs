mod common;

use std::io::{Read, Write};

use common::*;
use inferlet_core::backends::{ModelSpec, Trait};
use inferlet_core::error::{ApiError, InferletError};
use inferlet_core::inferlib::{Context, Sampler, Stop};
use inferlet_core::runtime::{Host, InstanceStatus, Kernel, KernelConfig};
use proptest::prelude::*;

fn assert_pools_full(k: &Kernel) {
    let c = k.control();
    c.resources.check_conservation().unwrap();
    for m in 0..c.models().len() {
        let s = c.resources.stats(m);
        assert_eq!((s.kv_free, s.emb_free), (s.kv_total, s.emb_total), "model {m} leaked");
    }
}

#[test]
fn default_models_and_traits() {
    let mut k = kernel();
    k.register_builtin("probe", |h: Host| async move {
        let names: Vec<String> = h.available_models().into_iter().map(|m| m.name).collect();
        let traits = h.available_traits("mock-hash")?;
        let missing = h.available_traits("nope").unwrap_err();
        Ok(serde_json::to_string(&(names, traits, missing)).unwrap())
    });
    let r = k.run_program("probe", vec![]).unwrap();
    let InstanceStatus::Finished(v) = r.status else { panic!("{:?}", r.status) };
    let (names, traits, missing): (Vec<String>, Vec<Trait>, ApiError) = serde_json::from_str(&v).unwrap();
    assert_eq!(names, ["mock-hash", "toy-transformer"]);
    assert!(traits.contains(&Trait::Tokenize) && traits.contains(&Trait::OutputText));
    assert_eq!(missing, ApiError::UnknownModel("nope".into()));
}

#[test]
fn missing_trait_fails_with_client_message() {
    let mut spec = ModelSpec::mock("bare");
    spec.traits = Some(vec![Trait::Forward, Trait::OutputText]);
    let cfg = KernelConfig { models: vec![spec], ..KernelConfig::default() };
    let mut k = Kernel::new(cfg).unwrap();
    let r = k.run_program("text_completion", args(&["--prompt", "hi"])).unwrap();
    assert!(matches!(&r.status, InstanceStatus::Failed(m) if m.contains("Tokenize")), "{:?}", r.status);
    assert!(r.text().contains("does not implement Tokenize"), "{}", r.text());
    assert_pools_full(&k);
}

#[test]
fn hundred_sends_arrive_in_order() {
    let mut k = kernel();
    k.register_builtin("counter", |h: Host| async move {
        let q = h.create_queue("mock-hash")?;
        for i in 0..100u32 {
            h.send(i.to_string())?;
            if i % 7 == 0 {
                // Suspend between sends now and then.
                h.tokenize(q, "x").await?;
            }
        }
        Ok(String::new())
    });
    let r = k.run_program("counter", vec![]).unwrap();
    let got: Vec<String> = r.messages.iter().map(|m| String::from_utf8(m.clone()).unwrap()).collect();
    assert_eq!(got, (0..100).map(|i| i.to_string()).collect::<Vec<_>>());
}

#[test]
fn status_leaves_running_once() {
    let mut k = kernel();
    let r = k.run_program("text_completion", args(&["--max-tokens", "2"])).unwrap();
    assert!(!k.terminate(r.instance, "late"));
    assert_eq!(k.status(r.instance), Some(r.status));
}

#[test]
fn broadcast_without_subscribers_is_fine() {
    let mut k = kernel();
    k.register_builtin("shout", |h: Host| async move {
        h.broadcast("nobody", "hello")?;
        Ok("sent".into())
    });
    assert_eq!(k.run_program("shout", vec![]).unwrap().status, InstanceStatus::Finished("sent".into()));
}

#[derive(Debug, Clone, Copy)]
enum Crash {
    PanicAfterFill,
    ErrorAfterFill,
    PanicMidDecode(usize),
    Terminated,
}

fn crash_strategy() -> impl Strategy<Value = Crash> {
    prop_oneof![
        Just(Crash::PanicAfterFill),
        Just(Crash::ErrorAfterFill),
        (0usize..6).prop_map(Crash::PanicMidDecode),
        Just(Crash::Terminated),
    ]
}

async fn crashy(h: Host) -> Result<String, InferletError> {
    let a = h.get_arg();
    let mut ctx = Context::new(&h, "mock-hash")?;
    ctx.fill(&a[1]).await?;
    // A live fork holds shared pages when the crash hits.
    let mut child = ctx.fork().await?;
    child.fill("child").await?;
    match a[0].as_str() {
        "panic" => panic!("injected"),
        "error" => Err(InferletError::Message("injected".into())),
        "hang" => {
            h.receive().await?;
            Ok(String::new())
        }
        n => {
            let n: usize = n.parse().unwrap();
            for _ in 0..n {
                let d = ctx.next_dist().await?;
                ctx.push_token(d.ids[0])?;
            }
            panic!("injected after {n} tokens")
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn crashes_are_isolated(crashes in proptest::collection::vec(crash_strategy(), 1..5), prompt in "[a-z ]{1,24}") {
        let mut k = kernel();
        k.register_builtin("crashy", crashy);
        let healthy: Vec<u64> = (0..2)
            .map(|_| k.launch("text_completion", args(&["--prompt", &prompt, "--max-tokens", "8"])).unwrap().instance)
            .collect();
        let mut doomed = Vec::new();
        for c in &crashes {
            let mode = match c {
                Crash::PanicAfterFill => "panic".to_string(),
                Crash::ErrorAfterFill => "error".to_string(),
                Crash::PanicMidDecode(n) => n.to_string(),
                Crash::Terminated => "hang".to_string(),
            };
            doomed.push((k.launch("crashy", vec![mode, prompt.clone()]).unwrap().instance, *c));
        }
        k.run_until(3_000);
        for &(id, c) in &doomed {
            if matches!(c, Crash::Terminated) {
                k.terminate(id, "injected");
            }
        }
        k.run_until_idle();
        for &(id, c) in &doomed {
            let status = k.status(id).unwrap();
            let expected_terminated = matches!(c, Crash::Terminated);
            prop_assert!(
                if expected_terminated { matches!(status, InstanceStatus::Terminated(_)) } else { matches!(status, InstanceStatus::Failed(_)) },
                "{:?} -> {:?}", c, status
            );
        }
        let want = render(&greedy(&bytes(&prompt), 8, true));
        for id in healthy {
            let r = k.collect(id);
            prop_assert!(matches!(r.status, InstanceStatus::Finished(_)));
            prop_assert_eq!(r.messages.concat(), want.clone());
        }
        assert_pools_full(&k);
    }
}

#[test]
fn real_http_against_loopback_server() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let server = std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        let mut buf = [0u8; 1024];
        let _ = s.read(&mut buf).unwrap();
        s.write_all(b"HTTP/1.1 200 OK\r\nContent-Length: 5\r\nConnection: close\r\n\r\nhello").unwrap();
    });
    let cfg = KernelConfig { http_allowlist: vec![format!("127.0.0.1:{port}")], virtual_clock: false, ..KernelConfig::default() };
    let mut k = Kernel::new(cfg).unwrap();
    k.register_builtin("fetch", |h: Host| async move {
        let url = h.get_arg()[0].clone();
        let r = h.http_get(&url).await?;
        let denied = h.http_get("http://example.com/").await.unwrap_err();
        Ok(format!("{} {} {:?}", r.status, String::from_utf8_lossy(&r.body), denied.code()))
    });
    let r = k.run_program("fetch", vec![format!("http://127.0.0.1:{port}/x")]).unwrap();
    server.join().unwrap();
    assert_eq!(r.status, InstanceStatus::Finished("200 hello Denied".into()));
}

#[cfg(feature = "wasm")]
mod bytecode {
    use super::*;

    /// Greedy decoding written directly against the raw imports: one page,
    /// an embed per prompt token, one output embed.
    const GREEDY: &str = r#"
      (module
        (import "inferlet" "arg_read" (func $arg_read (param i32 i32 i32) (result i32)))
        (import "inferlet" "buf_read" (func $buf_read (param i32 i32) (result i32)))
        (import "inferlet" "send" (func $send (param i32 i32) (result i32)))
        (import "inferlet" "set_result" (func $set_result (param i32 i32) (result i32)))
        (import "inferlet" "available_traits" (func $traits (param i32 i32) (result i32)))
        (import "inferlet" "create_queue" (func $create_queue (param i32 i32) (result i32)))
        (import "inferlet" "tokenize" (func $tokenize (param i32 i32 i32) (result i32)))
        (import "inferlet" "detokenize" (func $detokenize (param i32 i32 i32) (result i32)))
        (import "inferlet" "alloc_kvpage" (func $alloc_kvpage (param i32 i32) (result i32)))
        (import "inferlet" "alloc_emb" (func $alloc_emb (param i32 i32) (result i32)))
        (import "inferlet" "embed_txt" (func $embed_txt (param i32 i32 i32 i32 i32) (result i32)))
        (import "inferlet" "forward" (func $forward (param i32 i32 i32 i32 i32 i32 i32 i32 i32) (result i32)))
        (import "inferlet" "get_next_dist" (func $get_next_dist (param i32 i32 i32) (result i32)))
        (memory (export "memory") 1)
        (data (i32.const 4000) "mock-hash")
        (data (i32.const 4200) "done")
        (func $ok (param $r i32) (result i32)
          (if (i32.lt_s (local.get $r) (i32.const 0)) (then unreachable))
          (local.get $r))
        (func (export "run") (result i32)
          (local $q i32) (local $n i32) (local $t i32) (local $total i32)
          (local $i i32) (local $id i32) (local $len i32) (local $out i32)
          ;; trait names, newline separated
          (local.set $len (call $ok (call $traits (i32.const 4000) (i32.const 9))))
          (drop (call $buf_read (i32.const 5000) (local.get $len)))
          (drop (call $ok (call $send (i32.const 5000) (local.get $len))))
          (local.set $q (call $ok (call $create_queue (i32.const 4000) (i32.const 9))))
          (local.set $n (call $arg_read (i32.const 0) (i32.const 0) (i32.const 256)))
          (local.set $t (call $ok (call $tokenize (local.get $q) (i32.const 0) (local.get $n))))
          (drop (call $buf_read (i32.const 1028) (i32.mul (local.get $t) (i32.const 4))))
          (i32.store (i32.const 1024) (i32.const 256))
          (local.set $total (i32.add (local.get $t) (i32.const 1)))
          (block $filled (loop $fill
            (br_if $filled (i32.ge_u (local.get $i) (local.get $total)))
            (i32.store (i32.add (i32.const 1536) (i32.shl (local.get $i) (i32.const 2))) (local.get $i))
            (local.set $i (i32.add (local.get $i) (i32.const 1)))
            (br $fill)))
          (drop (call $ok (call $alloc_emb (local.get $q) (local.get $total))))
          (drop (call $buf_read (i32.const 2048) (i32.mul (local.get $total) (i32.const 4))))
          (drop (call $ok (call $alloc_kvpage (local.get $q) (i32.const 1))))
          (drop (call $buf_read (i32.const 2560) (i32.const 4)))
          (drop (call $ok (call $alloc_emb (local.get $q) (i32.const 1))))
          (drop (call $buf_read (i32.const 2600) (i32.const 4)))
          (local.set $out (i32.load (i32.const 2600)))
          (drop (call $ok (call $embed_txt (local.get $q) (i32.const 1024) (i32.const 1536) (i32.const 2048) (local.get $total))))
          (drop (call $ok (call $forward (local.get $q)
            (i32.const 2560) (i32.const 0) (i32.const 2048) (local.get $total)
            (i32.const 2560) (i32.const 1) (i32.const 2600) (i32.const 1))))
          (local.set $i (i32.const 0))
          (block $end (loop $gen
            (br_if $end (i32.ge_u (local.get $i) (i32.const 6)))
            (drop (call $ok (call $get_next_dist (local.get $q) (local.get $out) (i32.const 1))))
            (drop (call $buf_read (i32.const 3000) (i32.const 12)))
            (local.set $id (i32.load (i32.const 3000)))
            (br_if $end (i32.eq (local.get $id) (i32.const 257)))
            (local.set $len (call $ok (call $detokenize (local.get $q) (i32.const 3000) (i32.const 1))))
            (drop (call $buf_read (i32.const 4100) (i32.const 16)))
            (drop (call $ok (call $send (i32.const 4100) (local.get $len))))
            (i32.store (i32.const 1024) (local.get $id))
            (i32.store (i32.const 1536) (i32.add (local.get $total) (local.get $i)))
            (drop (call $ok (call $embed_txt (local.get $q) (i32.const 1024) (i32.const 1536) (i32.const 2048) (i32.const 1))))
            (drop (call $ok (call $forward (local.get $q)
              (i32.const 2560) (i32.const 1) (i32.const 2048) (i32.const 1)
              (i32.const 2560) (i32.const 1) (i32.const 2600) (i32.const 1))))
            (local.set $i (i32.add (local.get $i) (i32.const 1)))
            (br $gen)))
          (drop (call $set_result (i32.const 4200) (i32.const 4)))
          (i32.const 0)))
    "#;

    #[test]
    fn raw_abi_greedy_matches_oracle() {
        let mut k = kernel();
        let hash = k.upload_program(GREEDY.as_bytes());
        for prompt in ["Hello, ", "abc"] {
            let r = k.run_program(&hash, vec![prompt.into()]).unwrap();
            assert_eq!(r.status, InstanceStatus::Finished("done".into()));
            assert_eq!(r.messages[0], b"Allocate\nForward\nInputText\nTokenize\nOutputText");
            assert_eq!(r.messages[1..].concat(), render(&greedy(&bytes(prompt), 6, true)));
        }
        assert_pools_full(&k);
    }

    #[test]
    fn warm_launch_hits_cache() {
        let mut k = kernel();
        let hash = k.upload_program(GREEDY.as_bytes());
        let cold = k.launch(&hash, vec!["x".into()]).unwrap();
        let warm = k.launch(&hash, vec!["y".into()]).unwrap();
        assert!(!cold.cache_hit && warm.cache_hit);
        k.run_until_idle();
    }
}

#[test]
fn context_library_round_trip() {
    let mut k = kernel();
    k.register_builtin("lib", |h: Host| async move {
        let mut ctx = Context::new(&h, "mock-hash")?;
        ctx.fill("Hello, ").await?;
        let out = ctx.generate_until(&Stop::max_tokens(10), &mut Sampler::greedy()).await?;
        ctx.close().await?;
        Ok(serde_json::to_string(&out.tokens).unwrap())
    });
    let r = k.run_program("lib", vec![]).unwrap();
    let InstanceStatus::Finished(v) = r.status else { panic!() };
    let tokens: Vec<u32> = serde_json::from_str(&v).unwrap();
    assert_eq!(tokens, greedy(&bytes("Hello, "), 10, true));
    assert_pools_full(&k);
}
