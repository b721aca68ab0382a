//! Standalone reference for the mock model, written from its definition
//! without touching the serving stack.
#![allow(dead_code)]

pub const VOCAB: u32 = 258;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;

fn fnv(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x100000001b3);
    }
}

fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Integer weights of every vocabulary entry given the visible
/// `(position, token)` set.
pub fn weights(visible: &[(u32, u32)]) -> Vec<u64> {
    let mut v = visible.to_vec();
    v.sort();
    let mut h = 0xcbf29ce484222325u64;
    for (p, t) in v {
        fnv(&mut h, &(p as u64).to_le_bytes());
        fnv(&mut h, &t.to_le_bytes());
    }
    (0..VOCAB as u64).map(|t| 1 + mix(h ^ (t + 1)) % 1023).collect()
}

/// Top `k` entries as (token, probability), probability descending and
/// token ascending on ties.
pub fn top(visible: &[(u32, u32)], k: usize) -> Vec<(u32, f64)> {
    let w = weights(visible);
    let total: u64 = w.iter().sum();
    let mut ids: Vec<u32> = (0..VOCAB).collect();
    ids.sort_by(|&a, &b| w[b as usize].cmp(&w[a as usize]).then(a.cmp(&b)));
    ids.into_iter().take(k).map(|t| (t, w[t as usize] as f64 / total as f64)).collect()
}

pub fn argmax(visible: &[(u32, u32)]) -> u32 {
    top(visible, 1)[0].0
}

/// Full causal visible set for a sequence at positions `0..n`.
pub fn causal(seq: &[u32]) -> Vec<(u32, u32)> {
    seq.iter().enumerate().map(|(i, &t)| (i as u32, t)).collect()
}

pub fn bytes(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

/// Greedy continuation of `BOS ‖ prompt` under full attention.
pub fn greedy(prompt: &[u32], n: usize, stop_at_eos: bool) -> Vec<u32> {
    greedy_with(prompt, n, stop_at_eos, |_, _| true)
}

/// Greedy continuation where `sees(query, key)` decides which earlier
/// positions a token attends to.
pub fn greedy_with(prompt: &[u32], n: usize, stop_at_eos: bool, sees: impl Fn(u32, u32) -> bool) -> Vec<u32> {
    let mut seq = vec![BOS];
    seq.extend_from_slice(prompt);
    let mut out = Vec::new();
    while out.len() < n {
        let q = seq.len() as u32 - 1;
        let visible: Vec<(u32, u32)> = causal(&seq).into_iter().filter(|&(p, _)| p == q || sees(q, p)).collect();
        let t = argmax(&visible);
        if stop_at_eos && t == EOS {
            break;
        }
        out.push(t);
        seq.push(t);
    }
    out
}

/// Renders tokens the way the byte tokenizer does.
pub fn render(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

use inferlet_core::backends::wire::CallKind;
use inferlet_core::control::Event;
use inferlet_core::runtime::{Kernel, KernelConfig};

/// Kernel on the mock model with the event log on.
pub fn kernel() -> Kernel {
    Kernel::new(KernelConfig { log_events: true, ..KernelConfig::default() }).unwrap()
}

pub fn args(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Input positions of every successful forward by `instance`, in
/// completion order.
pub fn forwards(events: &[Event], instance: u64) -> Vec<Vec<u32>> {
    events
        .iter()
        .filter_map(|e| match e {
            Event::Complete { instance: i, call: CallKind::Forward, ok: true, positions, .. } if *i == instance => {
                Some(positions.clone())
            }
            _ => None,
        })
        .collect()
}

/// Number of completed calls of `kind` by `instance`.
pub fn completed(events: &[Event], instance: u64, kind: CallKind) -> usize {
    events
        .iter()
        .filter(|e| matches!(e, Event::Complete { instance: i, call, .. } if *i == instance && *call == kind))
        .count()
}
pub mod transcript;
