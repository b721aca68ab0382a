//! Batch formation: fusibility analysis, candidate construction and the
//! dispatch policies.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::completion::Resolver;
use crate::backends::wire::{Call, CallKind, CallOutput, PhysId};
use crate::error::ApiResult;
use crate::resources::InstanceId;

pub type QueueId = u64;

/// When the coordinator hands a batch to an idle backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Work-conserving: dispatch as soon as the backend is idle.
    Adaptive,
    /// One call per batch, dispatched immediately.
    Eager,
    /// Wait until at least `k` calls of one type are pending; batches are
    /// capped at `k` calls.
    K(usize),
    /// Wait until the oldest pending call has waited `t` microseconds.
    T(u64),
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Adaptive => f.write_str("adaptive"),
            Policy::Eager => f.write_str("eager"),
            Policy::K(k) => write!(f, "k={k}"),
            Policy::T(t) if t % 1000 == 0 => write!(f, "t={}ms", t / 1000),
            Policy::T(t) => write!(f, "t={t}us"),
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "adaptive" => return Ok(Policy::Adaptive),
            "eager" => return Ok(Policy::Eager),
            _ => {}
        }
        if let Some(k) = s.strip_prefix("k=") {
            return match k.parse::<usize>() {
                Ok(k) if k > 0 => Ok(Policy::K(k)),
                _ => Err(format!("bad batch-size threshold in `{s}`")),
            };
        }
        if let Some(t) = s.strip_prefix("t=") {
            let (num, scale) = if let Some(n) = t.strip_suffix("ms") {
                (n, 1000)
            } else if let Some(n) = t.strip_suffix("us") {
                (n, 1)
            } else {
                (t, 1000)
            };
            return num
                .parse::<u64>()
                .map(|n| Policy::T(n * scale))
                .map_err(|_| format!("bad wait threshold in `{s}`"));
        }
        Err(format!("unknown policy `{s}`"))
    }
}

impl Serialize for Policy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Policy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Size limits for one batch. Forward batches are limited by input tokens,
/// all others by call count. A single oversized call still dispatches alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchCaps {
    pub max_batch_tokens: usize,
    pub max_batch_calls: usize,
}

impl Default for BatchCaps {
    fn default() -> Self {
        BatchCaps { max_batch_tokens: 4096, max_batch_calls: 256 }
    }
}

/// Side effects applied when a call completes or is cancelled.
#[derive(Debug, Default)]
pub struct Effects {
    pub release_kv: Vec<PhysId>,
    pub release_emb: Vec<PhysId>,
    /// Pages this call writes; their pending-write counters drop on completion.
    pub writes: Vec<PhysId>,
}

pub struct PendingCall {
    pub call: Call,
    pub instance: InstanceId,
    pub seq: u64,
    pub enqueued_at: u64,
    /// Forward input positions when every input embed's position is known.
    pub positions: Option<Vec<u32>>,
    pub reply: Option<Resolver<ApiResult<CallOutput>>>,
    pub effects: Effects,
}

impl fmt::Debug for PendingCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PendingCall")
            .field("call", &self.call)
            .field("seq", &self.seq)
            .field("enqueued_at", &self.enqueued_at)
            .finish()
    }
}

fn disjoint(a: &[PhysId], b: &[PhysId]) -> bool {
    !a.iter().any(|x| b.contains(x))
}

/// Whether `b`, queued directly behind `a`, may run in the same backend
/// invocation without changing any result.
pub fn fusible(a: &PendingCall, b: &PendingCall) -> bool {
    match (&a.call, &b.call) {
        (
            Call::Forward { okv: a_okv, oemb: a_oemb, .. },
            Call::Forward { ikv: b_ikv, iemb: b_iemb, okv: b_okv, oemb: b_oemb, .. },
        ) => {
            if !disjoint(a_okv, b_okv) || !disjoint(a_oemb, b_oemb) || !disjoint(b_iemb, a_oemb) {
                return false;
            }
            if disjoint(b_ikv, a_okv) {
                return true;
            }
            match (&a.positions, &b.positions) {
                (Some(pa), Some(pb)) => match (pa.iter().max(), pb.iter().min()) {
                    (Some(max_a), Some(min_b)) => max_a < min_b,
                    _ => false,
                },
                _ => false,
            }
        }
        (Call::EmbedText { embeds: ea, .. }, Call::EmbedText { embeds: eb, .. }) => disjoint(ea, eb),
        (Call::Mask { page: pa, .. }, Call::Mask { page: pb, .. }) => pa != pb,
        (Call::Copy { dst: da, .. }, Call::Copy { src: sb, dst: db, .. }) => da != db && sb != da,
        (x, y) => x.kind() == y.kind(),
    }
}

/// Length of the fused run at the head of `pending`.
pub fn fused_run(pending: &VecDeque<PendingCall>) -> usize {
    let Some(head) = pending.front() else { return 0 };
    let kind = head.call.kind();
    let mut n = 1;
    while let Some(next) = pending.get(n) {
        if next.call.kind() != kind || !(0..n).all(|i| fusible(&pending[i], next)) {
            break;
        }
        n += 1;
    }
    n
}

/// Read-only view of a queue for batch formation.
#[derive(Debug, Clone, Copy)]
pub struct QueueView<'a> {
    pub id: QueueId,
    pub model: usize,
    pub priority: i32,
    pub pending: &'a VecDeque<PendingCall>,
}

/// A formed batch: how many head calls to take from each queue, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub model: usize,
    pub kind: CallKind,
    pub take: Vec<(QueueId, usize)>,
    /// Enqueue time of the oldest member considered.
    pub oldest: u64,
}

impl Plan {
    pub fn calls(&self) -> usize {
        self.take.iter().map(|t| t.1).sum()
    }
}

/// Outcome of one formation round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formation {
    Dispatch(Plan),
    /// Nothing eligible yet; a time-based policy becomes eligible at the
    /// given instant if nothing else changes.
    WaitUntil(u64),
    /// Nothing eligible and no timer would change that.
    Idle,
}

struct Run<'a> {
    queue: QueueId,
    priority: i32,
    head_time: u64,
    calls: Vec<&'a PendingCall>,
}

/// Forms the next batch under `policy`.
///
/// Per (model, call type) the candidate consists of every queue whose head
/// has that type, each contributing its fused head run. Runs are ordered by
/// priority (descending), then head enqueue time, then queue id, and the
/// candidate is truncated from the tail to the size caps. Among eligible
/// candidates the one whose oldest call has waited longest wins; equal
/// waits go to the earlier call type.
pub fn form_batch(queues: &[QueueView<'_>], policy: Policy, caps: BatchCaps, now: u64) -> Formation {
    let mut candidates: BTreeMap<(CallKind, usize), Vec<Run<'_>>> = BTreeMap::new();
    for q in queues {
        let n = fused_run(q.pending);
        if n == 0 {
            continue;
        }
        let head = &q.pending[0];
        candidates.entry((head.call.kind(), q.model)).or_default().push(Run {
            queue: q.id,
            priority: q.priority,
            head_time: head.enqueued_at,
            calls: q.pending.iter().take(n).collect(),
        });
    }

    let mut best: Option<(u64, Plan)> = None;
    let mut wake: Option<u64> = None;
    for ((kind, model), mut runs) in candidates {
        runs.sort_by(|a, b| {
            b.priority.cmp(&a.priority).then(a.head_time.cmp(&b.head_time)).then(a.queue.cmp(&b.queue))
        });
        let oldest = runs.iter().map(|r| r.head_time).min().unwrap_or(now);
        let total: usize = runs.iter().map(|r| r.calls.len()).sum();
        let call_cap = match policy {
            Policy::Adaptive | Policy::T(_) => usize::MAX,
            Policy::Eager => 1,
            Policy::K(k) => {
                if total < k {
                    continue;
                }
                k
            }
        };
        if let Policy::T(t) = policy {
            let due = oldest.saturating_add(t);
            if now < due {
                wake = Some(wake.map_or(due, |w| w.min(due)));
                continue;
            }
        }
        if best.as_ref().is_some_and(|(o, _)| *o <= oldest) {
            continue;
        }
        best = Some((oldest, truncate(&runs, kind, model, oldest, caps, call_cap)));
    }
    match (best, wake) {
        (Some((_, plan)), _) => Formation::Dispatch(plan),
        (None, Some(t)) => Formation::WaitUntil(t),
        (None, None) => Formation::Idle,
    }
}

fn truncate(runs: &[Run<'_>], kind: CallKind, model: usize, oldest: u64, caps: BatchCaps, call_cap: usize) -> Plan {
    let mut take = Vec::new();
    let mut calls = 0usize;
    let mut tokens = 0usize;
    'outer: for r in runs {
        let mut n = 0;
        for c in &r.calls {
            let units = c.call.units();
            let over = if kind == CallKind::Forward {
                tokens + units > caps.max_batch_tokens
            } else {
                calls + 1 > caps.max_batch_calls
            };
            if calls > 0 && (over || calls + 1 > call_cap) {
                if n > 0 {
                    take.push((r.queue, n));
                }
                break 'outer;
            }
            calls += 1;
            tokens += units;
            n += 1;
        }
        take.push((r.queue, n));
    }
    Plan { model, kind, take, oldest }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fwd(ikv: &[u32], iemb: &[u32], okv: &[u32], oemb: &[u32], pos: &[u32], seq: u64) -> PendingCall {
        PendingCall {
            call: Call::Forward {
                ikv: ikv.to_vec(),
                iemb: iemb.to_vec(),
                okv: okv.to_vec(),
                oemb: oemb.to_vec(),
                mask: None,
            },
            instance: 1,
            seq,
            enqueued_at: seq,
            positions: Some(pos.to_vec()),
            reply: None,
            effects: Effects::default(),
        }
    }

    fn embed(embeds: &[u32], seq: u64) -> PendingCall {
        PendingCall {
            call: Call::EmbedText {
                tokens: vec![1; embeds.len()],
                positions: (0..embeds.len() as u32).collect(),
                embeds: embeds.to_vec(),
            },
            instance: 1,
            seq,
            enqueued_at: seq,
            positions: None,
            reply: None,
            effects: Effects::default(),
        }
    }

    #[test]
    fn prefill_then_decode_fuses() {
        let a = fwd(&[], &[0, 1, 2], &[0], &[], &[0, 1, 2], 0);
        let b = fwd(&[0], &[3], &[], &[4], &[3], 1);
        assert!(fusible(&a, &b));
    }

    #[test]
    fn conflicting_forwards_do_not_fuse() {
        let a = fwd(&[], &[0], &[0], &[5], &[0], 0);
        assert!(!fusible(&a, &fwd(&[], &[1], &[0], &[], &[1], 1)), "same okv page");
        assert!(!fusible(&a, &fwd(&[], &[5], &[], &[], &[1], 1)), "reads a's output embed");
        assert!(!fusible(&a, &fwd(&[0], &[1], &[], &[6], &[0], 1)), "position not after a's writes");
    }

    #[test]
    fn parse_and_print_policies() {
        for s in ["adaptive", "eager", "k=16", "t=5ms", "t=250us"] {
            assert_eq!(s.parse::<Policy>().unwrap().to_string(), s);
        }
        assert_eq!("t=20".parse::<Policy>().unwrap(), Policy::T(20_000));
        assert!("k=0".parse::<Policy>().is_err());
        assert!("fifo".parse::<Policy>().is_err());
    }

    fn q(id: QueueId, priority: i32, pending: &VecDeque<PendingCall>) -> QueueView<'_> {
        QueueView { id, model: 0, priority, pending }
    }

    #[test]
    fn oldest_type_wins() {
        // Queues 1 and 2 hold forwards, 3 and 4 hold embeds; embed on queue 3 is oldest.
        let q1: VecDeque<_> = [fwd(&[], &[0], &[0], &[], &[0], 5), fwd(&[0], &[1], &[], &[9], &[1], 6)].into();
        let q2: VecDeque<_> = [fwd(&[], &[2], &[1], &[], &[0], 3)].into();
        let q3: VecDeque<_> = [embed(&[10], 1)].into();
        let q4: VecDeque<_> = [embed(&[11], 4)].into();
        let views = [q(1, 0, &q1), q(2, 0, &q2), q(3, 0, &q3), q(4, 0, &q4)];
        match form_batch(&views, Policy::Adaptive, BatchCaps::default(), 10) {
            Formation::Dispatch(p) => {
                assert_eq!(p.kind, CallKind::EmbedText);
                assert_eq!(p.take, vec![(3, 1), (4, 1)]);
            }
            other => panic!("{other:?}"),
        }
        let views = [q(1, 0, &q1), q(2, 0, &q2)];
        match form_batch(&views, Policy::Adaptive, BatchCaps::default(), 10) {
            Formation::Dispatch(p) => assert_eq!(p.take, vec![(2, 1), (1, 2)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn priority_orders_and_truncation_drops_tail() {
        let lo: VecDeque<_> = (0..4).map(|i| embed(&[i], i as u64)).collect();
        let hi: VecDeque<_> = (10..14).map(|i| embed(&[i], 100 + i as u64)).collect();
        let views = [q(1, 0, &lo), q(2, 5, &hi)];
        let caps = BatchCaps { max_batch_tokens: 4096, max_batch_calls: 6 };
        match form_batch(&views, Policy::Adaptive, caps, 1000) {
            Formation::Dispatch(p) => assert_eq!(p.take, vec![(2, 4), (1, 2)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn forty_forwards_cap_thirty_two_tokens() {
        let queues: Vec<VecDeque<PendingCall>> =
            (0..40).map(|i| [fwd(&[], &[i], &[i], &[], &[0], i as u64)].into()).collect();
        let views: Vec<_> = queues.iter().enumerate().map(|(i, p)| q(i as u64, 0, p)).collect();
        let caps = BatchCaps { max_batch_tokens: 32, max_batch_calls: 256 };
        match form_batch(&views, Policy::Adaptive, caps, 100) {
            Formation::Dispatch(p) => {
                assert_eq!(p.calls(), 32);
                assert_eq!(p.take.last(), Some(&(31, 1)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn k_and_t_thresholds() {
        let queues: Vec<VecDeque<PendingCall>> = (0..7).map(|i| [embed(&[i], 10)].into()).collect();
        let views: Vec<_> = queues.iter().enumerate().map(|(i, p)| q(i as u64, 0, p)).collect();
        assert_eq!(form_batch(&views, Policy::K(8), BatchCaps::default(), 10_000), Formation::Idle);
        assert!(matches!(
            form_batch(&views, Policy::K(4), BatchCaps::default(), 10),
            Formation::Dispatch(p) if p.calls() == 4
        ));
        assert_eq!(form_batch(&views, Policy::T(5000), BatchCaps::default(), 100), Formation::WaitUntil(5010));
        assert!(matches!(
            form_batch(&views, Policy::T(5000), BatchCaps::default(), 5010),
            Formation::Dispatch(p) if p.calls() == 7
        ));
        assert!(matches!(
            form_batch(&views, Policy::Eager, BatchCaps::default(), 10),
            Formation::Dispatch(p) if p.calls() == 1
        ));
    }
}
