//! Structured trace of coordinator activity, one JSON object per line.

use serde::{Deserialize, Serialize};

use super::scheduler::QueueId;
use crate::backends::wire::CallKind;
use crate::resources::InstanceId;

/// One trace record. `t` is the coordinator clock in microseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum Event {
    Submit { t: u64, queue: QueueId, instance: InstanceId, call: CallKind, seq: u64, units: usize },
    Form { t: u64, batch: u64, call: CallKind, model: usize, calls: usize, units: usize },
    Dispatch { t: u64, batch: u64, cost_us: u64, finish_at: u64 },
    Complete {
        t: u64,
        batch: u64,
        queue: QueueId,
        instance: InstanceId,
        call: CallKind,
        seq: u64,
        ok: bool,
        /// Input positions of a completed forward call.
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        positions: Vec<u32>,
    },
    Cancel { t: u64, queue: QueueId, instance: InstanceId, seq: u64 },
    Alloc { t: u64, instance: InstanceId, model: usize, kind: String, count: usize, granted: bool },
    Launch { t: u64, instance: InstanceId, program: String },
    Exit { t: u64, instance: InstanceId, status: String },
}

impl Event {
    pub fn time(&self) -> u64 {
        match self {
            Event::Submit { t, .. }
            | Event::Form { t, .. }
            | Event::Dispatch { t, .. }
            | Event::Complete { t, .. }
            | Event::Cancel { t, .. }
            | Event::Alloc { t, .. }
            | Event::Launch { t, .. }
            | Event::Exit { t, .. } => *t,
        }
    }
}

#[derive(Debug, Default)]
pub struct EventLog {
    enabled: bool,
    events: Vec<Event>,
}

impl EventLog {
    pub fn new(enabled: bool) -> Self {
        EventLog { enabled, events: Vec::new() }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn push(&mut self, make: impl FnOnce() -> Event) {
        if self.enabled {
            self.events.push(make());
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_tagged_lines() {
        let mut log = EventLog::new(true);
        log.push(|| Event::Dispatch { t: 5, batch: 0, cost_us: 1050, finish_at: 1055 });
        assert_eq!(
            log.to_jsonl(),
            "{\"ev\":\"dispatch\",\"t\":5,\"batch\":0,\"cost_us\":1050,\"finish_at\":1055}\n"
        );
        let mut off = EventLog::new(false);
        off.push(|| unreachable!());
        assert!(off.events().is_empty());
    }
}
