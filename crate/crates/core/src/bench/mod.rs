//! Load generation and metrics. A [`Scenario`] describes an inferlet
//! population and its arrival process; [`run_scenario`] replays it against
//! an embedded kernel on the virtual clock (fully deterministic) or against
//! a real server on the wall clock.

mod scenario;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;

pub use scenario::{Arrival, ClockMode, Launch, MixEntry, Scenario, ScenarioError};

use crate::control::Policy;
use crate::resources::InstanceId;
use crate::runtime::{InstanceStatus, Kernel, OutputKind};
use crate::service::{self, Client, ServerConfig};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("kernel: {0}")]
    Kernel(#[from] crate::runtime::KernelError),
    #[error("launch failed: {0}")]
    Launch(String),
    #[error("client: {0}")]
    Client(#[from] crate::service::ClientError),
}

/// Nearest-rank summary of a latency sample, in microseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_us: f64,
    pub p50_us: u64,
    pub p90_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
}

impl LatencySummary {
    pub fn from_samples(mut xs: Vec<u64>) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        xs.sort_unstable();
        let rank = |p: f64| xs[((p * xs.len() as f64).ceil() as usize).clamp(1, xs.len()) - 1];
        LatencySummary {
            count: xs.len(),
            mean_us: xs.iter().sum::<u64>() as f64 / xs.len() as f64,
            p50_us: rank(0.50),
            p90_us: rank(0.90),
            p99_us: rank(0.99),
            max_us: *xs.last().unwrap(),
        }
    }
}

/// Backend-side counters, available when the kernel runs in-process.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendReport {
    pub batches: u64,
    pub calls: u64,
    pub mean_batch_calls: f64,
    pub mean_forward_batch_calls: f64,
    /// Calls per batch to number of batches.
    pub batch_histogram: BTreeMap<usize, u64>,
    pub forward_histogram: BTreeMap<usize, u64>,
    pub busy_us: u64,
    pub idle_us: u64,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub policy: String,
    pub clock: ClockMode,
    pub launched: usize,
    pub finished: usize,
    pub failed: usize,
    pub incomplete: usize,
    /// First arrival to last exit.
    pub makespan_us: u64,
    pub requests_per_sec: f64,
    pub tokens: usize,
    pub tokens_per_sec: f64,
    /// Gap before each streamed token: from launch for the first one, from
    /// the previous token otherwise.
    pub token_latency: LatencySummary,
    /// Launch to exit, finished instances only.
    pub request_latency: LatencySummary,
    pub backend: Option<BackendReport>,
}

pub const CSV_HEADER: &str = "scenario,policy,clock,launched,finished,makespan_us,requests_per_sec,tokens_per_sec,\
token_p50_us,token_p99_us,mean_batch_calls,mean_forward_batch_calls,utilization";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let (mb, mf, u) = match &self.backend {
            Some(b) => (format!("{:.3}", b.mean_batch_calls), format!("{:.3}", b.mean_forward_batch_calls), format!("{:.4}", b.utilization)),
            None => (String::new(), String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{:.3},{:.3},{},{},{},{},{}",
            self.scenario,
            self.policy,
            match self.clock {
                ClockMode::Virtual => "virtual",
                ClockMode::Wall => "wall",
            },
            self.launched,
            self.finished,
            self.makespan_us,
            self.requests_per_sec,
            self.tokens_per_sec,
            self.token_latency.p50_us,
            self.token_latency.p99_us,
            mb,
            mf,
            u
        )
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} [{}]: {}/{} finished in {:.3} s, {:.2} req/s, {:.1} tok/s, token latency p50 {} us p99 {} us",
            self.scenario,
            self.policy,
            self.finished,
            self.launched,
            self.makespan_us as f64 / 1e6,
            self.requests_per_sec,
            self.tokens_per_sec,
            self.token_latency.p50_us,
            self.token_latency.p99_us,
        );
        if let Some(b) = &self.backend {
            let _ = write!(
                s,
                ", {} batches (mean {:.2} calls, forward {:.2}), utilization {:.1}%",
                b.batches,
                b.mean_batch_calls,
                b.mean_forward_batch_calls,
                b.utilization * 100.0
            );
        }
        s
    }
}

pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Whitespace-separated columns with a `#` header, readable by gnuplot.
pub fn to_dat(reports: &[MetricsReport]) -> String {
    let mut out = String::from("# policy requests_per_sec tokens_per_sec token_p50_us mean_forward_batch_calls\n");
    for r in reports {
        let mf = r.backend.as_ref().map_or(0.0, |b| b.mean_forward_batch_calls);
        let _ = writeln!(out, "{} {:.3} {:.3} {} {:.3}", r.policy, r.requests_per_sec, r.tokens_per_sec, r.token_latency.p50_us, mf);
    }
    out
}

#[derive(Default)]
struct Track {
    launched_at: u64,
    message_times: Vec<u64>,
    exit: Option<(u64, InstanceStatus)>,
}

fn summarize(s: &Scenario, tracks: &[Track], first_arrival: u64, end: u64, backend: Option<BackendReport>) -> MetricsReport {
    let mut finished = 0;
    let mut failed = 0;
    let mut incomplete = 0;
    let mut tokens = 0;
    let mut gaps = Vec::new();
    let mut request = Vec::new();
    let mut last_exit = first_arrival;
    for t in tracks {
        tokens += t.message_times.len();
        let mut prev = t.launched_at;
        for &m in &t.message_times {
            gaps.push(m.saturating_sub(prev));
            prev = m;
        }
        match &t.exit {
            Some((at, InstanceStatus::Finished(_))) => {
                finished += 1;
                request.push(at - t.launched_at);
                last_exit = last_exit.max(*at);
            }
            Some((at, _)) => {
                failed += 1;
                last_exit = last_exit.max(*at);
            }
            None => incomplete += 1,
        }
    }
    let makespan_us = if incomplete > 0 { end - first_arrival } else { last_exit - first_arrival };
    let secs = makespan_us.max(1) as f64 / 1e6;
    MetricsReport {
        scenario: s.name.clone(),
        policy: s.policy.to_string(),
        clock: s.clock,
        launched: tracks.len(),
        finished,
        failed,
        incomplete,
        makespan_us,
        requests_per_sec: finished as f64 / secs,
        tokens,
        tokens_per_sec: tokens as f64 / secs,
        token_latency: LatencySummary::from_samples(gaps),
        request_latency: LatencySummary::from_samples(request),
        backend,
    }
}

pub fn run_scenario(s: &Scenario) -> Result<MetricsReport, BenchError> {
    s.validate()?;
    match s.clock {
        ClockMode::Virtual => run_virtual(s),
        ClockMode::Wall => run_wall(s),
    }
}

fn run_virtual(s: &Scenario) -> Result<MetricsReport, BenchError> {
    let mut config = s.kernel.clone();
    config.policy = s.policy;
    config.virtual_clock = true;
    let mut kernel = Kernel::new(config)?;
    let schedule = s.schedule();
    let horizon = s.duration_ms.map(|ms| ms * 1000);
    let mut tracks: Vec<Track> = Vec::with_capacity(schedule.len());
    let mut index: BTreeMap<InstanceId, usize> = BTreeMap::new();
    let mut next = 0;
    loop {
        let now = kernel.now();
        while next < schedule.len() && schedule[next].at_us <= now {
            let l = &schedule[next];
            let info = kernel.launch(&l.program, l.args.clone()).map_err(|e| BenchError::Launch(e.to_string()))?;
            index.insert(info.instance, tracks.len());
            tracks.push(Track { launched_at: now, ..Track::default() });
            next += 1;
        }
        kernel.run_now();
        for o in kernel.take_outputs() {
            let Some(&i) = index.get(&o.instance) else { continue };
            match o.kind {
                OutputKind::Message(_) => tracks[i].message_times.push(o.t),
                OutputKind::Exit(status) => tracks[i].exit = Some((o.t, status)),
            }
        }
        let arrival = schedule.get(next).map(|l| l.at_us);
        let wake = match (kernel.next_event(), arrival) {
            (Some(a), Some(b)) => a.min(b),
            (a, b) => match a.or(b) {
                Some(t) => t,
                None => break,
            },
        };
        if horizon.is_some_and(|h| wake > h) {
            kernel.advance_to(horizon.unwrap().max(kernel.now()));
            break;
        }
        kernel.advance_to(wake);
    }
    let end = kernel.now();
    let backend = {
        let control = kernel.control();
        let st = control.stats();
        let forward_batches: u64 = st.forward_histogram.values().sum();
        let forward_calls: u64 = st.forward_histogram.iter().map(|(&k, &v)| k as u64 * v).sum();
        let busy = st.busy_us.min(end);
        BackendReport {
            batches: st.batches,
            calls: st.calls,
            mean_batch_calls: if st.batches == 0 { 0.0 } else { st.calls as f64 / st.batches as f64 },
            mean_forward_batch_calls: if forward_batches == 0 { 0.0 } else { forward_calls as f64 / forward_batches as f64 },
            batch_histogram: st.histogram.clone(),
            forward_histogram: st.forward_histogram.clone(),
            busy_us: busy,
            idle_us: end - busy,
            utilization: if end == 0 { 0.0 } else { busy as f64 / end as f64 },
        }
    };
    let first = schedule.first().map_or(0, |l| l.at_us);
    Ok(summarize(s, &tracks, first, end, Some(backend)))
}

fn run_wall(s: &Scenario) -> Result<MetricsReport, BenchError> {
    let mut embedded = None;
    let addr = match &s.server {
        Some(a) => a.clone(),
        None => {
            let mut kernel = s.kernel.clone();
            kernel.policy = s.policy;
            kernel.virtual_clock = false;
            let handle = service::start(ServerConfig { listen: "127.0.0.1:0".into(), split_backend: false, kernel })?;
            let a = handle.addr().to_string();
            embedded = Some(handle);
            a
        }
    };
    let schedule = s.schedule();
    let start = Instant::now();
    let deadline = s.duration_ms.map(|ms| start + Duration::from_millis(ms));
    let micros = move |t: Instant| t.duration_since(start).as_micros() as u64;
    let workers: Vec<_> = schedule
        .into_iter()
        .map(|l| {
            let addr = addr.clone();
            std::thread::spawn(move || -> Result<Track, BenchError> {
                let at = start + Duration::from_micros(l.at_us);
                if let Some(wait) = at.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
                let mut client = Client::connect(&addr)?;
                let launched = Instant::now();
                let info = client.launch(&l.program, &l.args)?;
                let mut track = Track { launched_at: micros(launched), ..Track::default() };
                let mut times = Vec::new();
                let status = client.wait_exit(info.instance, |_| times.push(micros(Instant::now())));
                track.message_times = times;
                track.exit = Some((micros(Instant::now()), status?));
                Ok(track)
            })
        })
        .collect();
    let mut tracks = Vec::with_capacity(workers.len());
    for w in workers {
        let track = w.join().map_err(|_| BenchError::Launch("worker panicked".into()))??;
        let late = match (&track.exit, deadline) {
            (Some((at, _)), Some(d)) => *at > micros(d),
            _ => false,
        };
        tracks.push(if late { Track { exit: None, ..track } } else { track });
    }
    let end = micros(Instant::now());
    drop(embedded);
    Ok(summarize(s, &tracks, 0, end, None))
}

/// K and T values swept for the size- and time-threshold policies.
pub const SWEEP_K: [usize; 3] = [4, 16, 64];
pub const SWEEP_T_MS: [u64; 3] = [1, 5, 20];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub eager: MetricsReport,
    pub k: Vec<MetricsReport>,
    pub t: Vec<MetricsReport>,
    pub adaptive: MetricsReport,
}

fn best(reports: &[MetricsReport]) -> &MetricsReport {
    // Ties go to the earlier (smaller) threshold.
    reports
        .iter()
        .reduce(|a, b| if b.requests_per_sec > a.requests_per_sec { b } else { a })
        .expect("non-empty sweep")
}

impl Sweep {
    pub fn k_best(&self) -> &MetricsReport {
        best(&self.k)
    }

    pub fn t_best(&self) -> &MetricsReport {
        best(&self.t)
    }

    pub fn all(&self) -> Vec<MetricsReport> {
        let mut v = vec![self.eager.clone()];
        v.extend(self.k.iter().cloned());
        v.extend(self.t.iter().cloned());
        v.push(self.adaptive.clone());
        v
    }
}

/// Runs the scenario under Eager, every swept K and T, and Adaptive.
pub fn policy_sweep(s: &Scenario) -> Result<Sweep, BenchError> {
    let run = |p: Policy| run_scenario(&s.clone().with_policy(p));
    Ok(Sweep {
        eager: run(Policy::Eager)?,
        k: SWEEP_K.iter().map(|&k| run(Policy::K(k))).collect::<Result<_, _>>()?,
        t: SWEEP_T_MS.iter().map(|&t| run(Policy::T(t * 1000))).collect::<Result<_, _>>()?,
        adaptive: run(Policy::Adaptive)?,
    })
}
