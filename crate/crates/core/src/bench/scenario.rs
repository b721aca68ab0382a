use serde::{Deserialize, Serialize};

use crate::backends::hash::SplitMix64;
use crate::control::Policy;
use crate::runtime::KernelConfig;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// One population of identical inferlets. `{i}` in an argument is replaced
/// by the instance's global index, which keeps prompts distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    /// Everything arrives at time zero.
    Burst,
    /// Fixed spacing between consecutive arrivals.
    Uniform { interval_us: u64 },
    /// Exponential inter-arrival times from a seeded generator.
    Poisson { rate_per_sec: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub mix: Vec<MixEntry>,
    #[serde(default = "default_arrival")]
    pub arrival: Arrival,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default = "default_clock")]
    pub clock: ClockMode,
    /// Stop after this much (virtual or wall) time; unfinished instances are
    /// reported as incomplete.
    #[serde(default)]
    pub duration_ms: Option<u64>,
    /// Wall-clock mode only: drive this server instead of an embedded one.
    #[serde(default)]
    pub server: Option<String>,
    #[serde(default)]
    pub kernel: KernelConfig,
}

fn default_arrival() -> Arrival {
    Arrival::Burst
}

fn default_policy() -> Policy {
    Policy::Adaptive
}

fn default_clock() -> ClockMode {
    ClockMode::Virtual
}

/// A launch request at a point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Launch {
    pub at_us: u64,
    pub program: String,
    pub args: Vec<String>,
}

impl Scenario {
    /// `count` copies of `text_completion` arriving at once.
    pub fn saturated(count: usize, max_tokens: usize) -> Self {
        Scenario {
            name: format!("saturated-{count}"),
            mix: vec![MixEntry {
                program: "text_completion".into(),
                args: vec!["--prompt".into(), "request {i}: ".into(), "--max-tokens".into(), max_tokens.to_string()],
                count,
            }],
            arrival: Arrival::Burst,
            policy: Policy::Adaptive,
            clock: ClockMode::Virtual,
            duration_ms: None,
            server: None,
            kernel: KernelConfig::default(),
        }
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.mix.is_empty() || self.mix.iter().all(|m| m.count == 0) {
            return Err(ScenarioError::Invalid("the mix launches nothing".into()));
        }
        if let Arrival::Poisson { rate_per_sec, .. } = self.arrival {
            if !(rate_per_sec > 0.0 && rate_per_sec.is_finite()) {
                return Err(ScenarioError::Invalid("poisson rate must be positive".into()));
            }
        }
        if self.server.is_some() && self.clock == ClockMode::Virtual {
            return Err(ScenarioError::Invalid("an external server needs the wall clock".into()));
        }
        self.kernel.validate().map_err(ScenarioError::Invalid)
    }

    pub fn total(&self) -> usize {
        self.mix.iter().map(|m| m.count).sum()
    }

    /// The launch schedule, sorted by time. Mix entries are interleaved
    /// round-robin so populations overlap.
    pub fn schedule(&self) -> Vec<Launch> {
        let mut order = Vec::with_capacity(self.total());
        let mut left: Vec<usize> = self.mix.iter().map(|m| m.count).collect();
        while left.iter().any(|&n| n > 0) {
            for (e, n) in left.iter_mut().enumerate() {
                if *n > 0 {
                    *n -= 1;
                    order.push(e);
                }
            }
        }
        let mut rng = match self.arrival {
            Arrival::Poisson { seed, .. } => Some(SplitMix64::new(seed)),
            _ => None,
        };
        let mut t = 0u64;
        order
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                if i > 0 {
                    t += match &self.arrival {
                        Arrival::Burst => 0,
                        Arrival::Uniform { interval_us } => *interval_us,
                        Arrival::Poisson { rate_per_sec, .. } => {
                            let u = rng.as_mut().expect("poisson rng").next_f64();
                            (-(1.0 - u).ln() / rate_per_sec * 1e6).round() as u64
                        }
                    };
                }
                let entry = &self.mix[e];
                let args = entry.args.iter().map(|a| a.replace("{i}", &i.to_string())).collect();
                Launch { at_us: t, program: entry.program.clone(), args }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_interleaves_and_substitutes() {
        let s = Scenario::from_toml(
            r#"
            name = "mixed"
            arrival = { kind = "uniform", interval_us = 10 }
            [[mix]]
            program = "a"
            args = ["--prompt", "p{i}"]
            count = 2
            [[mix]]
            program = "b"
            count = 1
            "#,
        )
        .unwrap();
        let plan = s.schedule();
        let names: Vec<&str> = plan.iter().map(|l| l.program.as_str()).collect();
        assert_eq!(names, ["a", "b", "a"]);
        assert_eq!(plan.iter().map(|l| l.at_us).collect::<Vec<_>>(), [0, 10, 20]);
        assert_eq!(plan[2].args, ["--prompt", "p2"]);
    }

    #[test]
    fn poisson_is_seeded() {
        let mut s = Scenario::saturated(20, 4);
        s.arrival = Arrival::Poisson { rate_per_sec: 1000.0, seed: 7 };
        let a = s.schedule();
        assert_eq!(a, s.schedule());
        assert!(a.windows(2).all(|w| w[0].at_us <= w[1].at_us));
        assert!(a.last().unwrap().at_us > 0);
    }

    #[test]
    fn bad_scenarios_rejected() {
        assert!(Scenario::from_toml("name = \"x\"\nmix = []").is_err());
        assert!(Scenario::from_toml("name = \"x\"\nbogus = 1\n[[mix]]\nprogram = \"a\"\ncount = 1").is_err());
        let mut s = Scenario::saturated(1, 1);
        s.arrival = Arrival::Poisson { rate_per_sec: 0.0, seed: 1 };
        assert!(s.validate().is_err());
    }
}
