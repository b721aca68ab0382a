use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Parser, Subcommand};

use inferlet_core::bench::{self, Scenario};
use inferlet_core::control::Policy;
use inferlet_core::runtime::{InstanceStatus, Kernel, KernelConfig};
use inferlet_core::service::{self, Client, ServerConfig, DEFAULT_LISTEN};

#[derive(Parser)]
#[command(name = "inferlet", version, about = "Serve and run inferlets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the server.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        policy: Option<Policy>,
        /// Run the backend in a child process.
        #[arg(long)]
        split_backend: bool,
    },
    /// Launch a program and stream its output. PROGRAM is a built-in name, a
    /// program hash, or a path to a module to upload first.
    Run {
        #[arg(long, env = "INFERLET_SERVER", default_value = DEFAULT_LISTEN)]
        server: String,
        /// Run on an embedded kernel instead of connecting to a server.
        #[arg(long)]
        local: bool,
        program: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// List models and instances.
    Ls {
        #[arg(long, env = "INFERLET_SERVER", default_value = DEFAULT_LISTEN)]
        server: String,
    },
    /// Terminate an instance.
    Kill {
        #[arg(long, env = "INFERLET_SERVER", default_value = DEFAULT_LISTEN)]
        server: String,
        id: u64,
    },
    /// Replay a load scenario and report throughput and latency.
    Bench {
        /// Scenario file (TOML). Without one, a saturated text-completion
        /// population is used.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        max_tokens: usize,
        #[arg(long)]
        policy: Option<Policy>,
        /// Run every policy (Eager, K and T sweeps, Adaptive).
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print the full reports as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Serve the backend protocol over stdin/stdout.
    #[command(hide = true)]
    Backend,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Serve { config, listen, policy, split_backend } => {
            let mut cfg = match config {
                Some(p) => ServerConfig::load(&p)?,
                None => ServerConfig::default(),
            };
            if let Some(l) = listen {
                cfg.listen = l;
            }
            if let Some(p) = policy {
                cfg.kernel.policy = p;
            }
            cfg.split_backend |= split_backend;
            let handle = service::start(cfg).context("starting server")?;
            eprintln!("listening on {}", handle.addr());
            handle.wait();
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { server, local, program, args } => {
            let status = if local { run_local(&program, args)? } else { run_remote(&server, &program, args)? };
            Ok(exit_for(&status))
        }
        Command::Ls { server } => {
            let mut c = Client::connect(&server).with_context(|| format!("connecting to {server}"))?;
            println!("MODEL                TRAITS");
            for m in c.models()? {
                let traits: Vec<String> = m.traits.iter().map(|t| format!("{t:?}")).collect();
                println!("{:<20} {}", m.name, traits.join(","));
            }
            println!();
            println!("ID     STATUS      PROGRAM");
            for i in c.instances()? {
                println!("{:<6} {:<11} {}", i.id, i.status.label(), i.program);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Kill { server, id } => {
            let mut c = Client::connect(&server).with_context(|| format!("connecting to {server}"))?;
            let (was_running, status) = c.terminate(id)?;
            if was_running {
                println!("terminated instance {id}");
            } else {
                println!("instance {id} already {}; nothing to do", status.label());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { scenario, count, max_tokens, policy, sweep, csv, json } => {
            let mut s = match scenario {
                Some(p) => Scenario::load(&p)?,
                None => Scenario::saturated(count, max_tokens),
            };
            if let Some(p) = policy {
                s.policy = p;
            }
            let reports = if sweep {
                let sw = bench::policy_sweep(&s)?;
                for r in sw.all() {
                    println!("{}", r.summary());
                }
                println!("best K: {}   best T: {}", sw.k_best().policy, sw.t_best().policy);
                sw.all()
            } else {
                let r = bench::run_scenario(&s)?;
                println!("{}", r.summary());
                vec![r]
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            }
            if let Some(path) = csv {
                std::fs::write(&path, bench::to_csv(&reports)).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Backend => {
            inferlet_core::backends::process::serve_backend(std::io::stdin().lock(), std::io::stdout().lock())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_for(status: &InstanceStatus) -> ExitCode {
    match status {
        InstanceStatus::Finished(_) => ExitCode::SUCCESS,
        other => {
            eprintln!("instance {}: {other:?}", other.label());
            ExitCode::from(1)
        }
    }
}

fn program_bytes(program: &str) -> anyhow::Result<Option<Vec<u8>>> {
    let path = std::path::Path::new(program);
    if path.is_file() {
        return Ok(Some(std::fs::read(path).with_context(|| format!("reading {program}"))?));
    }
    Ok(None)
}

fn run_remote(server: &str, program: &str, args: Vec<String>) -> anyhow::Result<InstanceStatus> {
    let mut c = Client::connect(server).with_context(|| format!("connecting to {server}"))?;
    let reference = match program_bytes(program)? {
        Some(bytes) => c.upload(&bytes)?.0,
        None => program.to_string(),
    };
    let info = c.launch(&reference, &args)?;
    let mut out = std::io::stdout().lock();
    let status = c.wait_exit(info.instance, |m| {
        let _ = out.write_all(m);
        let _ = out.flush();
    })?;
    writeln!(out)?;
    Ok(status)
}

fn run_local(program: &str, args: Vec<String>) -> anyhow::Result<InstanceStatus> {
    let mut k = Kernel::new(KernelConfig::default())?;
    let reference = match program_bytes(program)? {
        Some(bytes) => k.upload_program(&bytes),
        None => program.to_string(),
    };
    if !k.has_program(&reference) {
        bail!("unknown program `{program}`");
    }
    let info = k.launch(&reference, args)?;
    k.run_until_idle();
    let r = k.collect(info.instance);
    let mut out = std::io::stdout().lock();
    for m in &r.messages {
        out.write_all(m)?;
    }
    writeln!(out)?;
    if r.status.is_running() {
        k.terminate(info.instance, "blocked");
        bail!("instance {} is blocked waiting for input", info.instance);
    }
    Ok(r.status)
}
