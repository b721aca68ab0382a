//! Support library for inferlets plus the built-in example programs.
//!
//! [`Context`] hides page and embed management behind `fill` and
//! `generate_until`; [`Sampler`] covers greedy and top-k sampling. The
//! builtins registered by [`register_builtins`] parse their arguments in
//! `--flag value` form and report a JSON summary as their exit value.

mod beam;
mod context;
mod sampler;
mod speculative;

use clap::Parser;
use serde_json::json;

use crate::backends::Trait;
use crate::error::{ApiError, InferletError};
use crate::runtime::{Host, Kernel};

pub use beam::{beam_search, rank, Beam};
pub use context::{Context, Generated, Stop, Window};
pub use sampler::{sample, Sampler};
pub use speculative::{lookup_draft, speculative_generate, SpecStats};

/// Sentinel the agent treats as "call the tool now".
pub const ACTION_MARKER: &[u8] = b"\n>>act ";

/// Text appended before each tool observation.
pub const OBSERVATION_PREFIX: &str = "\nobservation: ";

fn parse<T: Parser>(host: &Host) -> Result<T, InferletError> {
    T::try_parse_from(host.get_arg()).map_err(|e| InferletError::Message(e.to_string()))
}

/// Text-in, text-out builtins need these on their model.
const TEXT_TRAITS: [Trait; 2] = [Trait::Tokenize, Trait::OutputText];

/// Resolves the model (first available by default) and checks it offers
/// what the builtin needs. A missing trait is reported to the client before
/// the instance fails, so the caller learns why.
fn model_or_default(host: &Host, model: Option<String>) -> Result<String, InferletError> {
    let name = match model {
        Some(m) => m,
        None => host
            .available_models()
            .first()
            .map(|m| m.name.clone())
            .ok_or_else(|| ApiError::UnknownModel(String::new()))?,
    };
    let traits = host.available_traits(&name)?;
    if let Some(&missing) = TEXT_TRAITS.iter().find(|t| !traits.contains(t)) {
        host.send(format!("model `{name}` does not implement {missing:?}; this program needs text input and output\n"))?;
        return Err(ApiError::MissingTrait(missing).into());
    }
    Ok(name)
}

#[derive(Parser, Debug)]
#[command(name = "text_completion", no_binary_name = true)]
struct CompletionArgs {
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    #[arg(long)]
    model: Option<String>,
    /// Sample from the top k entries instead of decoding greedily.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep going past EOS.
    #[arg(long)]
    ignore_eos: bool,
}

impl CompletionArgs {
    fn sampler(&self) -> Result<Sampler, InferletError> {
        match self.top_k {
            Some(k) => Ok(Sampler::top_k(k, self.temperature, self.seed)?),
            None => Ok(Sampler::greedy()),
        }
    }

    fn stop(&self) -> Stop {
        Stop { max_tokens: self.max_tokens, eos: !self.ignore_eos, stop_string: None }
    }
}

async fn text_completion(host: Host) -> Result<String, InferletError> {
    let args: CompletionArgs = parse(&host)?;
    let model = model_or_default(&host, args.model.clone())?;
    let mut ctx = Context::new(&host, &model)?.streaming(true);
    ctx.fill(&args.prompt).await?;
    let out = ctx.generate_until(&args.stop(), &mut args.sampler()?).await?;
    Ok(json!({ "generated_tokens": out.tokens.len() }).to_string())
}

#[derive(Parser, Debug)]
#[command(name = "prefix_cache_writer", no_binary_name = true)]
struct WriterArgs {
    #[arg(long)]
    prefix: String,
    #[arg(long)]
    name: String,
    #[arg(long)]
    model: Option<String>,
}

/// Prefills BOS plus all but the last prefix token and exports the pages.
/// The reader forwards the last prefix token itself so it gets an output
/// state to decode from.
async fn prefix_cache_writer(host: Host) -> Result<String, InferletError> {
    let args: WriterArgs = parse(&host)?;
    let model = model_or_default(&host, args.model)?;
    let mut ctx = Context::new(&host, &model)?;
    let ids = host.tokenize(ctx.queue(), &args.prefix).await?;
    if ids.is_empty() {
        return Err(InferletError::Message("prefix must not be empty".into()));
    }
    ctx.fill_tokens(&ids[..ids.len() - 1])?;
    host.synchronize(ctx.queue()).await?;
    let pages = ctx.kv_pages();
    host.export_kvpage(&pages, &args.name)?;
    Ok(json!({ "pages": pages.len(), "cached_tokens": ctx.kv_len() }).to_string())
}

#[derive(Parser, Debug)]
#[command(name = "prefix_cache_reader", no_binary_name = true)]
struct ReaderArgs {
    #[arg(long)]
    name: String,
    /// The prefix the writer cached.
    #[arg(long)]
    prefix: String,
    /// Text following the prefix.
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    ignore_eos: bool,
}

async fn prefix_cache_reader(host: Host) -> Result<String, InferletError> {
    let args: ReaderArgs = parse(&host)?;
    let model = model_or_default(&host, args.model)?;
    let q = host.create_queue(&model)?;
    let prefix = host.tokenize(q, &args.prefix).await?;
    let suffix = host.tokenize(q, &args.prompt).await?;
    let (last, cached) = prefix.split_last().ok_or_else(|| InferletError::Message("prefix must not be empty".into()))?;
    let pages = host.import_kvpage(&args.name)?;
    let tokens: Vec<u32> = std::iter::once(crate::backends::BOS).chain(cached.iter().copied()).collect();
    let mut ctx = Context::from_imported(&host, &model, pages, tokens)?.streaming(true);
    let fresh: Vec<u32> = std::iter::once(*last).chain(suffix).collect();
    ctx.fill_tokens(&fresh)?;
    let stop = Stop { max_tokens: args.max_tokens, eos: !args.ignore_eos, stop_string: None };
    let out = ctx.generate_until(&stop, &mut Sampler::greedy()).await?;
    Ok(json!({ "generated_tokens": out.tokens.len(), "first_forward_tokens": fresh.len() }).to_string())
}

#[derive(Parser, Debug)]
#[command(name = "beam_search", no_binary_name = true)]
struct BeamArgs {
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 2)]
    beams: usize,
    #[arg(long, default_value_t = 3)]
    length: usize,
    /// Candidates taken from each hypothesis per step.
    #[arg(long, default_value_t = 8)]
    expand: usize,
    /// Rank final hypotheses by mean instead of total log-probability.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    model: Option<String>,
}

async fn beam_search_builtin(host: Host) -> Result<String, InferletError> {
    let args: BeamArgs = parse(&host)?;
    let model = model_or_default(&host, args.model)?;
    let mut ctx = Context::new(&host, &model)?;
    ctx.fill(&args.prompt).await?;
    let best = beam_search(ctx, args.beams, args.length, args.expand, args.normalize).await?;
    let q = host.create_queue(&model)?;
    host.send(host.detokenize(q, &best.tokens).await?)?;
    Ok(json!({ "tokens": best.tokens, "score": best.score }).to_string())
}

#[derive(Parser, Debug)]
#[command(name = "speculative_prompt_lookup", no_binary_name = true)]
struct SpecArgs {
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    #[arg(long, default_value_t = 2)]
    ngram: usize,
    #[arg(long, default_value_t = 4)]
    draft: usize,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    ignore_eos: bool,
}

async fn speculative_prompt_lookup(host: Host) -> Result<String, InferletError> {
    let args: SpecArgs = parse(&host)?;
    let model = model_or_default(&host, args.model)?;
    let mut ctx = Context::new(&host, &model)?.streaming(true);
    ctx.fill(&args.prompt).await?;
    let stop = Stop { max_tokens: args.max_tokens, eos: !args.ignore_eos, stop_string: None };
    let (out, stats) = speculative_generate(&mut ctx, &stop, args.ngram, args.draft).await?;
    Ok(json!({
        "generated_tokens": out.tokens.len(),
        "verifications": stats.verifications,
        "drafted": stats.drafted,
        "accepted": stats.accepted,
    })
    .to_string())
}

#[derive(Parser, Debug)]
#[command(name = "attention_sink", no_binary_name = true)]
struct WindowArgs {
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    #[arg(long, default_value_t = 4)]
    sink: u32,
    #[arg(long, default_value_t = 8)]
    window: u32,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    ignore_eos: bool,
}

async fn windowed(host: Host, args: WindowArgs) -> Result<String, InferletError> {
    if args.window == 0 {
        return Err(InferletError::Message("window must be positive".into()));
    }
    let model = model_or_default(&host, args.model)?;
    let window = Window { sink: args.sink, size: args.window };
    let mut ctx = Context::new(&host, &model)?.streaming(true).with_window(window);
    ctx.fill(&args.prompt).await?;
    let stop = Stop { max_tokens: args.max_tokens, eos: !args.ignore_eos, stop_string: None };
    let out = ctx.generate_until(&stop, &mut Sampler::greedy()).await?;
    Ok(json!({ "generated_tokens": out.tokens.len() }).to_string())
}

async fn attention_sink(host: Host) -> Result<String, InferletError> {
    let args: WindowArgs = parse(&host)?;
    windowed(host, args).await
}

#[derive(Parser, Debug)]
#[command(name = "windowed_attention", no_binary_name = true)]
struct PlainWindowArgs {
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_tokens: usize,
    #[arg(long, default_value_t = 8)]
    window: u32,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    ignore_eos: bool,
}

async fn windowed_attention(host: Host) -> Result<String, InferletError> {
    let a: PlainWindowArgs = parse(&host)?;
    let args = WindowArgs {
        prompt: a.prompt,
        max_tokens: a.max_tokens,
        sink: 0,
        window: a.window,
        model: a.model,
        ignore_eos: a.ignore_eos,
    };
    windowed(host, args).await
}

#[derive(Parser, Debug)]
#[command(name = "agent_http", no_binary_name = true)]
struct AgentArgs {
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long)]
    tool_url: String,
    /// Tool interactions before the final answer.
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Most tokens generated between tool calls.
    #[arg(long, default_value_t = 8)]
    think_tokens: usize,
    #[arg(long)]
    model: Option<String>,
}

/// Think, act, observe. The KV cache is kept across tool calls, so every
/// token is forwarded exactly once. The fixed observation header is
/// prefilled while the request is in flight.
async fn agent_http(host: Host) -> Result<String, InferletError> {
    let args: AgentArgs = parse(&host)?;
    let model = model_or_default(&host, args.model)?;
    let mut ctx = Context::new(&host, &model)?.streaming(true);
    ctx.fill(&args.prompt).await?;
    let think = Stop { max_tokens: args.think_tokens, eos: false, stop_string: Some(ACTION_MARKER.to_vec()) };
    let header = host.tokenize(ctx.queue(), OBSERVATION_PREFIX).await?;
    let mut generated = 0;
    let mut observed = 0;
    for _ in 0..args.steps {
        generated += ctx.generate_until(&think, &mut Sampler::greedy()).await?.tokens.len();
        let response = host.http_get(&args.tool_url);
        ctx.fill_tokens(&header)?;
        let body = response.await?.body;
        let mut obs = host.tokenize_bytes(ctx.queue(), &body).await?;
        obs.push(u32::from(b'\n'));
        ctx.fill_tokens(&obs)?;
        observed += header.len() + obs.len();
    }
    generated += ctx.generate_until(&think, &mut Sampler::greedy()).await?.tokens.len();
    Ok(json!({ "interactions": args.steps, "generated_tokens": generated, "observation_tokens": observed }).to_string())
}

/// Echoes client messages until the client goes away.
async fn echo(host: Host) -> Result<String, InferletError> {
    let mut n = 0;
    loop {
        match host.receive().await {
            Ok(m) => {
                host.send(m)?;
                n += 1;
            }
            Err(ApiError::ClientGone) => return Ok(json!({ "echoed": n }).to_string()),
            Err(e) => return Err(e.into()),
        }
    }
}

/// Registers every example inferlet under its name.
pub fn register_builtins(k: &mut Kernel) {
    k.register_builtin("text_completion", text_completion);
    k.register_builtin("prefix_cache_writer", prefix_cache_writer);
    k.register_builtin("prefix_cache_reader", prefix_cache_reader);
    k.register_builtin("beam_search", beam_search_builtin);
    k.register_builtin("speculative_prompt_lookup", speculative_prompt_lookup);
    k.register_builtin("attention_sink", attention_sink);
    k.register_builtin("windowed_attention", windowed_attention);
    k.register_builtin("agent_http", agent_http);
    k.register_builtin("echo", echo);
}
