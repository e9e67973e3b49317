//! Records replay fixtures for `rfc2cpsa translate --mode replay` from canned
//! model responses, without any network access.
//!
//! ```text
//! cargo run -p rfc2cpsa --example make_replay_fixture -- \
//!     --query-file fixtures/replay/query.txt --exemplars fixtures/exemplars \
//!     --response fixtures/recorded/listing2.txt --store fixtures/replay/store
//! ```
//!
//! Every flag that shapes the request must match the later `translate` run.
//! Responses are served in order, one per round.

use std::cell::Cell;
use std::fs;
use std::path::PathBuf;

use clap::Parser;
use rfc2cpsa_core::gateway::{
    ChatClient, CompletionRequest, CompletionResult, FinishReason, GatewayError, RecordReplayClient, ReplayMode,
};
use rfc2cpsa_core::pipeline::{prepare, PrepareOptions, DEFAULT_MAX_ROUNDS, DEFAULT_MODEL};
use rfc2cpsa_core::postprocess::{feedback_loop, LoopConfig, ProcessConfig};
use rfc2cpsa_core::prompt::{GenerationParams, PromptConfig, Query, QueryLimits, DEFAULT_K};

#[derive(Debug, Parser)]
struct Args {
    #[arg(long)]
    query_file: PathBuf,
    #[arg(long)]
    exemplars: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: String,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    max_rounds: u32,
    /// Canned responses, one per round.
    #[arg(long, required = true)]
    response: Vec<PathBuf>,
    /// Mark the responses as cut off by the token limit.
    #[arg(long)]
    truncated: bool,
    #[arg(long)]
    store: PathBuf,
}

struct Canned {
    replies: Vec<String>,
    finish: FinishReason,
    next: Cell<usize>,
}

impl ChatClient for Canned {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let i = self.next.get();
        let content = self.replies.get(i).ok_or_else(|| GatewayError::FixtureMissing(req.hash()))?;
        self.next.set(i + 1);
        Ok(CompletionResult { content: content.clone(), finish_reason: self.finish, latency_ms: 0, retries: 0 })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let query = fs::read_to_string(&args.query_file)?;
    let prepared = prepare(&PrepareOptions {
        query: Query::freeform(query),
        limits: QueryLimits::default(),
        exemplars: args.exemplars.clone(),
        k: args.k,
        prompt: PromptConfig::default(),
    })?;
    let replies = args.response.iter().map(fs::read_to_string).collect::<Result<Vec<_>, _>>()?;
    let finish = if args.truncated { FinishReason::Length } else { FinishReason::Stop };
    let canned = Canned { replies, finish, next: Cell::new(0) };
    let recorder = RecordReplayClient::new(ReplayMode::Record, &args.store, Some(Box::new(canned)));
    let cfg = LoopConfig {
        model_id: args.model.clone(),
        max_rounds: args.max_rounds.min(args.response.len() as u32),
        params: GenerationParams::default(),
        process: ProcessConfig::default(),
    };
    let outcome = feedback_loop(&recorder, &prepared.bundle.messages(), &cfg)?;
    for r in &outcome.rounds {
        println!("round {}: {}.json", r.round, r.request_hash);
    }
    Ok(())
}
