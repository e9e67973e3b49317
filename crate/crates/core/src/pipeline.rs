//! Prompt preparation shared by the command line and fixture recording, so
//! both build byte-identical requests.

use std::fs;
use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::{exemplars_from_records, from_jsonl};
use crate::prompt::{
    assemble, load_exemplar_store, preprocess, select_exemplars, AssembleError, Exemplar, PromptBundle, PromptConfig,
    Query, QueryLimits, Rejection, SelectError, StoreError,
};

pub const DEFAULT_MODEL: &str = "codellama-34b-instruct";
pub const DEFAULT_MAX_ROUNDS: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    pub query: Query,
    pub limits: QueryLimits,
    /// Directory of `.scm` (+ `.txt`) exemplars, or a `.jsonl` dataset whose
    /// pair records serve as exemplars.
    pub exemplars: Option<PathBuf>,
    pub k: usize,
    pub prompt: PromptConfig,
}

#[derive(Debug, Error)]
pub enum PrepareError {
    #[error("query rejected: {0}")]
    Rejected(#[from] Rejection),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot load exemplar dataset: {0}")]
    Dataset(String),
    #[error("exemplar selection failed: {0}")]
    Select(#[from] SelectError),
    #[error(transparent)]
    Assemble(#[from] AssembleError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub query: Query,
    pub exemplar_ids: Vec<String>,
    pub bundle: PromptBundle,
}

fn load_exemplars(path: &PathBuf) -> Result<Vec<Exemplar>, PrepareError> {
    if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let text = fs::read_to_string(path).map_err(|e| PrepareError::Dataset(format!("{}: {e}", path.display())))?;
        let records = from_jsonl(&text).map_err(|e| PrepareError::Dataset(e.to_string()))?;
        return Ok(exemplars_from_records(&records));
    }
    Ok(load_exemplar_store(path)?)
}

/// Gates the query, picks exemplars and renders the prompt.
pub fn prepare(opts: &PrepareOptions) -> Result<Prepared, PrepareError> {
    let query = preprocess(&opts.query, &opts.limits)?;
    let chosen = match &opts.exemplars {
        Some(path) => select_exemplars(&load_exemplars(path)?, &query, opts.k)?,
        None => Vec::new(),
    };
    let bundle = assemble(&query, &chosen, &opts.prompt)?;
    let exemplar_ids = bundle.exemplar_blocks.iter().map(|e| e.id.clone()).collect();
    Ok(Prepared { query, exemplar_ids, bundle })
}
