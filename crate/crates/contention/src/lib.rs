//! Predicts whether a threaded conversation will turn contentious, and explains why.
//!
//! The pipeline runs in stages: ingest a conversation dump, label each
//! conversation by its upvote-ratio quartile, annotate texts with discourse
//! acts and toxicity scores, extract interpretable features, train an
//! L2-regularized logistic regression, and report odds ratios per feature.
//! Every stage is deterministic for a fixed seed and config.

pub mod annotate;
pub mod cli;
pub mod corpus;
pub mod explain;
pub mod featurize;
pub mod lexicon;
pub mod model;
pub mod pipeline;
pub mod userfactors;

#[cfg(doctest)]
mod book;

use sha2::{Digest, Sha256};

/// Any error the pipeline can produce. Stage-specific enums carry the detail.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Lexicon(#[from] lexicon::LexiconError),
    #[error(transparent)]
    Annotate(#[from] annotate::AnnotateError),
    #[error(transparent)]
    UserFactors(#[from] userfactors::UserFactorsError),
    #[error(transparent)]
    Featurize(#[from] featurize::FeaturizeError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Explain(#[from] explain::ExplainError),
    #[error(transparent)]
    Cli(#[from] cli::CliError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Derives the seed for one pipeline stage from the run seed.
///
/// Stages must not share raw RNG streams, so each gets the first eight bytes
/// of `sha256(seed_le || stage)`. Stable across platforms and releases.
pub fn stage_seed(run_seed: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Hex-encoded sha256 of arbitrary bytes. Used for content hashes in run
/// manifests and for toxicity cache keys.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}
