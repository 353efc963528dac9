//! Command-line surface. Each subcommand runs one pipeline stage against a
//! TOML config, writes its artifacts into the output directory, and records
//! a manifest with the config hash, seed, input hashes, and wall time.
//!
//! Reproducibility contract: identical inputs, config, and seed produce
//! byte-identical artifacts. Timestamps live only in manifests. The config
//! hash excludes the output directory, so moving outputs elsewhere does not
//! change artifact identity. The toxicity API key comes only from the
//! environment, never from config files.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::annotate::{
    load_sidecar_acts, score_texts, tag_conversation, ConversationAnnotations, DiscourseRules,
    ScoreCache, ToxicityClientConfig, ToxicityError, ToxicityMode, ToxicityScorer,
};
use crate::corpus::{
    filter_topic, ingest_reader, label_conversations, read_conversations, read_labeled,
    Conversation, DumpSchema, LabelSummary, LabeledConversation, TopicSpec,
};
use crate::explain::{
    odds_ratios, top_bottom, write_curve_csv, write_odds_csv, EarlyCurve, OddsRatioReport,
    DEFAULT_TOP_K, EARLY_FRACTIONS,
};
use crate::featurize::{
    bundled_stopwords, export_labels_csv, export_sparse_csv, load_embeddings, load_stopwords,
    FeatureConfig, FeaturePipeline, Resources,
};
use crate::lexicon::{CategoryLexicon, SentimentLexicon};
use crate::model::{
    paired_significance, CvReport, MetricKind, Metrics, SignificanceResult, TrainedModel,
};
use crate::pipeline::{
    assemble_all, evaluate, evaluate_early, subreddit_ks, train_full, PipelineInputs,
    SubredditKsReport,
};
use crate::userfactors::{build_profiles, read_histories, Gazetteer, GenderLexicon, UserHistory};
use crate::{sha256_hex, Error};

/// Environment variable holding the toxicity service API key.
pub const API_KEY_ENV: &str = "CONTENTION_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config file {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("config field {field}: {reason}")]
    Field { field: String, reason: String },
    #[error("artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error("verify: {file} differs between runs with the same config and seed")]
    VerifyMismatch { file: String },
}

/// File paths a run reads and writes. Everything except the output
/// directory is optional at parse time; stages check what they need and
/// name the missing field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Raw conversation dump (JSONL) for `ingest`.
    pub dump: Option<PathBuf>,
    /// Where stages write artifacts and read upstream ones.
    pub output_dir: PathBuf,
    /// User history JSONL for gender/location/account-age profiles.
    pub histories: Option<PathBuf>,
    /// Hand-labeled discourse act overrides (TSV sidecar).
    pub acts_sidecar: Option<PathBuf>,
    /// Per-conversation embedding vectors (CSV sidecar).
    pub embeddings: Option<PathBuf>,
    /// Persistent toxicity score cache (TSV, append-only).
    pub toxicity_cache: Option<PathBuf>,
    /// Lexicon overrides; bundled data is used when absent.
    pub sentiment_lexicon: Option<PathBuf>,
    pub category_lexicon: Option<PathBuf>,
    pub gendered_nouns: Option<PathBuf>,
    pub gazetteer: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dump: None,
            output_dir: PathBuf::from("out"),
            histories: None,
            acts_sidecar: None,
            embeddings: None,
            toxicity_cache: None,
            sentiment_lexicon: None,
            category_lexicon: None,
            gendered_nouns: None,
            gazetteer: None,
            stopwords: None,
        }
    }
}

/// One run's complete configuration. CLI flags override individual fields
/// after loading; the API key never appears here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub k_folds: usize,
    /// L2 strength; omitted means 1/n at training time.
    pub lambda: Option<f64>,
    /// Dump schema id for `ingest`.
    pub schema: String,
    pub paths: PathsConfig,
    pub topic: Option<TopicSpec>,
    pub features: FeatureConfig,
    pub toxicity: ToxicityClientConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            k_folds: 10,
            lambda: None,
            schema: "conversations-v1".to_string(),
            paths: PathsConfig::default(),
            topic: None,
            features: FeatureConfig::default(),
            toxicity: ToxicityClientConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        // Deserialization skips derived topic state; recompile it.
        if let Some(topic) = config.topic.take() {
            config.topic = Some(topic.compiled(&path.display().to_string()).map_err(|e| {
                CliError::Field {
                    field: "topic".to_string(),
                    reason: e.to_string(),
                }
            })?);
        }
        Ok(config)
    }
}

/// Hash of the effective config with the output directory zeroed out, so
/// artifact identity does not depend on where artifacts land.
pub fn config_hash(config: &RunConfig) -> Result<String, Error> {
    let mut hashed = config.clone();
    hashed.paths.output_dir = PathBuf::new();
    let bytes = serde_json::to_vec(&hashed)?;
    Ok(sha256_hex(&bytes))
}

/// Per-stage run record. `wall_time` is the only nondeterministic field any
/// stage emits, and it lives here, not in artifacts.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
    pub input_hashes: BTreeMap<String, String>,
    pub output_files: Vec<String>,
    pub wall_time: f64,
}

#[derive(Parser, Debug)]
#[command(
    name = "contention",
    version,
    about = "Labels threaded conversations as contentious by vote ratio, \
             extracts interpretable features, and trains explainable models"
)]
pub struct Cli {
    /// TOML run config.
    #[arg(short, long, global = true, default_value = "contention.toml")]
    pub config: PathBuf,
    /// Override the run seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Re-run the stage and fail if any artifact byte differs.
    #[arg(long, global = true)]
    pub verify: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Read the raw dump into a normalized corpus plus a reject list,
    /// filtered to the configured topic when one is set.
    Ingest {
        /// Dump path; overrides paths.dump.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Dump schema id; overrides the config.
        #[arg(long)]
        schema: Option<String>,
    },
    /// Label the corpus by upvote-ratio quartile and write a threshold
    /// report.
    Label,
    /// Tag discourse acts and score toxicity. Remote scoring reads the API
    /// key from CONTENTION_API_KEY; offline mode needs no network.
    Annotate {
        /// Act override sidecar; overrides paths.acts_sidecar.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Export the assembled feature matrix as sparse CSV plus labels.
    Featurize {
        /// Comma-separated feature groups; overrides the config.
        #[arg(long)]
        groups: Option<String>,
        /// Comment prefix fraction in (0, 1]; overrides the config.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Train one model on the whole labeled corpus and write the model file.
    Train {
        #[arg(long)]
        groups: Option<String>,
        /// L2 strength; overrides the config.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Stratified cross-validation; optionally test significance against a
    /// baseline report.
    Evaluate {
        #[arg(long)]
        groups: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Path to a previous cv_report.json to compare against (paired
        /// t-test per metric; differences are this run minus the baseline).
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Evaluate trained folds against comment prefixes from 10% to 100%.
    EarlyCurve {
        #[arg(long)]
        groups: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Convert a trained model's coefficients into an odds-ratio report.
    Explain {
        /// Model file; defaults to model.json in the output directory.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Ranking list length.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Kolmogorov-Smirnov check of subreddit distributions across labels.
    Ks,
}

impl Command {
    fn stage_name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Label => "label",
            Command::Annotate { .. } => "annotate",
            Command::Featurize { .. } => "featurize",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::EarlyCurve { .. } => "early-curve",
            Command::Explain { .. } => "explain",
            Command::Ks => "ks",
        }
    }
}

/// Collects a stage's inputs and outputs before anything touches disk, so a
/// verify pass can re-run the stage and compare bytes.
struct StageContext {
    config_hash: String,
    seed: u64,
    inputs: BTreeMap<String, String>,
    files: Vec<(String, Vec<u8>)>,
}

impl StageContext {
    fn new(config_hash: &str, seed: u64) -> Self {
        StageContext {
            config_hash: config_hash.to_string(),
            seed,
            inputs: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    /// Records an input file's content hash for the manifest.
    fn record_input(&mut self, path: &Path) -> Result<(), Error> {
        let bytes = std::fs::read(path)?;
        self.inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn emit(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn emit_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Error> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.emit(name, bytes);
        Ok(())
    }

    fn emit_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<(), Error> {
        let mut bytes = Vec::new();
        for item in items {
            serde_json::to_writer(&mut bytes, item)?;
            bytes.push(b'\n');
        }
        self.emit(name, bytes);
        Ok(())
    }
}

/// Entry point for the binary: parse, dispatch, and translate errors into
/// exit codes (0 ok, 1 validation/data, 2 usage, 3 external service).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = err.exit_code();
            let _ = err.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Annotate(crate::annotate::AnnotateError::Toxicity(ToxicityError::Auth(_))) => 3,
        _ => 1,
    }
}

/// Runs one subcommand end to end, including manifest and verify pass.
pub fn execute(cli: &Cli) -> Result<(), Error> {
    let started = Instant::now();
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        config.paths.output_dir = dir.clone();
    }
    apply_command_overrides(&cli.command, &mut config)?;
    let hash = config_hash(&config)?;

    let mut ctx = StageContext::new(&hash, config.seed);
    dispatch(&cli.command, &config, &mut ctx)?;

    let output_dir = config.paths.output_dir.clone();
    std::fs::create_dir_all(&output_dir)?;
    for (name, bytes) in &ctx.files {
        std::fs::write(output_dir.join(name), bytes)?;
    }
    let stage = cli.command.stage_name();
    let manifest = Manifest {
        config_hash: hash.clone(),
        seed: config.seed,
        stage: stage.to_string(),
        input_hashes: ctx.inputs.clone(),
        output_files: ctx.files.iter().map(|(n, _)| n.clone()).collect(),
        wall_time: started.elapsed().as_secs_f64(),
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    std::fs::write(
        output_dir.join(format!("manifest_{stage}.json")),
        manifest_bytes,
    )?;

    if cli.verify {
        let mut second = StageContext::new(&hash, config.seed);
        dispatch(&cli.command, &config, &mut second)?;
        for ((name_a, bytes_a), (name_b, bytes_b)) in ctx.files.iter().zip(&second.files) {
            if name_a != name_b || bytes_a != bytes_b {
                return Err(CliError::VerifyMismatch {
                    file: name_a.clone(),
                }
                .into());
            }
        }
        if ctx.files.len() != second.files.len() {
            return Err(CliError::VerifyMismatch {
                file: "output file list".to_string(),
            }
            .into());
        }
    }
    Ok(())
}

fn parse_groups(raw: &str) -> BTreeSet<String> {
    raw.split(',')
        .map(|g| g.trim().to_string())
        .filter(|g| !g.is_empty())
        .collect()
}

fn apply_command_overrides(command: &Command, config: &mut RunConfig) -> Result<(), Error> {
    match command {
        Command::Ingest { dump, schema } => {
            if let Some(dump) = dump {
                config.paths.dump = Some(dump.clone());
            }
            if let Some(schema) = schema {
                config.schema = schema.clone();
            }
        }
        Command::Annotate { sidecar } => {
            if let Some(sidecar) = sidecar {
                config.paths.acts_sidecar = Some(sidecar.clone());
            }
        }
        Command::Featurize { groups, fraction } => {
            if let Some(groups) = groups {
                config.features.enabled_groups = parse_groups(groups);
            }
            if let Some(fraction) = fraction {
                config.features.prefix_fraction = *fraction;
            }
        }
        Command::Train { groups, lambda }
        | Command::Evaluate { groups, lambda, .. }
        | Command::EarlyCurve { groups, lambda } => {
            if let Some(groups) = groups {
                config.features.enabled_groups = parse_groups(groups);
            }
            if let Some(lambda) = lambda {
                config.lambda = Some(*lambda);
            }
        }
        Command::Label | Command::Explain { .. } | Command::Ks => {}
    }
    config.features.validate().map_err(Error::from)?;
    Ok(())
}

fn dispatch(command: &Command, config: &RunConfig, ctx: &mut StageContext) -> Result<(), Error> {
    match command {
        Command::Ingest { .. } => stage_ingest(config, ctx),
        Command::Label => stage_label(config, ctx),
        Command::Annotate { .. } => stage_annotate(config, ctx),
        Command::Featurize { .. } => stage_featurize(config, ctx),
        Command::Train { .. } => stage_train(config, ctx),
        Command::Evaluate { baseline, .. } => stage_evaluate(config, ctx, baseline.as_deref()),
        Command::EarlyCurve { .. } => stage_early_curve(config, ctx),
        Command::Explain { model, top_k } => {
            stage_explain(config, ctx, model.as_deref(), top_k.unwrap_or(DEFAULT_TOP_K))
        }
        Command::Ks => stage_ks(config, ctx),
    }
}

fn artifact_path(config: &RunConfig, name: &str) -> PathBuf {
    config.paths.output_dir.join(name)
}

fn require_artifact(config: &RunConfig, name: &str, produced_by: &str) -> Result<PathBuf, Error> {
    let path = artifact_path(config, name);
    if !path.exists() {
        return Err(CliError::Artifact {
            path: path.display().to_string(),
            reason: format!("not found; run `{produced_by}` first"),
        }
        .into());
    }
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestArtifact {
    config_hash: String,
    seed: u64,
    schema: String,
    accepted: usize,
    rejected: usize,
    topic: Option<String>,
    kept_after_topic: usize,
}

fn stage_ingest(config: &RunConfig, ctx: &mut StageContext) -> Result<(), Error> {
    let dump = config.paths.dump.clone().ok_or_else(|| CliError::Field {
        field: "paths.dump".to_string(),
        reason: "ingest needs a dump path (config or --dump)".to_string(),
    })?;
    let schema: DumpSchema = config.schema.parse().map_err(Error::Corpus)?;
    ctx.record_input(&dump)?;
    let file = std::fs::File::open(&dump).map_err(Error::Io)?;
    let report = ingest_reader(BufReader::new(file), schema, &dump.display().to_string())?;
    let accepted = report.conversations.len();

    let conversations = match &config.topic {
        Some(topic) => filter_topic(report.conversations, topic),
        None => report.conversations,
    };

    ctx.emit_jsonl("corpus.jsonl", &conversations)?;
    ctx.emit_jsonl("rejects.jsonl", &report.rejects)?;
    ctx.emit_json(
        "ingest_report.json",
        &IngestArtifact {
            config_hash: ctx.config_hash.clone(),
            seed: ctx.seed,
            schema: config.schema.clone(),
            accepted,
            rejected: report.rejects.len(),
            topic: config.topic.as_ref().map(|t| t.name.clone()),
            kept_after_topic: conversations.len(),
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelArtifact {
    config_hash: String,
    seed: u64,
    summary: LabelSummary,
}

fn stage_label(config: &RunConfig, ctx: &mut StageContext) -> Result<(), Error> {
    let corpus_path = require_artifact(config, "corpus.jsonl", "ingest")?;
    ctx.record_input(&corpus_path)?;
    let conversations = read_conversations(&corpus_path)?;
    let source = config
        .topic
        .as_ref()
        .map(|t| t.name.clone())
        .unwrap_or_else(|| "corpus".to_string());
    let outcome = label_conversations(conversations, &source)?;
    ctx.emit_jsonl("labeled.jsonl", &outcome.labeled)?;
    ctx.emit_json(
        "label_summary.json",
        &LabelArtifact {
            config_hash: ctx.config_hash.clone(),
            seed: ctx.seed,
            summary: outcome.summary,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotateArtifact {
    config_hash: String,
    seed: u64,
    mode: ToxicityMode,
    conversations: usize,
    /// Texts whose remote score failed after retries and fell back to the
    /// offline lexicon.
    fallback_texts: usize,
}

fn stage_annotate(config: &RunConfig, ctx: &mut StageContext) -> Result<(), Error> {
    let labeled_path = require_artifact(config, "labeled.jsonl", "label")?;
    ctx.record_input(&labeled_path)?;
    let labeled = read_labeled(&labeled_path)?;
    let conversations: Vec<Conversation> =
        labeled.into_iter().map(|l| l.conversation).collect();

    let rules = DiscourseRules::default();
    let acts = match &config.paths.acts_sidecar {
        Some(sidecar) => {
            ctx.record_input(sidecar)?;
            load_sidecar_acts(sidecar, &conversations, &rules)?
        }
        None => conversations
            .iter()
            .map(|c| (c.id.clone(), tag_conversation(c, &rules)))
            .collect(),
    };

    let mut toxicity_config = config.toxicity.clone();
    if toxicity_config.mode == ToxicityMode::Remote {
        toxicity_config.api_key = std::env::var(API_KEY_ENV).unwrap_or_default();
        if toxicity_config.api_key.is_empty() {
            return Err(CliError::Field {
                field: "toxicity.api_key".to_string(),
                reason: format!("remote mode needs {API_KEY_ENV} set in the environment"),
            }
            .into());
        }
    }
    let cache = match &config.paths.toxicity_cache {
        Some(path) => Some(ScoreCache::open(path).map_err(crate::annotate::AnnotateError::from)?),
        None => None,
    };
    let scorer = ToxicityScorer::new(
        toxicity_config,
        ToxicityScorer::bundled_lexicon(),
        cache,
    )
    .map_err(crate::annotate::AnnotateError::from)?;
    let scores =
        score_texts(&conversations, &scorer).map_err(crate::annotate::AnnotateError::from)?;

    let mut fallback_texts = 0usize;
    let annotations: Vec<ConversationAnnotations> = conversations
        .iter()
        .zip(scores)
        .map(|(conv, toxicity)| {
            fallback_texts += usize::from(toxicity.title_fallback)
                + usize::from(toxicity.selftext_fallback)
                + toxicity.comment_fallbacks.iter().filter(|f| **f).count();
            ConversationAnnotations {
                conversation_id: conv.id.clone(),
                acts: acts[&conv.id].clone(),
                toxicity,
            }
        })
        .collect();

    ctx.emit_jsonl("annotations.jsonl", &annotations)?;
    ctx.emit_json(
        "annotate_report.json",
        &AnnotateArtifact {
            config_hash: ctx.config_hash.clone(),
            seed: ctx.seed,
            mode: config.toxicity.mode,
            conversations: annotations.len(),
            fallback_texts,
        },
    )
}

fn read_annotations(
    path: &Path,
) -> Result<BTreeMap<String, ConversationAnnotations>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ConversationAnnotations =
            serde_json::from_str(line).map_err(|e| CliError::Artifact {
                path: path.display().to_string(),
                reason: format!("line {}: {e}", idx + 1),
            })?;
        map.insert(record.conversation_id.clone(), record);
    }
    Ok(map)
}

/// Loads everything downstream stages share: labeled corpus, annotations,
/// profiles, lexicons, stopwords, and optional embeddings.
fn load_inputs(config: &RunConfig, ctx: &mut StageContext) -> Result<PipelineInputs, Error> {
    let labeled_path = require_artifact(config, "labeled.jsonl", "label")?;
    let annotations_path = require_artifact(config, "annotations.jsonl", "annotate")?;
    ctx.record_input(&labeled_path)?;
    ctx.record_input(&annotations_path)?;
    let labeled = read_labeled(&labeled_path)?;
    let annotations = read_annotations(&annotations_path)?;

    let histories: Vec<UserHistory> = match &config.paths.histories {
        Some(path) => {
            ctx.record_input(path)?;
            read_histories(path)?
        }
        None => Vec::new(),
    };
    let nouns = match &config.paths.gendered_nouns {
        Some(path) => {
            ctx.record_input(path)?;
            GenderLexicon::load(path)?
        }
        None => GenderLexicon::bundled(),
    };
    let gazetteer = match &config.paths.gazetteer {
        Some(path) => {
            ctx.record_input(path)?;
            Gazetteer::load(path)?
        }
        None => Gazetteer::bundled(),
    };
    let sentiment = match &config.paths.sentiment_lexicon {
        Some(path) => {
            ctx.record_input(path)?;
            SentimentLexicon::load(path)?
        }
        None => SentimentLexicon::bundled(),
    };
    let categories = match &config.paths.category_lexicon {
        Some(path) => {
            ctx.record_input(path)?;
            CategoryLexicon::load(path)?
        }
        None => CategoryLexicon::bundled(),
    };
    let stopwords = match &config.paths.stopwords {
        Some(path) => {
            ctx.record_input(path)?;
            load_stopwords(path)?
        }
        None => bundled_stopwords(),
    };
    let embeddings = match &config.paths.embeddings {
        Some(path) => {
            ctx.record_input(path)?;
            load_embeddings(path)?
        }
        None => BTreeMap::new(),
    };

    let conversations: Vec<Conversation> = labeled
        .iter()
        .map(|l| l.conversation.clone())
        .collect();
    let profiles = build_profiles(&conversations, &histories, &nouns, &gazetteer);

    Ok(PipelineInputs::new(
        labeled,
        &annotations,
        profiles,
        &embeddings,
        stopwords,
        Resources {
            sentiment,
            categories,
        },
    )?)
}

#[derive(Debug, Serialize, Deserialize)]
struct FeaturizeArtifact {
    config_hash: String,
    seed: u64,
    conversations: usize,
    features: FeatureConfig,
    pipeline: FeaturePipeline,
}

fn stage_featurize(config: &RunConfig, ctx: &mut StageContext) -> Result<(), Error> {
    let inputs = load_inputs(config, ctx)?;
    let (state, vectors) =
        assemble_all(&inputs, &config.features, config.features.prefix_fraction)?;

    let mut features_csv = Vec::new();
    export_sparse_csv(&mut features_csv, &vectors)?;
    ctx.emit("features.csv", features_csv);

    let rows: Vec<(String, crate::corpus::Label)> = inputs
        .data
        .iter()
        .zip(&inputs.labels)
        .map(|(d, l)| (d.conversation.id.clone(), *l))
        .collect();
    let mut labels_csv = Vec::new();
    export_labels_csv(&mut labels_csv, &rows)?;
    ctx.emit("labels.csv", labels_csv);

    ctx.emit_json(
        "feature_pipeline.json",
        &FeaturizeArtifact {
            config_hash: ctx.config_hash.clone(),
            seed: ctx.seed,
            conversations: vectors.len(),
            features: config.features.clone(),
            pipeline: state,
        },
    )
}

/// The model file: the trained parameters plus the config hash that
/// produced them.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub config_hash: String,
    #[serde(flatten)]
    pub model: TrainedModel,
}

fn stage_train(config: &RunConfig, ctx: &mut StageContext) -> Result<(), Error> {
    let inputs = load_inputs(config, ctx)?;
    let (_state, model) = train_full(&inputs, &config.features, config.lambda, config.seed)?;
    ctx.emit_json(
        "model.json",
        &ModelArtifact {
            config_hash: ctx.config_hash.clone(),
            model,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CvArtifact {
    pub config_hash: String,
    #[serde(flatten)]
    pub report: CvReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct SignificanceArtifact {
    config_hash: String,
    seed: u64,
    baseline_groups: Vec<String>,
    candidate_groups: Vec<String>,
    /// Per-metric paired t-tests; differences are candidate minus baseline.
    results: Vec<SignificanceResult>,
}

fn cv_csv(report: &CvReport) -> Vec<u8> {
    let mut out = String::from("fold,accuracy,precision,recall,f1\n");
    let row = |name: &str, m: &Metrics| {
        format!("{name},{},{},{},{}\n", m.accuracy, m.precision, m.recall, m.f1)
    };
    for (i, fold) in report.folds.iter().enumerate() {
        out.push_str(&row(&i.to_string(), fold));
    }
    out.push_str(&row("mean", &report.mean));
    out.into_bytes()
}

fn stage_evaluate(
    config: &RunConfig,
    ctx: &mut StageContext,
    baseline: Option<&Path>,
) -> Result<(), Error> {
    let inputs = load_inputs(config, ctx)?;
    let report = evaluate(
        &inputs,
        &config.features,
        config.k_folds,
        config.lambda,
        config.seed,
    )?;
    ctx.emit_json(
        "cv_report.json",
        &CvArtifact {
            config_hash: ctx.config_hash.clone(),
            report: report.clone(),
        },
    )?;
    ctx.emit("cv_report.csv", cv_csv(&report));

    if let Some(baseline_path) = baseline {
        ctx.record_input(baseline_path)?;
        let text = std::fs::read_to_string(baseline_path)?;
        let baseline_artifact: CvArtifact =
            serde_json::from_str(&text).map_err(|e| CliError::Artifact {
                path: baseline_path.display().to_string(),
                reason: e.to_string(),
            })?;
        let results = [
            MetricKind::Accuracy,
            MetricKind::Precision,
            MetricKind::Recall,
            MetricKind::F1,
        ]
        .into_iter()
        .map(|kind| paired_significance(&baseline_artifact.report, &report, kind))
        .collect::<Result<Vec<_>, _>>()?;
        ctx.emit_json(
            "significance.json",
            &SignificanceArtifact {
                config_hash: ctx.config_hash.clone(),
                seed: ctx.seed,
                baseline_groups: baseline_artifact.report.groups.clone(),
                candidate_groups: report.groups.clone(),
                results,
            },
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveArtifact {
    config_hash: String,
    #[serde(flatten)]
    curve: EarlyCurve,
}

fn stage_early_curve(config: &RunConfig, ctx: &mut StageContext) -> Result<(), Error> {
    let inputs = load_inputs(config, ctx)?;
    let curve = evaluate_early(
        &inputs,
        &config.features,
        config.k_folds,
        config.lambda,
        config.seed,
        &EARLY_FRACTIONS,
    )?;
    let mut csv = Vec::new();
    write_curve_csv(&mut csv, &curve)?;
    ctx.emit("early_curve.csv", csv);
    ctx.emit_json(
        "early_curve.json",
        &CurveArtifact {
            config_hash: ctx.config_hash.clone(),
            curve,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct OddsArtifact {
    config_hash: String,
    seed: u64,
    /// Hash recorded in the model file this report explains.
    model_config_hash: String,
    report: OddsRatioReport,
}

fn stage_explain(
    config: &RunConfig,
    ctx: &mut StageContext,
    model_path: Option<&Path>,
    top_k: usize,
) -> Result<(), Error> {
    let model_path = match model_path {
        Some(path) => path.to_path_buf(),
        None => require_artifact(config, "model.json", "train")?,
    };
    ctx.record_input(&model_path)?;
    let text = std::fs::read_to_string(&model_path)?;
    let artifact: ModelArtifact = serde_json::from_str(&text).map_err(|e| CliError::Artifact {
        path: model_path.display().to_string(),
        reason: e.to_string(),
    })?;

    let mut report = odds_ratios(&artifact.model);
    if top_k != DEFAULT_TOP_K {
        let ranks = top_bottom(&report, top_k);
        report.top = ranks.top;
        report.bottom = ranks.bottom;
        report.truncated = ranks.truncated;
        report.k = top_k;
    }

    let mut csv = Vec::new();
    write_odds_csv(&mut csv, &report)?;
    ctx.emit("odds_ratios.csv", csv);
    ctx.emit_json(
        "odds_ratios.json",
        &OddsArtifact {
            config_hash: ctx.config_hash.clone(),
            seed: ctx.seed,
            model_config_hash: artifact.config_hash,
            report,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct KsArtifact {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    report: SubredditKsReport,
}

fn stage_ks(config: &RunConfig, ctx: &mut StageContext) -> Result<(), Error> {
    let labeled_path = require_artifact(config, "labeled.jsonl", "label")?;
    ctx.record_input(&labeled_path)?;
    let labeled: Vec<LabeledConversation> = read_labeled(&labeled_path)?;
    let report = subreddit_ks(&labeled)?;
    ctx.emit_json(
        "ks_report.json",
        &KsArtifact {
            config_hash: ctx.config_hash.clone(),
            seed: ctx.seed,
            report,
        },
    )
}
