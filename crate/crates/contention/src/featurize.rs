//! Feature assembly: tf-idf text vectors, sentiment aggregates, word-category
//! counts, act n-grams, toxicity, user aggregates, subreddit one-hot, and an
//! optional external embedding block.
//!
//! Everything that fits on data (tf-idf vocabulary, subreddit dictionary,
//! location cap) fits on training folds only. Assembled names carry their
//! group prefix (`toxicity/max_comment_toxicity`), which makes cross-group
//! collisions impossible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::{act_ngrams, toxicity_features, ActSequence, ToxicityAnnotation};
use crate::corpus::{Conversation, Label};
use crate::lexicon::{
    category_count_map, sentiment_score, tokenize, CategoryLexicon, SentimentLexicon,
};
use crate::userfactors::{aggregate_conversation_users, UserProfile};

#[derive(Debug, thiserror::Error)]
pub enum FeaturizeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Format {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("feature config error: {0}")]
    Config(String),
    #[error("cannot fit tf-idf on an empty corpus")]
    EmptyCorpus,
    #[error("feature {0:?} is not finite")]
    NonFinite(String),
    #[error("embedding group enabled but conversation {0:?} has no sidecar vector")]
    MissingEmbedding(String),
}

/// Every feature group, in canonical order.
pub const GROUPS: [&str; 10] = [
    "tfidf",
    "discourse",
    "gender",
    "liwc",
    "location",
    "prolific",
    "sentiment",
    "toxicity",
    "subreddit",
    "embedding",
];

/// The groups enabled when a config names none: everything the pipeline can
/// compute itself. Embeddings only enter via sidecar.
pub fn default_groups() -> BTreeSet<String> {
    GROUPS
        .iter()
        .filter(|g| **g != "embedding")
        .map(|g| g.to_string())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub enabled_groups: BTreeSet<String>,
    /// Comment prefix kept when assembling, in (0, 1].
    pub prefix_fraction: f64,
    pub max_df: f64,
    /// Location vocabulary cap; less frequent locations bucket into
    /// `location/other`.
    pub location_top_k: usize,
    pub standardize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            enabled_groups: default_groups(),
            prefix_fraction: 1.0,
            max_df: 0.95,
            location_top_k: 200,
            standardize: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeaturizeError> {
        for group in &self.enabled_groups {
            if !GROUPS.contains(&group.as_str()) {
                return Err(FeaturizeError::Config(format!(
                    "unknown feature group {group:?} (known: {})",
                    GROUPS.join(", ")
                )));
            }
        }
        if self.enabled_groups.is_empty() {
            return Err(FeaturizeError::Config("no feature groups enabled".to_string()));
        }
        if !(self.prefix_fraction > 0.0 && self.prefix_fraction <= 1.0) {
            return Err(FeaturizeError::Config(format!(
                "prefix_fraction must be in (0, 1], got {}",
                self.prefix_fraction
            )));
        }
        if !(self.max_df > 0.0 && self.max_df <= 1.0) {
            return Err(FeaturizeError::Config(format!(
                "max_df must be in (0, 1], got {}",
                self.max_df
            )));
        }
        Ok(())
    }

    pub fn enabled(&self, group: &str) -> bool {
        self.enabled_groups.contains(group)
    }
}

/// Fitted tf-idf vocabulary. Terms are sorted lexicographically, stopwords
/// excluded, and terms whose document frequency exceeds max_df pruned.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabularyData")]
pub struct TfidfVocabulary {
    pub terms: Vec<String>,
    pub doc_freq: Vec<u32>,
    pub n_docs: u32,
    pub max_df: f64,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

/// Deserialization shadow for [`TfidfVocabulary`]; the lookup index is
/// derived state and gets rebuilt on load.
#[derive(Deserialize)]
struct VocabularyData {
    terms: Vec<String>,
    doc_freq: Vec<u32>,
    n_docs: u32,
    max_df: f64,
}

impl From<VocabularyData> for TfidfVocabulary {
    fn from(data: VocabularyData) -> Self {
        let mut vocab = TfidfVocabulary {
            terms: data.terms,
            doc_freq: data.doc_freq,
            n_docs: data.n_docs,
            max_df: data.max_df,
            index: HashMap::new(),
        };
        vocab.build_index();
        vocab
    }
}

impl TfidfVocabulary {
    fn build_index(&mut self) {
        self.index = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn term_index(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    /// Smooth inverse document frequency: ln((1+N)/(1+df)) + 1. Always > 0.
    pub fn idf(&self, term_idx: usize) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.doc_freq[term_idx] as f64)).ln() + 1.0
    }
}

pub fn tfidf_fit(
    docs: &[Vec<String>],
    max_df: f64,
    stopwords: &BTreeSet<String>,
) -> Result<TfidfVocabulary, FeaturizeError> {
    if docs.is_empty() {
        return Err(FeaturizeError::EmptyCorpus);
    }
    let mut doc_freq: BTreeMap<&str, u32> = BTreeMap::new();
    for doc in docs {
        let distinct: BTreeSet<&str> = doc.iter().map(String::as_str).collect();
        for token in distinct {
            *doc_freq.entry(token).or_default() += 1;
        }
    }
    let n_docs = docs.len() as u32;
    let mut terms = Vec::new();
    let mut freqs = Vec::new();
    for (term, df) in doc_freq {
        let ratio = df as f64 / n_docs as f64;
        if ratio <= max_df && !stopwords.contains(term) {
            terms.push(term.to_string());
            freqs.push(df);
        }
    }
    let mut vocab = TfidfVocabulary {
        terms,
        doc_freq: freqs,
        n_docs,
        max_df,
        index: HashMap::new(),
    };
    vocab.build_index();
    Ok(vocab)
}

/// L2-normalized tf-idf weights for one document. Out-of-vocabulary tokens
/// are ignored; a document with no in-vocabulary tokens maps to the zero
/// vector (an empty map).
pub fn tfidf_transform(doc: &[String], vocab: &TfidfVocabulary) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for token in doc {
        if let Some(idx) = vocab.term_index(token) {
            *counts.entry(idx).or_default() += 1.0;
        }
    }
    let mut weights: BTreeMap<String, f64> = counts
        .into_iter()
        .map(|(idx, count)| (vocab.terms[idx].clone(), count * vocab.idf(idx)))
        .collect();
    let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for w in weights.values_mut() {
            *w /= norm;
        }
    }
    weights
}

fn add_sparse(into: &mut BTreeMap<String, f64>, from: &BTreeMap<String, f64>, scale: f64) {
    for (name, value) in from {
        *into.entry(name.clone()).or_default() += value * scale;
    }
}

/// Post tf-idf vector plus the mean of the comment vectors.
pub fn conversation_text_vector(
    conversation: &Conversation,
    vocab: &TfidfVocabulary,
) -> BTreeMap<String, f64> {
    let mut vector = tfidf_transform(&tokenize(&conversation.post_text()).tokens, vocab);
    if conversation.comments.is_empty() {
        return vector;
    }
    let scale = 1.0 / conversation.comments.len() as f64;
    for comment in &conversation.comments {
        let comment_vector = tfidf_transform(&tokenize(&comment.body).tokens, vocab);
        add_sparse(&mut vector, &comment_vector, scale);
    }
    vector
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Sentence-level sentiment rolled up to six conversation features. Post
/// extrema range over post sentences; a comment's score is the mean over its
/// sentences; comment aggregates are 0 when there are no comments.
pub fn sentiment_features(
    conversation: &Conversation,
    lexicon: &SentimentLexicon,
) -> BTreeMap<String, f64> {
    let sentence_scores = |text: &str| -> Vec<f64> {
        let stream = tokenize(text);
        (0..stream.sentences.len())
            .map(|s| sentiment_score(stream.sentence_tokens(s), lexicon))
            .collect()
    };

    let post_scores = sentence_scores(&conversation.post_text());
    let max_post = post_scores.iter().copied().fold(f64::MIN, f64::max);
    let min_post = post_scores.iter().copied().fold(f64::MAX, f64::min);

    let comment_scores: Vec<f64> = conversation
        .comments
        .iter()
        .map(|c| mean(&sentence_scores(&c.body)))
        .collect();
    let max_comment = comment_scores.iter().copied().fold(f64::MIN, f64::max);
    let min_comment = comment_scores.iter().copied().fold(f64::MAX, f64::min);
    let positives: Vec<f64> = comment_scores.iter().map(|s| s.max(0.0)).collect();
    let negatives: Vec<f64> = comment_scores.iter().map(|s| s.min(0.0)).collect();

    BTreeMap::from([
        (
            "max_post_sentiment".to_string(),
            if post_scores.is_empty() { 0.0 } else { max_post },
        ),
        (
            "min_post_sentiment".to_string(),
            if post_scores.is_empty() { 0.0 } else { min_post },
        ),
        (
            "max_comment_sentiment".to_string(),
            if comment_scores.is_empty() { 0.0 } else { max_comment },
        ),
        (
            "min_comment_sentiment".to_string(),
            if comment_scores.is_empty() { 0.0 } else { min_comment },
        ),
        ("avg_comment_positive".to_string(), mean(&positives)),
        ("avg_comment_negative".to_string(), mean(&negatives)),
    ])
}

/// Keeps the first ceil(fraction * n) comments. Comments are already in
/// (created_utc, id) order from ingest. Fraction 1 is the identity.
pub fn prefix_truncate(conversation: &Conversation, fraction: f64) -> Conversation {
    let mut out = conversation.clone();
    out.comments.truncate(prefix_len(conversation.comments.len(), fraction));
    out
}

/// ceil(fraction * n) with a tolerance so exact products like 0.2 * 5 do not
/// round up through float error.
pub fn prefix_len(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Everything assembly needs for one conversation.
#[derive(Debug, Clone)]
pub struct ConversationData {
    pub conversation: Conversation,
    pub acts: ActSequence,
    pub toxicity: ToxicityAnnotation,
    pub label: Label,
    pub embedding: Option<Vec<f64>>,
}

impl ConversationData {
    /// Prefix-truncates the conversation together with its per-comment
    /// annotations. The embedding block is opaque and passes through as-is.
    pub fn truncated(&self, fraction: f64) -> ConversationData {
        let keep = prefix_len(self.conversation.comments.len(), fraction);
        let mut acts = self.acts.clone();
        acts.truncate(1 + keep);
        ConversationData {
            conversation: prefix_truncate(&self.conversation, fraction),
            acts,
            toxicity: self.toxicity.truncate_comments(keep),
            label: self.label,
            embedding: self.embedding.clone(),
        }
    }
}

/// Lexicon resources shared by assembly.
#[derive(Debug, Clone)]
pub struct Resources {
    pub sentiment: SentimentLexicon,
    pub categories: CategoryLexicon,
}

impl Resources {
    pub fn bundled() -> Self {
        Resources {
            sentiment: SentimentLexicon::bundled(),
            categories: CategoryLexicon::bundled(),
        }
    }
}

/// One assembled conversation: sparse feature maps keyed by group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub conversation_id: String,
    pub groups: BTreeMap<String, BTreeMap<String, f64>>,
}

impl FeatureVector {
    /// Group-prefixed flat view: `group/name` -> value. Prefixing makes
    /// cross-group name collisions structurally impossible.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (group, features) in &self.groups {
            for (name, value) in features {
                let previous = out.insert(format!("{group}/{name}"), *value);
                debug_assert!(previous.is_none(), "collision inside group {group}");
            }
        }
        out
    }

    pub fn get(&self, flat_name: &str) -> Option<f64> {
        let (group, name) = flat_name.split_once('/')?;
        self.groups.get(group)?.get(name).copied()
    }
}

/// Dictionaries fitted on training folds, plus the config that shaped them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub config: FeatureConfig,
    pub vocab: Option<TfidfVocabulary>,
    pub subreddit_vocab: Vec<String>,
    pub location_vocab: Vec<String>,
}

impl FeaturePipeline {
    /// Fits every enabled dictionary on the given training conversations.
    pub fn fit(
        config: FeatureConfig,
        train: &[&ConversationData],
        profiles: &BTreeMap<String, UserProfile>,
        stopwords: &BTreeSet<String>,
    ) -> Result<FeaturePipeline, FeaturizeError> {
        config.validate()?;
        let vocab = if config.enabled("tfidf") {
            let mut docs: Vec<Vec<String>> = Vec::new();
            for data in train {
                docs.push(tokenize(&data.conversation.post_text()).tokens);
                for comment in &data.conversation.comments {
                    docs.push(tokenize(&comment.body).tokens);
                }
            }
            Some(tfidf_fit(&docs, config.max_df, stopwords)?)
        } else {
            None
        };

        let subreddit_vocab = if config.enabled("subreddit") {
            let names: BTreeSet<String> = train
                .iter()
                .map(|d| d.conversation.subreddit.clone())
                .filter(|s| !s.is_empty())
                .collect();
            names.into_iter().collect()
        } else {
            Vec::new()
        };

        let location_vocab = if config.enabled("location") {
            let mut counts: BTreeMap<String, f64> = BTreeMap::new();
            for data in train {
                let block = aggregate_conversation_users(&data.conversation, profiles);
                for (location, count) in block.locations {
                    *counts.entry(location).or_default() += count;
                }
            }
            // Top-K by count, name as the deterministic tie-break.
            let mut ranked: Vec<(String, f64)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            ranked.truncate(config.location_top_k);
            let mut vocab: Vec<String> = ranked.into_iter().map(|(name, _)| name).collect();
            vocab.sort();
            vocab
        } else {
            Vec::new()
        };

        Ok(FeaturePipeline {
            config,
            vocab,
            subreddit_vocab,
            location_vocab,
        })
    }

    /// Assembles the feature vector for one conversation as given (no
    /// truncation applied here; see [`Self::assemble_at`]).
    pub fn assemble(
        &self,
        data: &ConversationData,
        profiles: &BTreeMap<String, UserProfile>,
        resources: &Resources,
    ) -> Result<FeatureVector, FeaturizeError> {
        let conv = &data.conversation;
        let mut groups: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();

        if self.config.enabled("tfidf") {
            let vocab = self.vocab.as_ref().expect("fitted with tfidf enabled");
            groups.insert("tfidf".to_string(), conversation_text_vector(conv, vocab));
        }
        if self.config.enabled("discourse") {
            let counts = act_ngrams(&data.acts);
            groups.insert(
                "discourse".to_string(),
                counts.into_iter().map(|(k, v)| (k, v as f64)).collect(),
            );
        }
        if self.config.enabled("liwc") {
            let mut tokens = tokenize(&conv.post_text()).tokens;
            for comment in &conv.comments {
                tokens.extend(tokenize(&comment.body).tokens);
            }
            let counts = category_count_map(&tokens, &resources.categories);
            groups.insert(
                "liwc".to_string(),
                counts.into_iter().map(|(k, v)| (k, v as f64)).collect(),
            );
        }
        if self.config.enabled("sentiment") {
            groups.insert(
                "sentiment".to_string(),
                sentiment_features(conv, &resources.sentiment),
            );
        }
        if self.config.enabled("toxicity") {
            groups.insert("toxicity".to_string(), toxicity_features(&data.toxicity));
        }

        let wants_users = ["gender", "location", "prolific"]
            .iter()
            .any(|g| self.config.enabled(g));
        if wants_users {
            let block = aggregate_conversation_users(conv, profiles);
            if self.config.enabled("gender") {
                groups.insert("gender".to_string(), block.gender);
            }
            if self.config.enabled("prolific") {
                groups.insert("prolific".to_string(), block.prolific);
            }
            if self.config.enabled("location") {
                let mut capped: BTreeMap<String, f64> = BTreeMap::new();
                for (location, count) in block.locations {
                    if self.location_vocab.binary_search(&location).is_ok() {
                        capped.insert(location, count);
                    } else {
                        *capped.entry("other".to_string()).or_default() += count;
                    }
                }
                groups.insert("location".to_string(), capped);
            }
        }

        if self.config.enabled("subreddit") {
            let mut one_hot = BTreeMap::new();
            if self
                .subreddit_vocab
                .binary_search(&conv.subreddit)
                .is_ok()
            {
                one_hot.insert(conv.subreddit.clone(), 1.0);
            }
            groups.insert("subreddit".to_string(), one_hot);
        }

        if self.config.enabled("embedding") {
            let embedding = data
                .embedding
                .as_ref()
                .ok_or_else(|| FeaturizeError::MissingEmbedding(conv.id.clone()))?;
            let block: BTreeMap<String, f64> = embedding
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("v{}", i + 1), *v))
                .collect();
            groups.insert("embedding".to_string(), block);
        }

        let vector = FeatureVector {
            conversation_id: conv.id.clone(),
            groups,
        };
        for (name, value) in vector.flat() {
            if !value.is_finite() {
                return Err(FeaturizeError::NonFinite(name));
            }
        }
        Ok(vector)
    }

    /// Truncates to the first ceil(fraction * n) comments, then assembles.
    /// Fraction 1.0 is bit-identical to assembling the full conversation.
    pub fn assemble_at(
        &self,
        data: &ConversationData,
        fraction: f64,
        profiles: &BTreeMap<String, UserProfile>,
        resources: &Resources,
    ) -> Result<FeatureVector, FeaturizeError> {
        if fraction >= 1.0 {
            self.assemble(data, profiles, resources)
        } else {
            self.assemble(&data.truncated(fraction), profiles, resources)
        }
    }
}

fn csv_field(raw: &str) -> String {
    if raw.contains(',') || raw.contains('"') || raw.contains('\n') {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

/// Sparse matrix export: `conversation_id,feature_name,value` rows.
pub fn export_sparse_csv<W: Write>(
    mut out: W,
    vectors: &[FeatureVector],
) -> std::io::Result<()> {
    writeln!(out, "conversation_id,feature_name,value")?;
    for vector in vectors {
        for (name, value) in vector.flat() {
            writeln!(
                out,
                "{},{},{}",
                csv_field(&vector.conversation_id),
                csv_field(&name),
                value
            )?;
        }
    }
    Ok(())
}

/// Companion label column for the sparse export.
pub fn export_labels_csv<W: Write>(
    mut out: W,
    rows: &[(String, Label)],
) -> std::io::Result<()> {
    writeln!(out, "conversation_id,label")?;
    for (id, label) in rows {
        let name = match label {
            Label::Contentious => "contentious",
            Label::NonContentious => "non_contentious",
        };
        writeln!(out, "{},{name}", csv_field(id))?;
    }
    Ok(())
}

/// One lowercased stopword per line; `#` comments and blank lines skipped.
pub fn parse_stopwords(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.to_lowercase())
        .collect()
}

pub fn load_stopwords(path: &Path) -> Result<BTreeSet<String>, FeaturizeError> {
    let text = std::fs::read_to_string(path).map_err(|source| FeaturizeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_stopwords(&text))
}

/// The English stopword list shipped with the crate.
pub fn bundled_stopwords() -> BTreeSet<String> {
    parse_stopwords(include_str!("../data/stopwords_en.txt"))
}

/// Embedding sidecar: CSV with header `conversation_id,v1,...,vd`.
pub fn load_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, FeaturizeError> {
    let text = std::fs::read_to_string(path).map_err(|source| FeaturizeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(FeaturizeError::Format {
            path: path.display().to_string(),
            line: 1,
            reason: "empty embedding sidecar".to_string(),
        });
    };
    let dims = header.split(',').count().saturating_sub(1);
    if dims == 0 || !header.starts_with("conversation_id") {
        return Err(FeaturizeError::Format {
            path: path.display().to_string(),
            line: 1,
            reason: "expected header conversation_id,v1,...,vd".to_string(),
        });
    }
    let mut embeddings = BTreeMap::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| FeaturizeError::Format {
            path: path.display().to_string(),
            line: idx + 1,
            reason,
        };
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().to_string();
        let values: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| fail(format!("bad value: {e}")))?;
        if values.len() != dims {
            return Err(fail(format!("expected {dims} values, got {}", values.len())));
        }
        embeddings.insert(id, values);
    }
    Ok(embeddings)
}
