//! Conversation dump ingestion, topic filtering, and distant-supervision
//! labeling by upvote-ratio quartile.
//!
//! A dump is JSONL, one conversation per line. Ingestion is lenient: bad
//! lines go to a rejects report instead of aborting the run. Everything
//! downstream assumes the normalized ordering established here, so ingest
//! sorts conversations by id and comments by (created_utc, id).

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::lexicon::{contains_phrase, tokenize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
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
    #[error("invalid topic spec {path}: {reason}")]
    TopicSpec { path: String, reason: String },
    #[error("unknown dump schema {0:?} (known: conversations-v1)")]
    UnknownSchema(String),
    #[error("no eligible conversations to label (all upvote ratios below 0.5)")]
    NothingEligible,
}

fn deleted_author() -> String {
    "[deleted]".to_string()
}

fn de_author<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    Ok(Option::<String>::deserialize(de)?.unwrap_or_else(deleted_author))
}

fn de_nullable_string<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    Ok(Option::<String>::deserialize(de)?.unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comment {
    pub id: String,
    #[serde(default = "deleted_author", deserialize_with = "de_author")]
    pub author: String,
    #[serde(default, deserialize_with = "de_nullable_string")]
    pub body: String,
    #[serde(default)]
    pub created_utc: i64,
    #[serde(default, deserialize_with = "de_nullable_string")]
    pub parent_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    #[serde(default, deserialize_with = "de_nullable_string")]
    pub subreddit: String,
    pub title: String,
    #[serde(default, deserialize_with = "de_nullable_string")]
    pub selftext: String,
    #[serde(default = "deleted_author", deserialize_with = "de_author")]
    pub author: String,
    #[serde(default)]
    pub created_utc: i64,
    pub upvote_ratio: f64,
    #[serde(default)]
    pub comments: Vec<Comment>,
}

impl Conversation {
    /// Post text as every downstream stage sees it.
    pub fn post_text(&self) -> String {
        format!("{} {}", self.title, self.selftext)
    }

    /// Distinct participants: post author plus comment authors, sorted.
    pub fn participants(&self) -> BTreeSet<&str> {
        let mut authors: BTreeSet<&str> = BTreeSet::new();
        authors.insert(self.author.as_str());
        for comment in &self.comments {
            authors.insert(comment.author.as_str());
        }
        authors
    }

    fn normalize(&mut self) {
        self.comments
            .sort_by(|a, b| (a.created_utc, &a.id).cmp(&(b.created_utc, &b.id)));
    }
}

/// One rejected dump line. `line_no` is 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reject {
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub conversations: Vec<Conversation>,
    pub rejects: Vec<Reject>,
}

/// Dump schema identifier. Only one schema exists today; the id is part of
/// the CLI surface so future dump formats can coexist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpSchema {
    ConversationsV1,
}

impl std::str::FromStr for DumpSchema {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conversations-v1" => Ok(DumpSchema::ConversationsV1),
            other => Err(CorpusError::UnknownSchema(other.to_string())),
        }
    }
}

/// Reads a dump leniently: every line either becomes a conversation or a
/// reject with a reason. Duplicate ids keep the first occurrence.
pub fn ingest(path: &Path, schema: DumpSchema) -> Result<IngestReport, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ingest_reader(BufReader::new(file), schema, &path.display().to_string())
}

pub fn ingest_reader<R: BufRead>(
    reader: R,
    schema: DumpSchema,
    origin: &str,
) -> Result<IngestReport, CorpusError> {
    let DumpSchema::ConversationsV1 = schema;
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: origin.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Conversation>(&line) {
            Ok(mut conversation) => {
                if let Err(reason) = validate(&conversation) {
                    report.rejects.push(Reject { line_no, reason });
                } else if !seen.insert(conversation.id.clone()) {
                    report.rejects.push(Reject {
                        line_no,
                        reason: format!("duplicate conversation id {:?}", conversation.id),
                    });
                } else {
                    conversation.normalize();
                    report.conversations.push(conversation);
                }
            }
            Err(err) => report.rejects.push(Reject {
                line_no,
                reason: err.to_string(),
            }),
        }
    }
    report.conversations.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(report)
}

fn validate(conversation: &Conversation) -> Result<(), String> {
    if conversation.id.is_empty() {
        return Err("empty conversation id".to_string());
    }
    let ratio = conversation.upvote_ratio;
    if !ratio.is_finite() || !(0.0..=1.0).contains(&ratio) {
        return Err(format!("upvote_ratio {ratio} outside [0, 1]"));
    }
    for comment in &conversation.comments {
        if comment.id.is_empty() {
            return Err("comment with empty id".to_string());
        }
    }
    Ok(())
}

/// Topic definition: a name plus keyword phrases. A conversation is on-topic
/// when any phrase occurs (as contiguous tokens) in the title, selftext, or
/// any comment body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicSpec {
    pub name: String,
    pub keywords: Vec<String>,
    #[serde(skip)]
    keyword_tokens: Vec<Vec<String>>,
}

impl TopicSpec {
    pub fn new(name: &str, keywords: &[&str]) -> Result<Self, CorpusError> {
        let spec = TopicSpec {
            name: name.to_string(),
            keywords: keywords.iter().map(|k| k.to_string()).collect(),
            keyword_tokens: Vec::new(),
        };
        spec.compiled(name)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec: TopicSpec =
            serde_json::from_str(&text).map_err(|err| CorpusError::TopicSpec {
                path: path.display().to_string(),
                reason: err.to_string(),
            })?;
        spec.compiled(&path.display().to_string())
    }

    pub(crate) fn compiled(mut self, origin: &str) -> Result<Self, CorpusError> {
        if self.keywords.is_empty() {
            return Err(CorpusError::TopicSpec {
                path: origin.to_string(),
                reason: "topic has no keywords".to_string(),
            });
        }
        self.keyword_tokens = Vec::with_capacity(self.keywords.len());
        for keyword in &self.keywords {
            let tokens = tokenize(keyword).tokens;
            if tokens.is_empty() {
                return Err(CorpusError::TopicSpec {
                    path: origin.to_string(),
                    reason: format!("keyword {keyword:?} has no tokens"),
                });
            }
            self.keyword_tokens.push(tokens);
        }
        Ok(self)
    }

    pub fn matches(&self, conversation: &Conversation) -> bool {
        let mut texts = vec![conversation.title.as_str(), conversation.selftext.as_str()];
        texts.extend(conversation.comments.iter().map(|c| c.body.as_str()));
        texts.iter().any(|text| {
            let tokens = tokenize(text).tokens;
            self.keyword_tokens
                .iter()
                .any(|phrase| contains_phrase(&tokens, phrase))
        })
    }
}

pub fn filter_topic(conversations: Vec<Conversation>, topic: &TopicSpec) -> Vec<Conversation> {
    conversations
        .into_iter()
        .filter(|c| topic.matches(c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Contentious,
    NonContentious,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledConversation {
    pub conversation: Conversation,
    pub label: Label,
    /// The quartile threshold this label was decided against.
    pub threshold: f64,
}

/// Counts for one labeling pool, for the labeling report artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSummary {
    pub source: String,
    pub eligible: usize,
    pub below_half: usize,
    pub threshold: f64,
    pub contentious: usize,
    pub non_contentious: usize,
}

#[derive(Debug)]
pub struct LabelOutcome {
    pub labeled: Vec<LabeledConversation>,
    pub summary: LabelSummary,
}

/// Labels one pool of conversations by upvote-ratio quartile.
///
/// Conversations with ratio below 0.5 are discarded as too ambiguous to
/// supervise on. The threshold is the nearest-rank 25th percentile of the
/// remaining ratios: the ceil(n/4)-th smallest. Ratio at or below the
/// threshold means contentious, so threshold ties land contentious.
pub fn label_conversations(
    conversations: Vec<Conversation>,
    source: &str,
) -> Result<LabelOutcome, CorpusError> {
    let total = conversations.len();
    let eligible: Vec<Conversation> = conversations
        .into_iter()
        .filter(|c| c.upvote_ratio >= 0.5)
        .collect();
    if eligible.is_empty() {
        return Err(CorpusError::NothingEligible);
    }
    let below_half = total - eligible.len();

    let mut ratios: Vec<f64> = eligible.iter().map(|c| c.upvote_ratio).collect();
    ratios.sort_by(f64::total_cmp);
    let rank = ratios.len().div_ceil(4);
    let threshold = ratios[rank - 1];

    let labeled: Vec<LabeledConversation> = eligible
        .into_iter()
        .map(|conversation| {
            let label = if conversation.upvote_ratio <= threshold {
                Label::Contentious
            } else {
                Label::NonContentious
            };
            LabeledConversation {
                conversation,
                label,
                threshold,
            }
        })
        .collect();

    let contentious = labeled
        .iter()
        .filter(|l| l.label == Label::Contentious)
        .count();
    let summary = LabelSummary {
        source: source.to_string(),
        eligible: labeled.len(),
        below_half,
        threshold,
        contentious,
        non_contentious: labeled.len() - contentious,
    };
    Ok(LabelOutcome { labeled, summary })
}

/// Strict JSONL reader for normalized conversations (the `ingest` stage
/// output). Unlike [`ingest`], any bad line is an error, because this file
/// is produced by the pipeline itself.
pub fn read_conversations(path: &Path) -> Result<Vec<Conversation>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut conversations = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let conversation =
            serde_json::from_str::<Conversation>(&line).map_err(|err| CorpusError::Format {
                path: path.display().to_string(),
                line: idx + 1,
                reason: err.to_string(),
            })?;
        conversations.push(conversation);
    }
    Ok(conversations)
}

/// Strict JSONL reader for labeled conversations (the `label` stage output).
pub fn read_labeled(path: &Path) -> Result<Vec<LabeledConversation>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut labeled = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str::<LabeledConversation>(&line).map_err(|err| {
                CorpusError::Format {
                    path: path.display().to_string(),
                    line: idx + 1,
                    reason: err.to_string(),
                }
            })?;
        labeled.push(record);
    }
    Ok(labeled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    pub(crate) fn conv(id: &str, ratio: f64) -> Conversation {
        Conversation {
            id: id.to_string(),
            subreddit: "test".to_string(),
            title: format!("post {id}"),
            selftext: String::new(),
            author: format!("author_{id}"),
            created_utc: 0,
            upvote_ratio: ratio,
            comments: Vec::new(),
        }
    }

    fn ingest_str(dump: &str) -> IngestReport {
        ingest_reader(Cursor::new(dump), DumpSchema::ConversationsV1, "test").unwrap()
    }

    #[test]
    fn ingest_parses_minimal_and_defaults_optionals() {
        let report = ingest_str(r#"{"id":"c1","title":"T","upvote_ratio":0.9}"#);
        assert!(report.rejects.is_empty());
        let c = &report.conversations[0];
        assert_eq!(c.author, "[deleted]");
        assert_eq!(c.selftext, "");
        assert!(c.comments.is_empty());
    }

    #[test]
    fn ingest_rejects_carry_line_numbers_and_reasons() {
        let dump = concat!(
            r#"{"id":"ok","title":"T","upvote_ratio":0.8}"#, "\n",
            "not json\n",
            r#"{"id":"bad","title":"T","upvote_ratio":1.4}"#, "\n",
            r#"{"title":"no id","upvote_ratio":0.5}"#, "\n",
            r#"{"id":"ok","title":"dupe","upvote_ratio":0.6}"#, "\n",
        );
        let report = ingest_str(dump);
        assert_eq!(report.conversations.len(), 1);
        let lines: Vec<usize> = report.rejects.iter().map(|r| r.line_no).collect();
        assert_eq!(lines, [2, 3, 4, 5]);
        assert!(report.rejects[1].reason.contains("upvote_ratio"));
        assert!(report.rejects[3].reason.contains("duplicate"));
    }

    #[test]
    fn ingest_treats_null_author_as_deleted() {
        let report = ingest_str(
            r#"{"id":"c1","title":"T","author":null,"upvote_ratio":0.9,"comments":[{"id":"m1","author":null,"body":"b","created_utc":5,"parent_id":"c1"}]}"#,
        );
        let c = &report.conversations[0];
        assert_eq!(c.author, "[deleted]");
        assert_eq!(c.comments[0].author, "[deleted]");
    }

    #[test]
    fn ingest_sorts_conversations_and_comments() {
        let dump = concat!(
            r#"{"id":"b","title":"T","upvote_ratio":0.9,"comments":[{"id":"m2","author":"u","body":"later","created_utc":9,"parent_id":"b"},{"id":"m1","author":"u","body":"earlier","created_utc":3,"parent_id":"b"}]}"#, "\n",
            r#"{"id":"a","title":"T","upvote_ratio":0.7}"#, "\n",
        );
        let report = ingest_str(dump);
        let ids: Vec<&str> = report.conversations.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        let bodies: Vec<&str> = report.conversations[1]
            .comments
            .iter()
            .map(|m| m.body.as_str())
            .collect();
        assert_eq!(bodies, ["earlier", "later"]);
    }

    #[test]
    fn topic_matching_ignores_case_and_punctuation() {
        let topic = TopicSpec::new("guncontrol", &["gun control", "firearms"]).unwrap();
        let mut c = conv("c1", 0.9);
        c.title = "New Gun-Control bill?".to_string();
        assert!(topic.matches(&c));
        c.title = "Unrelated".to_string();
        assert!(!topic.matches(&c));
        c.comments.push(Comment {
            id: "m1".to_string(),
            author: "u".to_string(),
            body: "what about FIREARMS".to_string(),
            created_utc: 1,
            parent_id: "c1".to_string(),
        });
        assert!(topic.matches(&c));
    }

    #[test]
    fn topic_keywords_must_be_nonempty() {
        assert!(TopicSpec::new("t", &[]).is_err());
        assert!(TopicSpec::new("t", &["..."]).is_err());
    }

    #[test]
    fn quartile_threshold_is_nearest_rank() {
        // Ratios 0.50..0.99: rank ceil(50/4)=13, threshold = 13th smallest.
        let convs: Vec<Conversation> = (0..50)
            .map(|i| conv(&format!("c{i:02}"), 0.50 + 0.01 * i as f64))
            .collect();
        let outcome = label_conversations(convs, "pool").unwrap();
        assert!((outcome.summary.threshold - 0.62).abs() < 1e-9);
        assert_eq!(outcome.summary.contentious, 13);
        assert_eq!(outcome.summary.below_half, 0);
    }

    #[test]
    fn threshold_ties_label_contentious() {
        let ratios = [0.5, 0.6, 0.6, 0.6, 0.7, 0.8, 0.9, 0.95];
        let convs: Vec<Conversation> = ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| conv(&format!("c{i}"), r))
            .collect();
        // n=8, rank 2, threshold 0.6; all three 0.6s tie in.
        let outcome = label_conversations(convs, "pool").unwrap();
        assert_eq!(outcome.summary.contentious, 4);
    }

    #[test]
    fn ineligible_ratios_are_discarded_before_the_quartile() {
        let convs = vec![conv("a", 0.2), conv("b", 0.5), conv("c", 0.9), conv("d", 0.8)];
        let outcome = label_conversations(convs, "pool").unwrap();
        assert_eq!(outcome.summary.below_half, 1);
        assert_eq!(outcome.summary.eligible, 3);
        assert!(outcome.labeled.iter().all(|l| l.conversation.id != "a"));
    }

    #[test]
    fn labeling_nothing_eligible_is_an_error() {
        let convs = vec![conv("a", 0.2), conv("b", 0.49)];
        assert!(matches!(
            label_conversations(convs, "pool"),
            Err(CorpusError::NothingEligible)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quartile_share_always_at_least_a_quarter(
            ratios in proptest::collection::vec(0.5f64..=1.0, 1..120)
        ) {
            let convs: Vec<Conversation> = ratios
                .iter()
                .enumerate()
                .map(|(i, &r)| conv(&format!("c{i:03}"), r))
                .collect();
            let n = convs.len();
            let outcome = label_conversations(convs, "pool").unwrap();
            // Nearest-rank quartile plus tie inclusion can only grow the
            // contentious side past n/4, never shrink it.
            prop_assert!(outcome.summary.contentious * 4 >= n);
            prop_assert!(outcome.summary.contentious >= 1);
            for l in &outcome.labeled {
                let expect = l.conversation.upvote_ratio <= outcome.summary.threshold;
                prop_assert_eq!(l.label == Label::Contentious, expect);
            }
        }

        #[test]
        fn labeling_is_idempotent(
            ratios in proptest::collection::vec(0.0f64..=1.0, 1..120)
        ) {
            let convs: Vec<Conversation> = ratios
                .iter()
                .enumerate()
                .map(|(i, &r)| conv(&format!("c{i:03}"), r))
                .collect();
            prop_assume!(ratios.iter().any(|r| *r >= 0.5));
            let first = label_conversations(convs, "pool").unwrap();
            let again = label_conversations(
                first.labeled.iter().map(|l| l.conversation.clone()).collect(),
                "pool",
            )
            .unwrap();
            prop_assert_eq!(first.summary.threshold.to_bits(), again.summary.threshold.to_bits());
            for (a, b) in first.labeled.iter().zip(&again.labeled) {
                prop_assert_eq!(a.label, b.label);
            }
        }
    }
}
