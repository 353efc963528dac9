//! Per-text annotations: discourse acts and toxicity scores.
//!
//! Discourse acts come from a transparent rule cascade. The cascade is a
//! stand-in for a learned tagger, so `load_sidecar_acts` accepts externally
//! predicted acts and overrides the baseline wherever the sidecar has a row.
//! Downstream code only ever sees an [`ActSequence`].

mod mock;
mod toxicity;

pub use mock::MockScorer;
pub use toxicity::{
    score_texts, ScoreCache, ToxicityClientConfig, ToxicityError, ToxicityMode, ToxicityScorer,
};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Conversation;
use crate::lexicon::{contains_phrase, tokenize};

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Sidecar {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Toxicity(#[from] ToxicityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscourseAct {
    Question,
    Answer,
    Announcement,
    Agree,
    Appreciate,
    Disagree,
    Negative,
    Elaborate,
    Humor,
    Other,
}

impl DiscourseAct {
    pub const ALL: [DiscourseAct; 10] = [
        DiscourseAct::Question,
        DiscourseAct::Answer,
        DiscourseAct::Announcement,
        DiscourseAct::Agree,
        DiscourseAct::Appreciate,
        DiscourseAct::Disagree,
        DiscourseAct::Negative,
        DiscourseAct::Elaborate,
        DiscourseAct::Humor,
        DiscourseAct::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiscourseAct::Question => "question",
            DiscourseAct::Answer => "answer",
            DiscourseAct::Announcement => "announcement",
            DiscourseAct::Agree => "agree",
            DiscourseAct::Appreciate => "appreciate",
            DiscourseAct::Disagree => "disagree",
            DiscourseAct::Negative => "negative",
            DiscourseAct::Elaborate => "elaborate",
            DiscourseAct::Humor => "humor",
            DiscourseAct::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|act| act.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextPosition {
    Post,
    Comment,
}

/// Acts for one conversation: index 0 is the post, then comments in posted
/// order. Invariant: length = 1 + number of comments.
pub type ActSequence = Vec<DiscourseAct>;

/// Marker lists driving the rule cascade. A marker containing characters the
/// tokenizer would drop ("this.", "/s") matches as a raw lowercase substring;
/// any other marker matches as a contiguous token phrase, so "agree" never
/// fires inside "disagree".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscourseRules {
    pub disagree_markers: Vec<String>,
    pub agree_markers: Vec<String>,
    pub appreciate_markers: Vec<String>,
    pub negative_markers: Vec<String>,
    pub humor_markers: Vec<String>,
    pub elaborate_min_tokens: usize,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for DiscourseRules {
    fn default() -> Self {
        DiscourseRules {
            disagree_markers: strings(&["disagree", "wrong", "no way", "that's not"]),
            agree_markers: strings(&["agree", "exactly", "this."]),
            appreciate_markers: strings(&["thanks", "thank you", "appreciate", "grateful"]),
            negative_markers: strings(&[
                "idiot", "stupid", "dumb", "moron", "shut up", "pathetic", "troll",
            ]),
            humor_markers: strings(&["lol", "/s", "haha", "lmao", "rofl"]),
            elaborate_min_tokens: 40,
        }
    }
}

const WH_WORDS: [&str; 9] = [
    "who", "whom", "whose", "what", "which", "when", "where", "why", "how",
];

const AUX_STARTERS: [&str; 30] = [
    "is", "are", "was", "were", "am", "do", "does", "did", "can", "could", "will", "would",
    "should", "shall", "may", "might", "must", "has", "have", "had", "isn't", "aren't", "wasn't",
    "weren't", "don't", "doesn't", "didn't", "can't", "won't", "wouldn't",
];

fn marker_hits(marker: &str, text_lower: &str, tokens: &[String]) -> bool {
    let lower = marker.to_lowercase();
    let tokenizable = lower
        .chars()
        .all(|c| c.is_alphanumeric() || c == '\'' || c == ' ');
    if tokenizable {
        contains_phrase(tokens, &tokenize(&lower).tokens)
    } else {
        text_lower.contains(&lower)
    }
}

fn any_marker(markers: &[String], text_lower: &str, tokens: &[String]) -> bool {
    markers.iter().any(|m| marker_hits(m, text_lower, tokens))
}

fn has_link(text_lower: &str) -> bool {
    ["http://", "https://", "www."]
        .iter()
        .any(|prefix| text_lower.contains(prefix))
}

fn has_list_structure(text: &str) -> bool {
    text.lines().any(|line| {
        let line = line.trim_start();
        if line.starts_with("- ") || line.starts_with("* ") {
            return true;
        }
        let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
        digits > 0
            && matches!(line.chars().nth(digits), Some('.') | Some(')'))
    })
}

/// Rule cascade, first match wins:
/// 1. ends with "?" or starts with a wh-word or inverted auxiliary -> question
/// 2. disagreement marker -> disagree
/// 3. agreement marker -> agree
/// 4. appreciation marker -> appreciate
/// 5. insult or negative-reaction marker -> negative
/// 6. comment whose parent is a question -> answer
/// 7. post carrying links or list structure -> announcement
/// 8. humor marker -> humor
/// 9. more than `elaborate_min_tokens` tokens -> elaborate
/// 10. other
pub fn tag_discourse(
    text: &str,
    position: TextPosition,
    parent_act: Option<DiscourseAct>,
    rules: &DiscourseRules,
) -> DiscourseAct {
    let text_lower = text.to_lowercase();
    let tokens = tokenize(text).tokens;

    let is_question = text.trim_end().ends_with('?')
        || tokens.first().is_some_and(|first| {
            WH_WORDS.contains(&first.as_str()) || AUX_STARTERS.contains(&first.as_str())
        });
    if is_question {
        return DiscourseAct::Question;
    }
    if any_marker(&rules.disagree_markers, &text_lower, &tokens) {
        return DiscourseAct::Disagree;
    }
    if any_marker(&rules.agree_markers, &text_lower, &tokens) {
        return DiscourseAct::Agree;
    }
    if any_marker(&rules.appreciate_markers, &text_lower, &tokens) {
        return DiscourseAct::Appreciate;
    }
    if any_marker(&rules.negative_markers, &text_lower, &tokens) {
        return DiscourseAct::Negative;
    }
    if position == TextPosition::Comment && parent_act == Some(DiscourseAct::Question) {
        return DiscourseAct::Answer;
    }
    if position == TextPosition::Post && (has_link(&text_lower) || has_list_structure(text)) {
        return DiscourseAct::Announcement;
    }
    if any_marker(&rules.humor_markers, &text_lower, &tokens) {
        return DiscourseAct::Humor;
    }
    if tokens.len() > rules.elaborate_min_tokens {
        return DiscourseAct::Elaborate;
    }
    DiscourseAct::Other
}

/// Tags the post, then each comment with its parent's act. A comment whose
/// parent_id matches nothing (deleted parent) is tagged with no parent act.
pub fn tag_conversation(conversation: &Conversation, rules: &DiscourseRules) -> ActSequence {
    let mut acts = Vec::with_capacity(1 + conversation.comments.len());
    let post_act = tag_discourse(&conversation.post_text(), TextPosition::Post, None, rules);
    acts.push(post_act);

    let mut act_by_id: BTreeMap<&str, DiscourseAct> = BTreeMap::new();
    act_by_id.insert(conversation.id.as_str(), post_act);
    for comment in &conversation.comments {
        let parent = act_by_id.get(comment.parent_id.as_str()).copied();
        let act = tag_discourse(&comment.body, TextPosition::Comment, parent, rules);
        act_by_id.insert(comment.id.as_str(), act);
        acts.push(act);
    }
    acts
}

/// Loads externally predicted acts and overlays them on the rule baseline.
///
/// Sidecar rows are TSV `conversation_id<TAB>index<TAB>act` with index 0
/// meaning the post. Rows for conversations outside `convs` are ignored (a
/// sidecar may cover a superset of the current slice); a bad index or act
/// for a covered conversation is a format error.
pub fn load_sidecar_acts(
    path: &Path,
    convs: &[Conversation],
    rules: &DiscourseRules,
) -> Result<BTreeMap<String, ActSequence>, AnnotateError> {
    let mut sequences: BTreeMap<String, ActSequence> = convs
        .iter()
        .map(|c| (c.id.clone(), tag_conversation(c, rules)))
        .collect();

    let text = std::fs::read_to_string(path).map_err(|source| AnnotateError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |reason: String| AnnotateError::Sidecar {
            path: path.display().to_string(),
            line: idx + 1,
            reason,
        };
        let mut fields = line.split('\t');
        let (Some(id), Some(index), Some(act)) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(fail("expected conversation_id<TAB>index<TAB>act".to_string()));
        };
        let Some(seq) = sequences.get_mut(id) else {
            continue;
        };
        let index: usize = index
            .parse()
            .map_err(|_| fail(format!("bad index {index:?}")))?;
        if index >= seq.len() {
            return Err(fail(format!(
                "index {index} out of range for conversation {id:?} with {} texts",
                seq.len()
            )));
        }
        let act = DiscourseAct::from_name(act.trim())
            .ok_or_else(|| fail(format!("unknown act {act:?}")))?;
        seq[index] = act;
    }
    Ok(sequences)
}

/// Unigram and ordered-bigram counts over an act sequence. Bigram keys are
/// "first>second".
pub fn act_ngrams(seq: &ActSequence) -> BTreeMap<String, u32> {
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    for act in seq {
        *counts.entry(act.name().to_string()).or_default() += 1;
    }
    for pair in seq.windows(2) {
        let key = format!("{}>{}", pair[0].name(), pair[1].name());
        *counts.entry(key).or_default() += 1;
    }
    counts
}

/// Per-text toxicity scores for one conversation, in comment order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToxicityAnnotation {
    pub title: f64,
    pub selftext: f64,
    pub comments: Vec<f64>,
    /// True where the remote scorer failed and the offline lexicon filled in.
    pub title_fallback: bool,
    pub selftext_fallback: bool,
    pub comment_fallbacks: Vec<bool>,
}

impl ToxicityAnnotation {
    pub fn offline_zero(n_comments: usize) -> Self {
        ToxicityAnnotation {
            title: 0.0,
            selftext: 0.0,
            comments: vec![0.0; n_comments],
            title_fallback: false,
            selftext_fallback: false,
            comment_fallbacks: vec![false; n_comments],
        }
    }

    /// Keeps scores for the first `keep` comments. Used by early prediction.
    pub fn truncate_comments(&self, keep: usize) -> Self {
        let mut out = self.clone();
        out.comments.truncate(keep);
        out.comment_fallbacks.truncate(keep);
        out
    }
}

/// The four toxicity features. Zero comments means zero aggregates so the
/// design matrix stays dense-complete.
pub fn toxicity_features(ann: &ToxicityAnnotation) -> BTreeMap<String, f64> {
    let max = ann.comments.iter().copied().fold(0.0f64, f64::max);
    let avg = if ann.comments.is_empty() {
        0.0
    } else {
        ann.comments.iter().sum::<f64>() / ann.comments.len() as f64
    };
    BTreeMap::from([
        ("title_toxicity".to_string(), ann.title),
        ("selftext_toxicity".to_string(), ann.selftext),
        ("max_comment_toxicity".to_string(), max),
        ("avg_comment_toxicity".to_string(), avg),
    ])
}

/// The annotate stage artifact: one record per conversation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversationAnnotations {
    pub conversation_id: String,
    pub acts: ActSequence,
    pub toxicity: ToxicityAnnotation,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Comment;

    fn rules() -> DiscourseRules {
        DiscourseRules::default()
    }

    fn tag(text: &str) -> DiscourseAct {
        tag_discourse(text, TextPosition::Comment, None, &rules())
    }

    #[test]
    fn question_by_mark_or_inversion() {
        assert_eq!(tag("Why is this legal?"), DiscourseAct::Question);
        assert_eq!(tag("Is this even real"), DiscourseAct::Question);
        assert_eq!(tag("how does it work"), DiscourseAct::Question);
    }

    #[test]
    fn disagree_beats_agree_for_the_word_disagree() {
        assert_eq!(tag("I disagree with every point here"), DiscourseAct::Disagree);
        assert_eq!(tag("I agree with you completely"), DiscourseAct::Agree);
        assert_eq!(tag("This. A thousand times."), DiscourseAct::Agree);
    }

    #[test]
    fn marker_rules_fire_in_cascade_order() {
        assert_eq!(tag("thanks for writing it up"), DiscourseAct::Appreciate);
        assert_eq!(tag("you absolute moron"), DiscourseAct::Negative);
        assert_eq!(tag("lmao good one"), DiscourseAct::Humor);
        assert_eq!(tag("sure, I guess /s"), DiscourseAct::Humor);
    }

    #[test]
    fn answer_requires_question_parent() {
        let comment = "it became legal in 2004";
        let with_parent = tag_discourse(
            comment,
            TextPosition::Comment,
            Some(DiscourseAct::Question),
            &rules(),
        );
        assert_eq!(with_parent, DiscourseAct::Answer);
        assert_eq!(tag(comment), DiscourseAct::Other);
    }

    #[test]
    fn announcement_needs_post_position_and_structure() {
        let text = "New study dropped\nhttps://example.org/paper";
        let as_post = tag_discourse(text, TextPosition::Post, None, &rules());
        assert_eq!(as_post, DiscourseAct::Announcement);
        assert_eq!(tag(text), DiscourseAct::Other);
        let listy = "Key points\n1. first\n2. second";
        assert_eq!(
            tag_discourse(listy, TextPosition::Post, None, &rules()),
            DiscourseAct::Announcement
        );
    }

    #[test]
    fn elaborate_is_strictly_longer_than_threshold() {
        let mut cfg = rules();
        cfg.elaborate_min_tokens = 5;
        let five = "one two three four five";
        assert_eq!(
            tag_discourse(five, TextPosition::Comment, None, &cfg),
            DiscourseAct::Other
        );
        let six = "one two three four five six";
        assert_eq!(
            tag_discourse(six, TextPosition::Comment, None, &cfg),
            DiscourseAct::Elaborate
        );
    }

    #[test]
    fn cascade_is_total() {
        assert_eq!(tag(""), DiscourseAct::Other);
        assert_eq!(tag("ok then"), DiscourseAct::Other);
    }

    fn threaded_conversation() -> Conversation {
        Conversation {
            id: "c1".to_string(),
            subreddit: "s".to_string(),
            title: "Why is this happening?".to_string(),
            selftext: String::new(),
            author: "op".to_string(),
            created_utc: 0,
            upvote_ratio: 0.9,
            comments: vec![
                Comment {
                    id: "m1".to_string(),
                    author: "a".to_string(),
                    body: "because of the new rules".to_string(),
                    created_utc: 1,
                    parent_id: "c1".to_string(),
                },
                Comment {
                    id: "m2".to_string(),
                    author: "b".to_string(),
                    body: "thanks for explaining".to_string(),
                    created_utc: 2,
                    parent_id: "m1".to_string(),
                },
            ],
        }
    }

    #[test]
    fn tag_conversation_threads_parent_acts() {
        let acts = tag_conversation(&threaded_conversation(), &rules());
        assert_eq!(
            acts,
            vec![
                DiscourseAct::Question,
                DiscourseAct::Answer,
                DiscourseAct::Appreciate
            ]
        );
    }

    #[test]
    fn sidecar_overrides_baseline_rows_only() {
        let conv = threaded_conversation();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.tsv");
        std::fs::write(&path, "c1\t2\thumor\nghost\t0\tagree\n").unwrap();
        let seqs = load_sidecar_acts(&path, std::slice::from_ref(&conv), &rules()).unwrap();
        assert_eq!(
            seqs["c1"],
            vec![
                DiscourseAct::Question,
                DiscourseAct::Answer,
                DiscourseAct::Humor
            ]
        );
    }

    #[test]
    fn sidecar_rejects_unknown_acts_and_bad_indices() {
        let conv = threaded_conversation();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.tsv");
        std::fs::write(&path, "c1\t1\tsarcasm\n").unwrap();
        let err = load_sidecar_acts(&path, std::slice::from_ref(&conv), &rules()).unwrap_err();
        assert!(err.to_string().contains("unknown act"), "{err}");

        std::fs::write(&path, "c1\t3\thumor\n").unwrap();
        let err = load_sidecar_acts(&path, std::slice::from_ref(&conv), &rules()).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn act_ngram_counts_sum_to_lengths() {
        let seq = vec![
            DiscourseAct::Question,
            DiscourseAct::Answer,
            DiscourseAct::Answer,
        ];
        let counts = act_ngrams(&seq);
        assert_eq!(counts["question"], 1);
        assert_eq!(counts["answer"], 2);
        assert_eq!(counts["question>answer"], 1);
        assert_eq!(counts["answer>answer"], 1);
        let unigrams: u32 = DiscourseAct::ALL
            .iter()
            .filter_map(|a| counts.get(a.name()))
            .sum();
        assert_eq!(unigrams as usize, seq.len());
        let bigrams: u32 = counts
            .iter()
            .filter(|(k, _)| k.contains('>'))
            .map(|(_, v)| v)
            .sum();
        assert_eq!(bigrams as usize, seq.len() - 1);
    }

    #[test]
    fn singleton_sequence_has_no_bigrams() {
        let counts = act_ngrams(&vec![DiscourseAct::Other]);
        assert_eq!(counts.len(), 1);
        assert_eq!(counts["other"], 1);
    }

    #[test]
    fn toxicity_features_use_max_and_mean() {
        let ann = ToxicityAnnotation {
            title: 0.2,
            selftext: 0.0,
            comments: vec![0.1, 0.9, 0.3],
            title_fallback: false,
            selftext_fallback: false,
            comment_fallbacks: vec![false; 3],
        };
        let features = toxicity_features(&ann);
        assert_eq!(features["max_comment_toxicity"], 0.9);
        assert!((features["avg_comment_toxicity"] - 0.43333333333333335).abs() < 1e-15);
        assert_eq!(features["title_toxicity"], 0.2);
    }

    #[test]
    fn toxicity_features_of_empty_comment_list_are_zero() {
        let features = toxicity_features(&ToxicityAnnotation::offline_zero(0));
        assert_eq!(features["max_comment_toxicity"], 0.0);
        assert_eq!(features["avg_comment_toxicity"], 0.0);
    }

    #[test]
    fn toxicity_aggregates_are_permutation_invariant() {
        let mut ann = ToxicityAnnotation::offline_zero(3);
        ann.comments = vec![0.5, 0.2, 0.8];
        let forward = toxicity_features(&ann);
        ann.comments.reverse();
        let reversed = toxicity_features(&ann);
        assert_eq!(forward, reversed);
    }
}
