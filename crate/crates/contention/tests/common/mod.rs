//! Synthetic corpus builders shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use contention::annotate::{tag_conversation, ConversationAnnotations, DiscourseRules, ToxicityAnnotation};
use contention::corpus::{Comment, Conversation, Label, LabeledConversation};
use contention::featurize::Resources;
use contention::pipeline::PipelineInputs;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn conversation(
    id: &str,
    subreddit: &str,
    title: &str,
    comments: &[&str],
    ratio: f64,
) -> Conversation {
    Conversation {
        id: id.to_string(),
        subreddit: subreddit.to_string(),
        title: title.to_string(),
        selftext: String::new(),
        author: format!("author_of_{id}"),
        created_utc: 1_600_000_000,
        upvote_ratio: ratio,
        comments: comments
            .iter()
            .enumerate()
            .map(|(i, body)| Comment {
                id: format!("{id}_c{i}"),
                author: format!("commenter_{i}"),
                body: body.to_string(),
                created_utc: 1_600_000_000 + i as i64,
                parent_id: id.to_string(),
            })
            .collect(),
    }
}

pub fn with_label(conversation: Conversation, label: Label) -> LabeledConversation {
    LabeledConversation {
        conversation,
        label,
        threshold: 0.6,
    }
}

/// Joins labeled conversations with rule-tagged acts and zero toxicity into
/// pipeline inputs. Profiles and embeddings stay empty; lexicons are the
/// bundled ones; stopwords are empty so synthetic tokens always survive.
pub fn inputs_from(labeled: Vec<LabeledConversation>) -> PipelineInputs {
    let rules = DiscourseRules::default();
    let annotations: BTreeMap<String, ConversationAnnotations> = labeled
        .iter()
        .map(|l| {
            let conv = &l.conversation;
            (
                conv.id.clone(),
                ConversationAnnotations {
                    conversation_id: conv.id.clone(),
                    acts: tag_conversation(conv, &rules),
                    toxicity: ToxicityAnnotation::offline_zero(conv.comments.len()),
                },
            )
        })
        .collect();
    PipelineInputs::new(
        labeled,
        &annotations,
        BTreeMap::new(),
        &BTreeMap::new(),
        BTreeSet::new(),
        Resources::bundled(),
    )
    .expect("synthetic inputs are consistent")
}

/// Membership flags with an exact number of `true`s, shuffled by seed.
fn exact_plant(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut flags = vec![false; n];
    for flag in flags.iter_mut().take(count) {
        *flag = true;
    }
    flags.shuffle(rng);
    flags
}

/// Balanced labeled corpus with class-correlated tokens planted in titles.
///
/// Each entry in `plants` is `(token, rate_in_contentious, rate_in_other)`;
/// the token lands in exactly `rate * per_class` titles of each class, with
/// the receiving conversations chosen by seeded shuffle. Filler tokens keep
/// the vocabulary from collapsing to the planted signal.
pub fn planted_corpus(
    per_class: usize,
    plants: &[(&str, f64, f64)],
    seed: u64,
) -> Vec<LabeledConversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = [Label::Contentious, Label::NonContentious];
    let mut planted: Vec<Vec<Vec<&str>>> = vec![vec![Vec::new(); per_class]; 2];
    for (token, rate_contentious, rate_other) in plants {
        for (class_idx, rate) in [rate_contentious, rate_other].into_iter().enumerate() {
            let count = (rate * per_class as f64).round() as usize;
            let flags = exact_plant(per_class, count, &mut rng);
            for (i, flag) in flags.into_iter().enumerate() {
                if flag {
                    planted[class_idx][i].push(token);
                }
            }
        }
    }

    let mut labeled = Vec::with_capacity(2 * per_class);
    for (class_idx, label) in classes.into_iter().enumerate() {
        for (i, tokens) in planted[class_idx].iter().enumerate() {
            let global = class_idx * per_class + i;
            let mut title = format!(
                "topic w{} w{} w{}",
                global % 23,
                (global / 3) % 17,
                (global * 7) % 29
            );
            for token in tokens {
                title.push(' ');
                title.push_str(token);
            }
            let comment = format!("reply q{} q{}", global % 11, (global * 5) % 13);
            let ratio = if label == Label::Contentious { 0.55 } else { 0.9 };
            labeled.push(with_label(
                conversation(&format!("t3_{global:04}"), "forum", &title, &[&comment], ratio),
                label,
            ));
        }
    }
    labeled
}

/// Same conversations, labels shuffled; class balance is preserved.
pub fn permute_labels(labeled: &[LabeledConversation], seed: u64) -> Vec<LabeledConversation> {
    let mut labels: Vec<Label> = labeled.iter().map(|l| l.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labeled
        .iter()
        .zip(labels)
        .map(|(l, label)| LabeledConversation {
            conversation: l.conversation.clone(),
            label,
            threshold: l.threshold,
        })
        .collect()
}

/// Balanced corpus whose signal token sits only in the title, with
/// uninformative comments from an unrelated token alphabet.
pub fn post_signal_corpus(per_class: usize) -> Vec<LabeledConversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut labeled = Vec::with_capacity(2 * per_class);
    for (class_idx, label) in [Label::Contentious, Label::NonContentious].into_iter().enumerate() {
        let rate = if label == Label::Contentious { 0.9 } else { 0.1 };
        let flags = exact_plant(per_class, (rate * per_class as f64).round() as usize, &mut rng);
        for (i, flag) in flags.into_iter().enumerate() {
            let global = class_idx * per_class + i;
            let mut title = format!("topic w{} w{}", global % 19, (global / 2) % 13);
            if flag {
                title.push_str(" zyx");
            }
            // Comment text depends only on position, so truncating it can
            // never move the decision for any conversation.
            let comments: Vec<String> = (0..4).map(|c| format!("note q{c}")).collect();
            let comment_refs: Vec<&str> = comments.iter().map(String::as_str).collect();
            let ratio = if label == Label::Contentious { 0.55 } else { 0.9 };
            labeled.push(with_label(
                conversation(&format!("t3_{global:04}"), "forum", &title, &comment_refs, ratio),
                label,
            ));
        }
    }
    labeled
}

/// Balanced corpus whose signal token sits only in the last of ten
/// comments of every contentious conversation, and nowhere else.
pub fn late_signal_corpus(per_class: usize) -> Vec<LabeledConversation> {
    let mut labeled = Vec::with_capacity(2 * per_class);
    for (class_idx, label) in [Label::Contentious, Label::NonContentious].into_iter().enumerate() {
        for i in 0..per_class {
            let global = class_idx * per_class + i;
            // Nothing varies between conversations except the final comment,
            // so any prefix short of the full thread is pure chance.
            let title = "topic thread".to_string();
            let comments: Vec<String> = (0..10)
                .map(|c| {
                    if c == 9 && label == Label::Contentious {
                        "closing zyx".to_string()
                    } else if c == 9 {
                        "closing note".to_string()
                    } else {
                        format!("note q{c}")
                    }
                })
                .collect();
            let comment_refs: Vec<&str> = comments.iter().map(String::as_str).collect();
            let ratio = if label == Label::Contentious { 0.55 } else { 0.9 };
            labeled.push(with_label(
                conversation(&format!("t3_{global:04}"), "forum", &title, &comment_refs, ratio),
                label,
            ));
        }
    }
    labeled
}

/// Writes conversations as dump JSONL, one per line.
pub fn write_dump(path: &Path, conversations: &[Conversation]) {
    let mut file = std::fs::File::create(path).expect("create dump");
    for conv in conversations {
        serde_json::to_writer(&mut file, conv).expect("serialize conversation");
        file.write_all(b"\n").expect("write dump");
    }
}
