//! Per-user factors mined from post histories: gender (self-description
//! votes), location (gazetteer-geocoded), prolificity, and account age.
//! Profiles aggregate into per-conversation features over the participants.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Conversation;
use crate::lexicon::{tokenize, TokenStream};

#[derive(Debug, thiserror::Error)]
pub enum UserFactorsError {
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
    #[error("{path}: {reason}")]
    Resource { path: String, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryPost {
    #[serde(default)]
    pub body: String,
    #[serde(default)]
    pub created_utc: i64,
}

/// One user's post history, from the separate histories dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserHistory {
    pub author: String,
    pub account_created_utc: i64,
    #[serde(default)]
    pub posts: Vec<HistoryPost>,
}

pub fn read_histories(path: &Path) -> Result<Vec<UserHistory>, UserFactorsError> {
    let file = std::fs::File::open(path).map_err(|source| UserFactorsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut histories = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| UserFactorsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let history =
            serde_json::from_str::<UserHistory>(&line).map_err(|err| UserFactorsError::Format {
                path: path.display().to_string(),
                line: idx + 1,
                reason: err.to_string(),
            })?;
        histories.push(history);
    }
    Ok(histories)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
    Unknown,
}

impl Gender {
    pub fn name(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Unknown => "unknown",
        }
    }
}

/// noun -> female|male. Only binary entries; anything else is excluded from
/// voting entirely.
#[derive(Debug, Clone, Default)]
pub struct GenderLexicon {
    nouns: HashMap<String, Gender>,
}

impl GenderLexicon {
    pub fn parse(text: &str, origin: &str) -> Result<Self, UserFactorsError> {
        let mut nouns = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (noun, gender) =
                line.split_once('\t')
                    .ok_or_else(|| UserFactorsError::Format {
                        path: origin.to_string(),
                        line: idx + 1,
                        reason: "expected noun<TAB>female|male".to_string(),
                    })?;
            let gender = match gender.trim() {
                "female" => Gender::Female,
                "male" => Gender::Male,
                other => {
                    return Err(UserFactorsError::Format {
                        path: origin.to_string(),
                        line: idx + 1,
                        reason: format!("gender must be female or male, got {other:?}"),
                    })
                }
            };
            nouns.insert(noun.trim().to_lowercase(), gender);
        }
        Ok(GenderLexicon { nouns })
    }

    pub fn load(path: &Path) -> Result<Self, UserFactorsError> {
        let text = std::fs::read_to_string(path).map_err(|source| UserFactorsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn bundled() -> Self {
        Self::parse(
            include_str!("../data/gendered_nouns.tsv"),
            "bundled gendered_nouns.tsv",
        )
        .expect("bundled gendered noun list is well formed")
    }

    pub fn gender_of(&self, token: &str) -> Option<Gender> {
        self.nouns.get(token).copied()
    }
}

/// Lowercase place name -> canonical "city, region, country" string.
/// Lookup keys are space-joined token sequences; the longest prefix of a
/// captured phrase that matches wins.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    entries: HashMap<String, String>,
    max_key_tokens: usize,
}

impl Gazetteer {
    pub fn parse(text: &str, origin: &str) -> Result<Self, UserFactorsError> {
        let mut entries = HashMap::new();
        let mut max_key_tokens = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, canonical) =
                line.split_once('\t')
                    .ok_or_else(|| UserFactorsError::Format {
                        path: origin.to_string(),
                        line: idx + 1,
                        reason: "expected name<TAB>canonical".to_string(),
                    })?;
            let key_tokens = tokenize(name).tokens;
            if key_tokens.is_empty() {
                return Err(UserFactorsError::Format {
                    path: origin.to_string(),
                    line: idx + 1,
                    reason: format!("name {name:?} has no tokens"),
                });
            }
            max_key_tokens = max_key_tokens.max(key_tokens.len());
            entries.insert(key_tokens.join(" "), canonical.trim().to_lowercase());
        }
        Ok(Gazetteer {
            entries,
            max_key_tokens,
        })
    }

    pub fn load(path: &Path) -> Result<Self, UserFactorsError> {
        let text = std::fs::read_to_string(path).map_err(|source| UserFactorsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn bundled() -> Self {
        Self::parse(include_str!("../data/gazetteer.tsv"), "bundled gazetteer.tsv")
            .expect("bundled gazetteer is well formed")
    }

    /// Longest token-prefix lookup. Returns the canonical form and how many
    /// capture tokens it consumed.
    pub fn geocode(&self, capture: &[String]) -> Option<(&str, usize)> {
        let longest = capture.len().min(self.max_key_tokens);
        for len in (1..=longest).rev() {
            let key = capture[..len].join(" ");
            if let Some(canonical) = self.entries.get(&key) {
                return Some((canonical, len));
            }
        }
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserProfile {
    pub author: String,
    pub gender: Gender,
    /// Canonical (or raw fallback) locations, deduplicated, first-seen order.
    pub locations: Vec<String>,
    /// How often the author appears in the topic corpus (posts + comments).
    pub topic_post_count: u64,
    pub account_created_utc: Option<i64>,
}

impl UserProfile {
    pub fn unknown(author: &str) -> Self {
        UserProfile {
            author: author.to_string(),
            gender: Gender::Unknown,
            locations: Vec::new(),
            topic_post_count: 0,
            account_created_utc: None,
        }
    }

    /// Account age in days at time `at_utc`, clamped non-negative.
    pub fn account_age_days_at(&self, at_utc: i64) -> Option<f64> {
        self.account_created_utc
            .map(|created| ((at_utc - created).max(0)) as f64 / 86_400.0)
    }
}

const COPULA_MAX_LOOKAHEAD: usize = 4;

/// Positions right after each copula ("i am" / "i'm" / "im") in a sentence.
fn copula_ends(sentence: &[String]) -> Vec<usize> {
    let mut ends = Vec::new();
    for (i, token) in sentence.iter().enumerate() {
        match token.as_str() {
            "i'm" | "im" => ends.push(i + 1),
            "i" if sentence.get(i + 1).map(String::as_str) == Some("am") => ends.push(i + 2),
            _ => {}
        }
    }
    ends
}

/// Majority vote over self-descriptions.
///
/// Each copula occurrence votes for the last gendered noun within the next
/// four tokens of the same sentence ("I am a proud father" votes male via
/// "father"). Ties and zero votes resolve to unknown.
pub fn extract_gender(history: &UserHistory, nouns: &GenderLexicon) -> Gender {
    let mut female = 0u32;
    let mut male = 0u32;
    for post in &history.posts {
        let stream: TokenStream = tokenize(&post.body);
        for s in 0..stream.sentences.len() {
            let sentence = stream.sentence_tokens(s);
            for end in copula_ends(sentence) {
                let window = &sentence[end.min(sentence.len())
                    ..(end + COPULA_MAX_LOOKAHEAD).min(sentence.len())];
                let head = window.iter().rev().find_map(|t| nouns.gender_of(t));
                match head {
                    Some(Gender::Female) => female += 1,
                    Some(Gender::Male) => male += 1,
                    _ => {}
                }
            }
        }
    }
    match female.cmp(&male) {
        std::cmp::Ordering::Greater => Gender::Female,
        std::cmp::Ordering::Less => Gender::Male,
        std::cmp::Ordering::Equal => Gender::Unknown,
    }
}

const LOCATION_PATTERNS: [&[&str]; 3] = [&["i", "live", "in"], &["i'm", "from"], &["i", "am", "in"]];

/// Locations from self-statements, geocoded where the gazetteer knows the
/// place, kept as lowercase raw text otherwise. Deduplicated, first-seen
/// order.
pub fn extract_locations(history: &UserHistory, gazetteer: &Gazetteer) -> Vec<String> {
    let mut locations: Vec<String> = Vec::new();
    let mut push = |loc: String| {
        if !loc.is_empty() && !locations.contains(&loc) {
            locations.push(loc);
        }
    };
    for post in &history.posts {
        let stream = tokenize(&post.body);
        for s in 0..stream.sentences.len() {
            let sentence = stream.sentence_tokens(s);
            for pattern in LOCATION_PATTERNS {
                for start in 0..sentence.len() {
                    if sentence.len() - start < pattern.len() {
                        break;
                    }
                    let matches = sentence[start..start + pattern.len()]
                        .iter()
                        .zip(pattern)
                        .all(|(tok, pat)| tok == pat);
                    if !matches {
                        continue;
                    }
                    let capture = &sentence[start + pattern.len()..];
                    if capture.is_empty() {
                        continue;
                    }
                    match gazetteer.geocode(capture) {
                        Some((canonical, _)) => push(canonical.to_string()),
                        None => push(capture.join(" ")),
                    }
                }
            }
        }
    }
    locations
}

/// Strictly-greater-than flags for the three prolificity thresholds.
pub fn prolificity(topic_post_count: u64, thresholds: [u64; 3]) -> [bool; 3] {
    thresholds.map(|t| topic_post_count > t)
}

pub const PROLIFICITY_THRESHOLDS: [u64; 3] = [25, 50, 100];

/// Builds a profile per author seen in the corpus or the histories dump.
/// topic_post_count comes from the corpus (posts + comments authored);
/// gender, locations, and account age come from the history.
pub fn build_profiles(
    conversations: &[Conversation],
    histories: &[UserHistory],
    nouns: &GenderLexicon,
    gazetteer: &Gazetteer,
) -> BTreeMap<String, UserProfile> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for conv in conversations {
        *counts.entry(conv.author.as_str()).or_default() += 1;
        for comment in &conv.comments {
            *counts.entry(comment.author.as_str()).or_default() += 1;
        }
    }

    let mut profiles: BTreeMap<String, UserProfile> = counts
        .iter()
        .map(|(&author, &count)| {
            let mut profile = UserProfile::unknown(author);
            profile.topic_post_count = count;
            (author.to_string(), profile)
        })
        .collect();

    for history in histories {
        let profile = profiles
            .entry(history.author.clone())
            .or_insert_with(|| UserProfile::unknown(&history.author));
        profile.gender = extract_gender(history, nouns);
        profile.locations = extract_locations(history, gazetteer);
        profile.account_created_utc = Some(history.account_created_utc);
    }
    profiles
}

/// Per-conversation aggregates over distinct participants, one block per
/// downstream feature group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserFeatureBlock {
    pub gender: BTreeMap<String, f64>,
    pub locations: BTreeMap<String, f64>,
    pub prolific: BTreeMap<String, f64>,
}

pub fn aggregate_conversation_users(
    conversation: &Conversation,
    profiles: &BTreeMap<String, UserProfile>,
) -> UserFeatureBlock {
    let unknown = UserProfile::unknown("");
    let participants: Vec<&UserProfile> = conversation
        .participants()
        .into_iter()
        .map(|author| profiles.get(author).unwrap_or(&unknown))
        .collect();
    let n = participants.len() as f64;

    let mut block = UserFeatureBlock::default();

    let count_gender =
        |g: Gender| participants.iter().filter(|p| p.gender == g).count() as f64 / n;
    block
        .gender
        .insert("frac_female".to_string(), count_gender(Gender::Female));
    block
        .gender
        .insert("frac_male".to_string(), count_gender(Gender::Male));
    block.gender.insert(
        "frac_unknown_gender".to_string(),
        count_gender(Gender::Unknown),
    );
    let op_gender = profiles
        .get(conversation.author.as_str())
        .map_or(Gender::Unknown, |p| p.gender);
    block
        .gender
        .insert(format!("op_gender_{}", op_gender.name()), 1.0);

    for profile in &participants {
        for location in &profile.locations {
            *block.locations.entry(location.clone()).or_default() += 1.0;
        }
    }

    for (key, threshold) in ["frac_prolific_25", "frac_prolific_50", "frac_prolific_100"]
        .iter()
        .zip(PROLIFICITY_THRESHOLDS)
    {
        let frac = participants
            .iter()
            .filter(|p| p.topic_post_count > threshold)
            .count() as f64
            / n;
        block.prolific.insert(key.to_string(), frac);
    }

    let ages: Vec<f64> = participants
        .iter()
        .filter_map(|p| p.account_age_days_at(conversation.created_utc))
        .collect();
    let (mean_age, max_age) = if ages.is_empty() {
        (0.0, 0.0)
    } else {
        (
            ages.iter().sum::<f64>() / ages.len() as f64,
            ages.iter().copied().fold(f64::MIN, f64::max),
        )
    };
    block
        .prolific
        .insert("mean_account_age_days".to_string(), mean_age);
    block
        .prolific
        .insert("max_account_age_days".to_string(), max_age);

    block
}
