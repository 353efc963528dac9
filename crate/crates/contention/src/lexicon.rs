//! Tokenization and the two lexicon-driven text scores: sentiment and
//! category counts.
//!
//! The tokenizer is shared by every stage that looks at text, so all stages
//! agree on what a token is: a maximal run of alphanumeric characters,
//! keeping internal apostrophes ("don't" stays one token), lowercased.
//! Sentences split on `.`, `!` or `?` followed by whitespace or end of text.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("io error reading {path}: {source}")]
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
    Invalid { path: String, reason: String },
}

/// Tokens for one text plus sentence boundaries as half-open token ranges.
///
/// Invariant: spans are disjoint, ordered, and cover every token.
#[derive(Debug, Clone, Default)]
pub struct TokenStream {
    pub tokens: Vec<String>,
    pub sentences: Vec<(usize, usize)>,
}

impl TokenStream {
    pub fn sentence_tokens(&self, sentence: usize) -> &[String] {
        let (start, end) = self.sentences[sentence];
        &self.tokens[start..end]
    }
}

pub fn tokenize(text: &str) -> TokenStream {
    let chars: Vec<char> = text.chars().collect();
    let mut boundaries = Vec::new();
    for (i, c) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let at_end = i + 1 == chars.len();
            if at_end || chars[i + 1].is_whitespace() {
                boundaries.push(i + 1);
            }
        }
    }
    if boundaries.last() != Some(&chars.len()) {
        boundaries.push(chars.len());
    }

    let mut stream = TokenStream::default();
    let mut start = 0;
    for end in boundaries {
        let first_token = stream.tokens.len();
        let mut current = String::new();
        for i in start..end {
            let c = chars[i];
            if c.is_alphanumeric() {
                current.extend(c.to_lowercase());
            } else if (c == '\'' || c == '\u{2019}')
                && !current.is_empty()
                && i + 1 < end
                && chars[i + 1].is_alphanumeric()
            {
                current.push('\'');
            } else if !current.is_empty() {
                stream.tokens.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            stream.tokens.push(current);
        }
        if stream.tokens.len() > first_token {
            stream.sentences.push((first_token, stream.tokens.len()));
        }
        start = end;
    }
    stream
}

/// True when `phrase` occurs as a contiguous token subsequence of `tokens`.
pub fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    if phrase.is_empty() || phrase.len() > tokens.len() {
        return false;
    }
    tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// Valence lexicon with negation handling.
///
/// File format is TSV: `token<TAB>valence` per line. Directive lines hug the
/// marker (`#negator <token>`, `#negation_scale <f>`, `#alpha <f>`); a `#`
/// followed by whitespace is a comment.
#[derive(Debug, Clone)]
pub struct SentimentLexicon {
    valences: HashMap<String, f64>,
    negators: Vec<String>,
    pub negation_scale: f64,
    pub alpha: f64,
    pub negation_window: usize,
}

impl SentimentLexicon {
    pub fn parse(text: &str, origin: &str) -> Result<Self, LexiconError> {
        let mut lex = SentimentLexicon {
            valences: HashMap::new(),
            negators: Vec::new(),
            negation_scale: 0.74,
            alpha: 15.0,
            negation_window: 3,
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let fail = |reason: String| LexiconError::Format {
                path: origin.to_string(),
                line: idx + 1,
                reason,
            };
            if let Some(directive) = line.strip_prefix('#') {
                // A space after '#' marks prose; directives hug the marker.
                if directive.starts_with(char::is_whitespace) || directive.is_empty() {
                    continue;
                }
                let mut parts = directive.trim().splitn(2, char::is_whitespace);
                let key = parts.next().unwrap_or_default();
                let value = parts.next().unwrap_or_default().trim();
                match key {
                    "negator" => lex.negators.push(value.to_lowercase()),
                    "negation_scale" => {
                        lex.negation_scale = value
                            .parse()
                            .map_err(|_| fail(format!("bad negation_scale {value:?}")))?
                    }
                    "alpha" => {
                        lex.alpha = value
                            .parse()
                            .map_err(|_| fail(format!("bad alpha {value:?}")))?
                    }
                    _ => return Err(fail(format!("unknown directive {key:?}"))),
                }
                continue;
            }
            let (token, valence) = line
                .split_once('\t')
                .ok_or_else(|| fail("expected token<TAB>valence".to_string()))?;
            let valence: f64 = valence
                .trim()
                .parse()
                .map_err(|_| fail(format!("bad valence {valence:?}")))?;
            lex.valences.insert(token.trim().to_lowercase(), valence);
        }
        if !(lex.negation_scale > 0.0 && lex.negation_scale <= 1.0) {
            return Err(LexiconError::Invalid {
                path: origin.to_string(),
                reason: format!("negation_scale must be in (0, 1], got {}", lex.negation_scale),
            });
        }
        if lex.alpha.is_nan() || lex.alpha <= 0.0 {
            return Err(LexiconError::Invalid {
                path: origin.to_string(),
                reason: format!("alpha must be positive, got {}", lex.alpha),
            });
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Built-in lexicon, used when the run config names no file.
    pub fn bundled() -> Self {
        Self::parse(include_str!("../data/sentiment.tsv"), "bundled sentiment.tsv")
            .expect("bundled sentiment lexicon is well formed")
    }

    pub fn valence(&self, token: &str) -> Option<f64> {
        self.valences.get(token).copied()
    }

    fn is_negator(&self, token: &str) -> bool {
        self.negators.iter().any(|n| n == token)
    }
}

/// Sum of token valences squashed to [-1, 1].
///
/// A matched token's valence flips and shrinks (times `-negation_scale`) when
/// a negator sits within `negation_window` tokens before it. The raw sum x
/// maps to x / sqrt(x^2 + alpha), so the score never saturates exactly.
pub fn sentiment_score(tokens: &[String], lexicon: &SentimentLexicon) -> f64 {
    let mut sum = 0.0;
    for (i, token) in tokens.iter().enumerate() {
        let Some(valence) = lexicon.valence(token) else {
            continue;
        };
        let window_start = i.saturating_sub(lexicon.negation_window);
        let negated = tokens[window_start..i].iter().any(|t| lexicon.is_negator(t));
        sum += if negated {
            valence * -lexicon.negation_scale
        } else {
            valence
        };
    }
    sum / (sum * sum + lexicon.alpha).sqrt()
}

/// Word-category lexicon: patterns map tokens to named categories.
///
/// File format is TSV with a `#categories a,b,c` header naming every category
/// in order (the order fixes vector dimensions), then `pattern<TAB>cat[,cat]`
/// rows. A trailing `*` makes the pattern match any token with that prefix.
#[derive(Debug, Clone)]
pub struct CategoryLexicon {
    pub categories: Vec<String>,
    exact: HashMap<String, Vec<usize>>,
    prefixes: HashMap<String, Vec<usize>>,
    max_prefix_len: usize,
}

impl CategoryLexicon {
    pub fn parse(text: &str, origin: &str) -> Result<Self, LexiconError> {
        let mut categories: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut exact = HashMap::new();
        let mut prefixes: HashMap<String, Vec<usize>> = HashMap::new();
        let mut saw_header = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let fail = |reason: String| LexiconError::Format {
                path: origin.to_string(),
                line: idx + 1,
                reason,
            };
            if let Some(directive) = line.strip_prefix('#') {
                // A space after '#' marks prose; directives hug the marker.
                if directive.starts_with(char::is_whitespace) || directive.is_empty() {
                    continue;
                }
                let directive = directive.trim();
                if let Some(list) = directive.strip_prefix("categories") {
                    saw_header = true;
                    for name in list.trim().split(',') {
                        let name = name.trim().to_lowercase();
                        if name.is_empty() {
                            return Err(fail("empty category name".to_string()));
                        }
                        if index.contains_key(&name) {
                            return Err(fail(format!("duplicate category {name:?}")));
                        }
                        index.insert(name.clone(), categories.len());
                        categories.push(name);
                    }
                } else {
                    return Err(fail(format!("unknown directive {directive:?}")));
                }
                continue;
            }
            if !saw_header {
                return Err(fail("pattern before #categories header".to_string()));
            }
            let (pattern, cats) = line
                .split_once('\t')
                .ok_or_else(|| fail("expected pattern<TAB>categories".to_string()))?;
            let mut ids = Vec::new();
            for name in cats.split(',') {
                let name = name.trim().to_lowercase();
                let id = *index
                    .get(&name)
                    .ok_or_else(|| fail(format!("category {name:?} not in header")))?;
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            let pattern = pattern.trim().to_lowercase();
            if let Some(stem) = pattern.strip_suffix('*') {
                if stem.is_empty() {
                    return Err(fail("bare `*` pattern".to_string()));
                }
                prefixes.insert(stem.to_string(), ids);
            } else {
                exact.insert(pattern, ids);
            }
        }
        if categories.is_empty() {
            return Err(LexiconError::Invalid {
                path: origin.to_string(),
                reason: "no categories declared".to_string(),
            });
        }
        let max_prefix_len = prefixes.keys().map(|p| p.chars().count()).max().unwrap_or(0);
        Ok(CategoryLexicon {
            categories,
            exact,
            prefixes,
            max_prefix_len,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn bundled() -> Self {
        Self::parse(
            include_str!("../data/categories.tsv"),
            "bundled categories.tsv",
        )
        .expect("bundled category lexicon is well formed")
    }

    /// Categories for one token. Exact entries win over prefix patterns;
    /// among prefix patterns the longest stem wins. At most one pattern
    /// fires per token, so a token never double-counts a category.
    pub fn token_categories(&self, token: &str) -> Option<&[usize]> {
        if let Some(ids) = self.exact.get(token) {
            return Some(ids);
        }
        let chars: Vec<char> = token.chars().collect();
        let longest = chars.len().min(self.max_prefix_len);
        for len in (1..=longest).rev() {
            let stem: String = chars[..len].iter().collect();
            if let Some(ids) = self.prefixes.get(&stem) {
                return Some(ids);
            }
        }
        None
    }
}

/// Counts category hits over tokens. The returned vector always has one slot
/// per declared category, in header order.
pub fn category_counts(tokens: &[String], lexicon: &CategoryLexicon) -> Vec<u32> {
    let mut counts = vec![0u32; lexicon.categories.len()];
    for token in tokens {
        if let Some(ids) = lexicon.token_categories(token) {
            for &id in ids {
                counts[id] += 1;
            }
        }
    }
    counts
}

/// Same counts keyed by category name, for feature assembly.
pub fn category_count_map(tokens: &[String], lexicon: &CategoryLexicon) -> BTreeMap<String, u32> {
    lexicon
        .categories
        .iter()
        .cloned()
        .zip(category_counts(tokens, lexicon))
        .collect()
}
