//! Needle-in-a-haystack documents, scoring, and grid runs.
//!
//! A case is a filler document of roughly `haystack_tokens` tokens with one
//! needle sentence carrying a digit payload, placed at a sentence boundary
//! chosen by `depth_percent`. Scoring distinguishes exact recall from the
//! dropped-trailing-digit failure.

mod client;
mod grid;

pub use client::{
    ClientError, CompletionClient, CompletionRequest, EchoNeedleClient, EndpointAdapter, FixtureClient,
    HttpClient, RetryPolicy, TruncatingClient,
};
pub use grid::{run_grid, CellKey, GridCell, GridReport, GridSpec, TrialRecord};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_NEEDLE_TEMPLATE: &str = "The special magic number hidden in this text is {payload}.";
pub const DEFAULT_QUESTION_TEMPLATE: &str =
    "What is the special magic number hidden in the text above? Answer with the number only.";
pub const PAYLOAD_PLACEHOLDER: &str = "{payload}";

/// Relative tolerance between requested and produced document length.
pub const LENGTH_TOLERANCE: f64 = 0.02;

const BUNDLED_FILLER: &str = include_str!("../../data/filler.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NiahError {
    #[error("needle payload must be a non-empty digit string, got {0:?}")]
    BadPayload(String),
    #[error("depth must be within [0, 100], got {0}")]
    BadDepth(f64),
    #[error("needle template must contain {PAYLOAD_PLACEHOLDER}")]
    MissingPlaceholder,
    #[error("template must not contain digits: {0:?}")]
    DigitsInTemplate(String),
    #[error("target of {target} tokens is shorter than needle plus question ({needed} tokens)")]
    TargetTooShort { target: usize, needed: usize },
    #[error("filler corpus is empty")]
    EmptyFiller,
    #[error("filler sentence contains digits: {0:?}")]
    DigitsInFiller(String),
    #[error("grid needs at least one length, one depth and one trial")]
    EmptyGrid,
}

/// Token counting hook. The default approximation is whitespace words x 1.3.
pub trait TokenCounter: Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordApprox {
    pub tokens_per_word: f64,
}

impl Default for WordApprox {
    fn default() -> Self {
        Self { tokens_per_word: 1.3 }
    }
}

impl TokenCounter for WordApprox {
    fn count_tokens(&self, text: &str) -> usize {
        (text.split_whitespace().count() as f64 * self.tokens_per_word).ceil() as usize
    }
}

/// Sentences the haystack is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct FillerCorpus {
    sentences: Vec<String>,
}

impl FillerCorpus {
    /// One sentence per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, NiahError> {
        let sentences: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        if sentences.is_empty() {
            return Err(NiahError::EmptyFiller);
        }
        if let Some(bad) = sentences.iter().find(|s| s.chars().any(|c| c.is_ascii_digit())) {
            return Err(NiahError::DigitsInFiller(bad.clone()));
        }
        Ok(Self { sentences })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_FILLER).expect("bundled filler corpus is valid")
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahCase {
    pub haystack_tokens: usize,
    pub depth_percent: f64,
    pub needle_payload: String,
    pub needle_template: String,
    pub question_template: String,
    pub seed: u64,
}

impl NiahCase {
    pub fn new(
        haystack_tokens: usize,
        depth_percent: f64,
        needle_payload: impl Into<String>,
        seed: u64,
    ) -> Self {
        Self {
            haystack_tokens,
            depth_percent,
            needle_payload: needle_payload.into(),
            needle_template: DEFAULT_NEEDLE_TEMPLATE.to_string(),
            question_template: DEFAULT_QUESTION_TEMPLATE.to_string(),
            seed,
        }
    }

    pub fn needle(&self) -> String {
        self.needle_template
            .replace(PAYLOAD_PLACEHOLDER, &self.needle_payload)
    }

    fn validate(&self) -> Result<(), NiahError> {
        if !is_digit_string(&self.needle_payload) {
            return Err(NiahError::BadPayload(self.needle_payload.clone()));
        }
        if !(0.0..=100.0).contains(&self.depth_percent) {
            return Err(NiahError::BadDepth(self.depth_percent));
        }
        if !self.needle_template.contains(PAYLOAD_PLACEHOLDER) {
            return Err(NiahError::MissingPlaceholder);
        }
        for t in [&self.needle_template, &self.question_template] {
            if t.chars().any(|c| c.is_ascii_digit()) {
                return Err(NiahError::DigitsInTemplate(t.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCase {
    pub document: String,
    pub question: String,
    pub prompt: String,
    pub expected: String,
    /// Index of the needle among all sentences of the document.
    pub needle_sentence_index: usize,
    pub needle_char_offset: usize,
    pub sentence_count: usize,
    pub token_count: usize,
    pub target_tokens: usize,
    pub depth_percent: f64,
    pub seed: u64,
}

fn is_digit_string(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Random payload with no leading zero.
pub fn random_payload(rng: &mut impl Rng, digits: usize) -> String {
    (0..digits.max(1))
        .map(|i| {
            let lo = if i == 0 { 1 } else { 0 };
            char::from(b'0' + rng.random_range(lo..10u8))
        })
        .collect()
}

pub fn generate_case(case: &NiahCase) -> Result<GeneratedCase, NiahError> {
    generate_case_with(case, &FillerCorpus::bundled(), &WordApprox::default())
}

/// Builds the document for `case`.
///
/// Filler sentences are drawn with a seeded generator into a word stream. The
/// largest prefix of that stream whose document (filler + needle) stays within
/// the target is found by binary search, so any monotone token counter works.
pub fn generate_case_with(
    case: &NiahCase,
    corpus: &FillerCorpus,
    counter: &dyn TokenCounter,
) -> Result<GeneratedCase, NiahError> {
    case.validate()?;
    let needle = case.needle();
    let question = case.question_template.clone();
    let needed = counter.count_tokens(&needle) + counter.count_tokens(&question);
    if case.haystack_tokens < needed {
        return Err(NiahError::TargetTooShort {
            target: case.haystack_tokens,
            needed,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let mut stream: Vec<Vec<&str>> = Vec::new();
    let mut words = 0usize;
    let mut filler_tokens = 0usize;
    // Per-sentence counts need not add up to the document count, so draw a
    // generous surplus and let the search trim it.
    while filler_tokens <= 2 * case.haystack_tokens + 64 {
        let sentence = &corpus.sentences[rng.random_range(0..corpus.sentences.len())];
        let w: Vec<&str> = sentence.split_whitespace().collect();
        words += w.len();
        filler_tokens += counter.count_tokens(sentence);
        stream.push(w);
    }

    let build = |word_budget: usize| assemble(&stream, word_budget, &needle, case.depth_percent);
    let (mut lo, mut hi) = (0usize, words);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if counter.count_tokens(&build(mid).text) <= case.haystack_tokens {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let doc = build(lo);
    let token_count = counter.count_tokens(&doc.text);
    let prompt = format!("{}\n\n{}", doc.text, question);
    Ok(GeneratedCase {
        needle_char_offset: doc.needle_offset,
        needle_sentence_index: doc.needle_index,
        sentence_count: doc.sentence_count,
        document: doc.text,
        question,
        prompt,
        expected: case.needle_payload.clone(),
        token_count,
        target_tokens: case.haystack_tokens,
        depth_percent: case.depth_percent,
        seed: case.seed,
    })
}

struct Assembled {
    text: String,
    needle_index: usize,
    needle_offset: usize,
    sentence_count: usize,
}

/// First `word_budget` filler words as sentences (a cut sentence gets a
/// closing period), with the needle inserted before sentence
/// `round(depth * n / 100)`.
fn assemble(stream: &[Vec<&str>], word_budget: usize, needle: &str, depth_percent: f64) -> Assembled {
    let mut sentences: Vec<String> = Vec::new();
    let mut left = word_budget;
    for words in stream {
        if left == 0 {
            break;
        }
        let take = left.min(words.len());
        let mut s = words[..take].join(" ");
        if take < words.len() {
            while s.ends_with(|c: char| c.is_ascii_punctuation()) {
                s.pop();
            }
            s.push('.');
        }
        sentences.push(s);
        left -= take;
    }
    let n = sentences.len();
    let needle_index = ((depth_percent / 100.0) * n as f64).round() as usize;
    let needle_index = needle_index.min(n);
    let needle_offset: usize = sentences[..needle_index].iter().map(|s| s.len() + 1).sum();
    sentences.insert(needle_index, needle.to_string());
    Assembled {
        text: sentences.join(" "),
        needle_index,
        needle_offset,
        sentence_count: n + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Exact,
    Truncated,
    Wrong,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiahResult {
    pub expected: String,
    pub answer: String,
    pub verdict: Verdict,
    pub matched_prefix_len: usize,
}

/// Digit runs in `answer`, with `,` and `_` between two digits treated as
/// group separators.
fn digit_runs(answer: &str) -> Vec<String> {
    let chars: Vec<char> = answer.chars().collect();
    let mut runs = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_digit() {
            cur.push(c);
        } else if (c == ',' || c == '_')
            && !cur.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())
        {
            continue;
        } else if !cur.is_empty() {
            runs.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    runs
}

/// Scores a model answer against the expected payload.
///
/// * `exact`: some digit run contains the payload.
/// * `truncated`: no exact match, but some digit run is a proper prefix of the
///   payload covering at least half of it (e.g. `741811` for `7418118`).
/// * `empty`: the answer is blank.
/// * `wrong`: everything else.
pub fn score(expected: &str, answer: &str) -> Result<NiahResult, NiahError> {
    if !is_digit_string(expected) {
        return Err(NiahError::BadPayload(expected.to_string()));
    }
    let result = |verdict, matched_prefix_len| NiahResult {
        expected: expected.to_string(),
        answer: answer.to_string(),
        verdict,
        matched_prefix_len,
    };
    if answer.trim().is_empty() {
        return Ok(result(Verdict::Empty, 0));
    }
    let runs = digit_runs(answer);
    if runs.iter().any(|r| r.contains(expected)) {
        return Ok(result(Verdict::Exact, expected.len()));
    }
    let proper_prefix = runs
        .iter()
        .filter(|r| r.len() < expected.len() && expected.starts_with(r.as_str()))
        .map(String::len)
        .max()
        .unwrap_or(0);
    if proper_prefix > 0 && 2 * proper_prefix >= expected.len() {
        return Ok(result(Verdict::Truncated, proper_prefix));
    }
    let common = runs
        .iter()
        .map(|r| {
            r.bytes()
                .zip(expected.bytes())
                .take_while(|(a, b)| a == b)
                .count()
        })
        .max()
        .unwrap_or(0);
    Ok(result(Verdict::Wrong, common))
}
