//! Supervised fine-tuning data: byte tokenizer, question/prefix templates,
//! example rendering with answer spans, corpus I/O and dataset splits.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const BYTE_OFFSET: u32 = 3;
pub const VOCAB_SIZE: usize = 256 + BYTE_OFFSET as usize;

/// `[BOS] ++ (byte + 3)… ++ [EOS]`
pub fn byte_tokenize(s: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(s.len() + 2);
    ids.push(BOS);
    ids.extend(s.bytes().map(|b| b as u32 + BYTE_OFFSET));
    ids.push(EOS);
    ids
}

/// Byte ids without the surrounding specials.
pub fn byte_ids(s: &str) -> impl Iterator<Item = u32> + '_ {
    s.bytes().map(|b| b as u32 + BYTE_OFFSET)
}

/// Inverse of [`byte_tokenize`]; special tokens are dropped.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            PAD | BOS | EOS => {}
            id if (id as usize) < VOCAB_SIZE => bytes.push((id - BYTE_OFFSET) as u8),
            id => return Err(Error::Input(format!("token id {id} outside vocabulary"))),
        }
    }
    String::from_utf8(bytes).map_err(|e| Error::Input(format!("token bytes are not UTF-8: {e}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    Positive,
    Negative,
    Neutral,
}

impl SentimentLabel {
    /// Class order used everywhere: positive, negative, neutral.
    pub const ALL: [SentimentLabel; 3] = [Self::Positive, Self::Negative, Self::Neutral];

    pub fn word(self) -> &'static str {
        match self {
            Self::Positive => "positive",
            Self::Negative => "negative",
            Self::Neutral => "neutral",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for SentimentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Self::Positive),
            "negative" => Ok(Self::Negative),
            "neutral" => Ok(Self::Neutral),
            other => Err(Error::Input(format!(
                "label must be positive, negative or neutral, got {other:?}"
            ))),
        }
    }
}

pub const QUESTIONS: [&str; 15] = [
    "Can you analyze this financial sentiment?",
    "Please evaluate the sentiment of the following text:",
    "Determine the sentiment of this financial statement.",
    "Assess whether this text is positive, negative, or neutral.",
    "Here is a financial text for sentiment analysis:",
    "Classify the sentiment of this passage:",
    "Identify the tone of the following financial text:",
    "Evaluate this statement for sentiment polarity.",
    "What is the sentiment of this financial report?",
    "Is this sentiment optimistic, pessimistic, or neutral?",
    "Analyze the sentiment of the following:",
    "Assess the mood of this financial description.",
    "What sentiment does this statement convey?",
    "Classify the financial sentiment in the text below.",
    "Analyze the sentiment expressed in this passage.",
];

pub const PREFIXES: [&str; 10] = [
    "The sentiment of this text is:",
    "This passage conveys a sentiment of:",
    "Analyze and determine the sentiment as:",
    "The tone of the statement is:",
    "Classify the following text's sentiment as:",
    "The correct sentiment is:",
    "This statement reflects a sentiment of:",
    "The mood expressed in this text is:",
    "Determine the sentiment conveyed as:",
    "The following text exhibits a sentiment of:",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    pub questions: Vec<String>,
    pub prefixes: Vec<String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            questions: QUESTIONS.iter().map(|s| s.to_string()).collect(),
            prefixes: PREFIXES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// `question \n text \n prefix`
pub fn render_prompt(question: &str, text: &str, prefix: &str) -> String {
    format!("{question}\n{text}\n{prefix}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    /// Position of the source item in the corpus.
    #[serde(default)]
    pub corpus_index: usize,
    pub source_text: String,
    pub label: SentimentLabel,
    pub q_idx: usize,
    pub p_idx: usize,
    pub prompt: String,
    pub full: String,
    /// Half-open range of token positions holding `" " + label` in
    /// `byte_tokenize(full)`.
    pub answer_span: (usize, usize),
}

impl SftExample {
    pub fn tokens(&self) -> Vec<u32> {
        byte_tokenize(&self.full)
    }

    /// Mask over input positions: position `i` is scored when its
    /// next-token target `i + 1` lies inside the answer span.
    pub fn loss_mask(&self) -> Vec<bool> {
        let n = self.full.len() + 2;
        let (start, end) = self.answer_span;
        (0..n).map(|i| i + 1 >= start && i + 1 < end).collect()
    }
}

pub fn render_example(text: &str, label: SentimentLabel, q_idx: usize, p_idx: usize) -> Result<SftExample> {
    if q_idx >= QUESTIONS.len() {
        return Err(Error::Input(format!("question index {q_idx} out of range 0..15")));
    }
    if p_idx >= PREFIXES.len() {
        return Err(Error::Input(format!("prefix index {p_idx} out of range 0..10")));
    }
    if text.is_empty() {
        return Err(Error::Input("empty source text".into()));
    }
    let prompt = render_prompt(QUESTIONS[q_idx], text, PREFIXES[p_idx]);
    let answer = format!(" {}", label.word());
    let start = 1 + prompt.len();
    let end = start + answer.len();
    Ok(SftExample {
        corpus_index: 0,
        source_text: text.to_string(),
        label,
        q_idx,
        p_idx,
        full: format!("{prompt}{answer}"),
        prompt,
        answer_span: (start, end),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub text: String,
    pub label: SentimentLabel,
}

#[derive(Deserialize)]
struct RawCorpusLine {
    text: String,
    label: String,
}

/// Reads `{"text": ..., "label": ...}` lines. Unknown fields are ignored;
/// blank lines are skipped.
pub fn parse_corpus_jsonl(reader: impl BufRead, source: &str) -> Result<Vec<CorpusItem>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            detail,
        };
        let raw: RawCorpusLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label = raw.label.parse().map_err(|e: Error| parse_err(e.to_string()))?;
        out.push(CorpusItem { text: raw.text, label });
    }
    Ok(out)
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<CorpusItem>> {
    let file = std::fs::File::open(path)?;
    parse_corpus_jsonl(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplatePolicy {
    /// Example `i` takes (question, prefix) pair `i mod 150`, questions
    /// varying slowest.
    RoundRobin,
    SeededRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_ratio: f64,
    pub validation_ratio: f64,
    pub test_count: usize,
    pub policy: TemplatePolicy,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_ratio: 0.9,
            validation_ratio: 0.1,
            test_count: 50,
            policy: TemplatePolicy::RoundRobin,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<SftExample>,
    /// Held-out examples left after the test sample was drawn.
    pub validation: Vec<SftExample>,
    pub test: Vec<SftExample>,
    pub split_seed: u64,
}

pub fn assign_templates(n: usize, policy: TemplatePolicy, rng: &mut SeededRng) -> Vec<(usize, usize)> {
    let pairs = QUESTIONS.len() * PREFIXES.len();
    (0..n)
        .map(|i| match policy {
            TemplatePolicy::RoundRobin => {
                let j = i % pairs;
                (j / PREFIXES.len(), j % PREFIXES.len())
            }
            TemplatePolicy::SeededRandom => (rng.below(QUESTIONS.len()), rng.below(PREFIXES.len())),
        })
        .collect()
}

pub fn build_dataset(corpus: &[CorpusItem], cfg: &SplitConfig) -> Result<DatasetSplits> {
    if corpus.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let ratios = [cfg.train_ratio, cfg.validation_ratio];
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "data.train_ratio + data.validation_ratio must equal 1 (got {} + {})",
            cfg.train_ratio, cfg.validation_ratio
        )));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let templates = assign_templates(corpus.len(), cfg.policy, &mut rng);
    let examples = corpus
        .iter()
        .zip(&templates)
        .enumerate()
        .map(|(i, (item, &(q, p)))| {
            render_example(&item.text, item.label, q, p).map(|ex| SftExample { corpus_index: i, ..ex })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    let n_train = (cfg.train_ratio * examples.len() as f64).round() as usize;
    let (train_idx, held_idx) = order.split_at(n_train);
    if cfg.test_count > held_idx.len() {
        return Err(Error::Config(format!(
            "data.test_count {} exceeds the {} validation examples",
            cfg.test_count,
            held_idx.len()
        )));
    }
    let mut held = held_idx.to_vec();
    rng.shuffle(&mut held);
    let (test_idx, val_idx) = held.split_at(cfg.test_count);
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();

    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplits {
        train: pick(train_idx),
        validation: pick(&val_idx),
        test: pick(test_idx),
        split_seed: cfg.seed,
    })
}

impl DatasetSplits {
    /// True when no corpus item appears twice across the three splits.
    pub fn is_disjoint(&self) -> bool {
        let mut seen = HashSet::new();
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .all(|e| seen.insert(e.corpus_index))
    }
}

const COMPANIES: [&str; 12] = [
    "Nordic Steel",
    "Apex Mining",
    "Harbor Bank",
    "Vesta Retail",
    "Orion Telecom",
    "Kestrel Pharma",
    "Lumen Energy",
    "Atlas Freight",
    "Cobalt Software",
    "Meridian Foods",
    "Summit Insurance",
    "Pioneer Motors",
];

const POSITIVE: [&str; 8] = [
    "shares surged after record quarterly profit",
    "raised its full-year guidance on strong demand",
    "beat analyst expectations with soaring sales",
    "reported a sharp rise in operating profit",
    "won a major contract boosting its order book",
    "posted strong growth and higher margins",
    "stock rallied on an upbeat earnings report",
    "increased its dividend after a profitable year",
];

const NEGATIVE: [&str; 8] = [
    "shares plunged after a profit warning",
    "cut its dividend amid falling revenue",
    "reported a steep quarterly loss",
    "missed forecasts as sales collapsed",
    "announced layoffs after weak demand",
    "stock slumped on a downgrade and mounting debt",
    "warned of lower earnings and shrinking margins",
    "faces losses after a failed product launch",
];

const NEUTRAL: [&str; 8] = [
    "will hold its annual general meeting in May",
    "appointed a new chief financial officer",
    "said the board will review the proposal",
    "published its quarterly report on schedule",
    "moved its headquarters to a new office",
    "confirmed the date of its capital markets day",
    "kept its outlook unchanged for the year",
    "listed the new shares on the main market",
];

/// Headline-like sentences whose vocabulary matches their label. Classes
/// are balanced to within one; output is fixed per seed.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<CorpusItem> {
    let mut rng = SeededRng::new(seed);
    let mut labels: Vec<SentimentLabel> = (0..n).map(|i| SentimentLabel::ALL[i % 3]).collect();
    rng.shuffle(&mut labels);
    labels
        .into_iter()
        .map(|label| {
            let phrases = match label {
                SentimentLabel::Positive => &POSITIVE,
                SentimentLabel::Negative => &NEGATIVE,
                SentimentLabel::Neutral => &NEUTRAL,
            };
            let company = COMPANIES[rng.below(COMPANIES.len())];
            let phrase = phrases[rng.below(phrases.len())];
            CorpusItem {
                text: format!("{company} {phrase}."),
                label,
            }
        })
        .collect()
}
