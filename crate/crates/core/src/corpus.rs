//! Documents, vocabulary, JSONL ingestion and the synthetic planted-rationale
//! generator.
//!
//! Words are lowercased and split into fixed-width pieces of at most
//! `max_piece_len` characters. The model and the scorers operate on pieces;
//! rationales and budgets are always expressed over whole tokens.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discretize::resolve_k;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;

pub const DEFAULT_MAX_PIECE_LEN: usize = 4;
pub const DEFAULT_MAX_PIECES: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub pieces: Vec<String>,
}

impl Token {
    fn from_word(word: &str, max_piece_len: usize) -> Token {
        let surface = word.to_lowercase();
        let chars: Vec<char> = surface.chars().collect();
        let pieces = chars
            .chunks(max_piece_len)
            .map(|c| c.iter().collect::<String>())
            .collect();
        Token { surface, pieces }
    }

    pub fn piece_count(&self) -> usize {
        self.pieces.len()
    }
}

/// Lowercase, split on whitespace and chunk every word into pieces of at most
/// `max_piece_len` characters.
pub fn tokenize(text: &str, max_piece_len: usize) -> Result<Vec<Token>> {
    if max_piece_len == 0 {
        return Err(Error::Config("max_piece_len must be at least 1".into()));
    }
    let tokens: Vec<Token> = text
        .split_whitespace()
        .map(|w| Token::from_word(w, max_piece_len))
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyDocument);
    }
    Ok(tokens)
}

pub fn detokenize(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|t| t.surface.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<Token>,
    pub query: Option<Vec<Token>>,
    pub label: usize,
    pub gold_rationale: Option<BTreeSet<usize>>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn query_len(&self) -> usize {
        self.query.as_ref().map_or(0, Vec::len)
    }

    /// Pieces of the full model input: query, separator and document.
    pub fn input_piece_count(&self) -> usize {
        let doc: usize = self.tokens.iter().map(Token::piece_count).sum();
        match &self.query {
            Some(q) => q.iter().map(Token::piece_count).sum::<usize>() + 1 + doc,
            None => doc,
        }
    }
}

/// Closed piece vocabulary. Ids 0..3 are reserved for padding, unknown
/// pieces and the query/document separator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_pieces<'a, I>(pieces: I) -> Vocabulary
    where
        I: IntoIterator<Item = &'a str>,
    {
        let sorted: BTreeSet<&str> = pieces
            .into_iter()
            .filter(|p| ![PAD, UNK, SEP].contains(p))
            .collect();
        let all: Vec<String> = [PAD, UNK, SEP]
            .into_iter()
            .chain(sorted)
            .map(str::to_string)
            .collect();
        Self::from_ordered(all)
    }

    fn from_ordered(pieces: Vec<String>) -> Vocabulary {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Vocabulary { pieces, index }
    }

    pub fn from_documents(documents: &[Document]) -> Vocabulary {
        Self::from_pieces(documents.iter().flat_map(|d| {
            d.tokens
                .iter()
                .chain(d.query.iter().flatten())
                .flat_map(|t| t.pieces.iter().map(String::as_str))
        }))
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> usize {
        self.index.get(piece).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    /// One `piece<TAB>id` line per entry, sorted by piece.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut entries: Vec<(&str, usize)> = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.as_str(), i))
            .collect();
        entries.sort();
        for (piece, id) in entries {
            writeln!(out, "{piece}\t{id}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vocabulary> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: message.to_string(),
            };
            let (piece, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected `piece<TAB>id`"))?;
            let id: usize = id.parse().map_err(|_| parse_err("invalid id"))?;
            entries.push((id, piece.to_string()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| i != *id) {
            return Err(Error::Schema(format!(
                "{}: vocabulary ids must be dense from 0",
                path.display()
            )));
        }
        let pieces: Vec<String> = entries.into_iter().map(|(_, p)| p).collect();
        if pieces.len() < 3 || pieces[PAD_ID] != PAD || pieces[UNK_ID] != UNK || pieces[SEP_ID] != SEP
        {
            return Err(Error::Schema(format!(
                "{}: reserved entries missing",
                path.display()
            )));
        }
        Ok(Self::from_ordered(pieces))
    }
}

/// Piece ids of one document, resolved against a vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDoc {
    pub query: Option<Vec<usize>>,
    pub pieces: Vec<usize>,
    /// `token_starts[t]..token_starts[t + 1]` are the pieces of token `t`.
    pub token_starts: Vec<usize>,
}

impl EncodedDoc {
    pub fn encode(doc: &Document, vocab: &Vocabulary) -> EncodedDoc {
        let mut pieces = Vec::new();
        let mut token_starts = Vec::with_capacity(doc.tokens.len() + 1);
        for token in &doc.tokens {
            token_starts.push(pieces.len());
            pieces.extend(token.pieces.iter().map(|p| vocab.id(p)));
        }
        token_starts.push(pieces.len());
        let query = doc.query.as_ref().map(|q| {
            q.iter()
                .flat_map(|t| t.pieces.iter().map(|p| vocab.id(p)))
                .collect()
        });
        EncodedDoc {
            query,
            pieces,
            token_starts,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.token_starts.len() - 1
    }

    pub fn token_pieces(&self, token: usize) -> &[usize] {
        &self.pieces[self.token_starts[token]..self.token_starts[token + 1]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Dev, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An immutable, validated split together with the piece ids of every
/// document.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    name: SplitName,
    documents: Vec<Document>,
    encoded: Vec<EncodedDoc>,
    num_classes: usize,
    vocab: Arc<Vocabulary>,
}

impl PartialEq for DatasetSplit {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.num_classes == other.num_classes
            && self.documents == other.documents
            && self.vocab == other.vocab
    }
}

impl DatasetSplit {
    pub fn new(
        name: SplitName,
        documents: Vec<Document>,
        num_classes: usize,
        vocab: Arc<Vocabulary>,
    ) -> Result<DatasetSplit> {
        if num_classes < 2 {
            return Err(Error::Schema("at least two classes are required".into()));
        }
        for doc in &documents {
            if doc.tokens.is_empty() {
                return Err(Error::EmptyDocument.in_document(&doc.id));
            }
            if doc.label >= num_classes {
                return Err(Error::Schema(format!(
                    "document `{}` has label {} outside 0..{num_classes}",
                    doc.id, doc.label
                )));
            }
            if let Some(gold) = &doc.gold_rationale {
                if gold.iter().any(|&i| i >= doc.tokens.len()) {
                    return Err(Error::Schema(format!(
                        "document `{}` has a rationale index past its {} tokens",
                        doc.id,
                        doc.tokens.len()
                    )));
                }
            }
        }
        let encoded = documents
            .iter()
            .map(|d| EncodedDoc::encode(d, &vocab))
            .collect();
        Ok(DatasetSplit {
            name,
            documents,
            encoded,
            num_classes,
            vocab,
        })
    }

    /// A split with the same name, classes and vocabulary but new documents.
    pub fn with_documents(&self, documents: Vec<Document>) -> Result<DatasetSplit> {
        DatasetSplit::new(self.name, documents, self.num_classes, self.vocab.clone())
    }

    pub fn name(&self) -> SplitName {
        self.name
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn encoded(&self) -> &[EncodedDoc] {
        &self.encoded
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.documents.iter().map(|d| d.label).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for doc in &self.documents {
            serde_json::to_writer(&mut out, &Record::from_document(doc))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// The three splits of one corpus. They share one vocabulary and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
}

impl Splits {
    pub fn new(train: DatasetSplit, dev: DatasetSplit, test: DatasetSplit) -> Result<Splits> {
        for other in [&dev, &test] {
            if other.num_classes != train.num_classes || *other.vocab != *train.vocab {
                return Err(Error::Schema(format!(
                    "split `{}` does not share the training vocabulary and classes",
                    other.name
                )));
            }
        }
        Ok(Splits { train, dev, test })
    }

    pub fn get(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetSplit> {
        [&self.train, &self.dev, &self.test].into_iter()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.train.vocab
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for split in self.iter() {
            split.write_jsonl(&dir.join(format!("{}.jsonl", split.name)))?;
        }
        self.vocab().write(&dir.join("vocab.txt"))
    }

    /// Reads `train.jsonl`, `dev.jsonl`, `test.jsonl` and `vocab.txt` as
    /// written by [`Splits::write_dir`].
    pub fn read_dir(dir: &Path, cfg: &IngestConfig) -> Result<Splits> {
        let vocab = Arc::new(Vocabulary::read(&dir.join("vocab.txt"))?);
        let load = |name: SplitName| {
            load_jsonl(
                &dir.join(format!("{name}.jsonl")),
                cfg,
                name,
                Some(vocab.clone()),
            )
        };
        let train = load(SplitName::Train)?;
        let cfg = IngestConfig {
            num_classes: Some(train.num_classes),
            ..cfg.clone()
        };
        let load = |name: SplitName| {
            load_jsonl(
                &dir.join(format!("{name}.jsonl")),
                &cfg,
                name,
                Some(vocab.clone()),
            )
        };
        Splits::new(train, load(SplitName::Dev)?, load(SplitName::Test)?)
    }

    /// Ingest raw `train.jsonl`, `dev.jsonl` and `test.jsonl`. The
    /// vocabulary comes from the training split; unseen dev and test pieces
    /// map to `[UNK]`.
    pub fn ingest_dir(dir: &Path, cfg: &IngestConfig) -> Result<Splits> {
        let path = |name: SplitName| dir.join(format!("{name}.jsonl"));
        let train = load_jsonl(&path(SplitName::Train), cfg, SplitName::Train, None)?;
        let cfg = IngestConfig {
            num_classes: Some(train.num_classes),
            ..cfg.clone()
        };
        let vocab = train.vocab.clone();
        let dev = load_jsonl(&path(SplitName::Dev), &cfg, SplitName::Dev, Some(vocab.clone()))?;
        let test = load_jsonl(&path(SplitName::Test), &cfg, SplitName::Test, Some(vocab))?;
        Splits::new(train, dev, test)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanUnit {
    #[default]
    Token,
    Char,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub max_piece_len: usize,
    /// Declared class count; inferred from the largest label when absent.
    pub num_classes: Option<usize>,
    pub span_unit: SpanUnit,
    /// Documents whose model input exceeds this many pieces are rejected.
    pub max_pieces: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            max_piece_len: DEFAULT_MAX_PIECE_LEN,
            num_classes: None,
            span_unit: SpanUnit::Token,
            max_pieces: DEFAULT_MAX_PIECES,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale_spans: Option<Vec<[usize; 2]>>,
}

impl Record {
    fn from_document(doc: &Document) -> Record {
        Record {
            id: doc.id.clone(),
            text: detokenize(&doc.tokens),
            query: doc.query.as_deref().map(detokenize),
            label: Some(doc.label),
            rationale_spans: doc.gold_rationale.as_ref().map(|g| merge_spans(g)),
        }
    }
}

/// Sorted indices as maximal half-open intervals.
fn merge_spans(indices: &BTreeSet<usize>) -> Vec<[usize; 2]> {
    let mut spans: Vec<[usize; 2]> = Vec::new();
    for &i in indices {
        match spans.last_mut() {
            Some(last) if last[1] == i => last[1] = i + 1,
            _ => spans.push([i, i + 1]),
        }
    }
    spans
}

/// Character offsets `[start, end)` of every whitespace-separated word.
fn word_char_offsets(text: &str) -> Vec<(usize, usize)> {
    let mut offsets = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                offsets.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        offsets.push((s, n));
    }
    offsets
}

/// Load one JSONL split. With `vocab == None` the vocabulary is built from
/// this file (the training split); otherwise the given vocabulary is used
/// as-is and unseen pieces map to the unknown id.
pub fn load_jsonl(
    path: &Path,
    cfg: &IngestConfig,
    name: SplitName,
    vocab: Option<Arc<Vocabulary>>,
) -> Result<DatasetSplit> {
    let reader = BufReader::new(File::open(path)?);
    let mut documents = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = n + 1;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label = record.label.ok_or_else(|| {
            Error::Schema(format!("{}:{line_no}: missing field `label`", path.display()))
        })?;
        if let Some(c) = cfg.num_classes {
            if label >= c {
                return Err(Error::Schema(format!(
                    "{}:{line_no}: label {label} outside the declared {c} classes",
                    path.display()
                )));
            }
        }
        let tokens = tokenize(&record.text, cfg.max_piece_len)
            .map_err(|e| parse_err(format!("document `{}`: {e}", record.id)))?;
        let query = match record.query.as_deref() {
            Some(q) if !q.trim().is_empty() => Some(tokenize(q, cfg.max_piece_len)?),
            _ => None,
        };
        let gold_rationale = match &record.rationale_spans {
            None => None,
            Some(spans) => {
                let mut gold = BTreeSet::new();
                let words = match cfg.span_unit {
                    SpanUnit::Token => None,
                    SpanUnit::Char => Some(word_char_offsets(&record.text)),
                };
                for &[start, end] in spans {
                    if start >= end {
                        return Err(parse_err(format!("empty rationale span [{start}, {end})")));
                    }
                    match &words {
                        None => {
                            if end > tokens.len() {
                                return Err(Error::Schema(format!(
                                    "{}:{line_no}: span [{start}, {end}) past {} tokens",
                                    path.display(),
                                    tokens.len()
                                )));
                            }
                            gold.extend(start..end);
                        }
                        Some(words) => gold.extend(
                            words
                                .iter()
                                .enumerate()
                                .filter(|(_, &(ws, we))| ws < end && start < we)
                                .map(|(i, _)| i),
                        ),
                    }
                }
                Some(gold)
            }
        };
        let doc = Document {
            id: record.id,
            tokens,
            query,
            label,
            gold_rationale,
        };
        if doc.input_piece_count() > cfg.max_pieces {
            return Err(Error::Schema(format!(
                "{}:{line_no}: document `{}` has {} pieces, above the cap of {}",
                path.display(),
                doc.id,
                doc.input_piece_count(),
                cfg.max_pieces
            )));
        }
        documents.push(doc);
    }
    let num_classes = cfg.num_classes.unwrap_or_else(|| {
        documents
            .iter()
            .map(|d| d.label + 1)
            .max()
            .unwrap_or(2)
            .max(2)
    });
    let vocab = vocab.unwrap_or_else(|| Arc::new(Vocabulary::from_documents(&documents)));
    DatasetSplit::new(name, documents, num_classes, vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of distinct words, signal and neutral together.
    pub vocab_size: usize,
    pub num_classes: usize,
    pub signal_words_per_class: usize,
    pub planted_ratio: f64,
    pub noise_rate: f64,
    pub max_piece_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_docs: 2000,
            dev_docs: 500,
            test_docs: 500,
            min_len: 40,
            max_len: 40,
            vocab_size: 400,
            num_classes: 2,
            signal_words_per_class: 20,
            planted_ratio: 0.2,
            noise_rate: 0.05,
            max_piece_len: DEFAULT_MAX_PIECE_LEN,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.planted_ratio > 0.0 && self.planted_ratio < 1.0) {
            return fail("planted_ratio must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return fail("noise_rate must lie in [0, 1]");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail("document lengths must satisfy 1 <= min_len <= max_len");
        }
        if self.signal_words_per_class == 0
            || self.vocab_size <= self.num_classes * self.signal_words_per_class
        {
            return fail("vocab_size must leave room for neutral words after the signal words");
        }
        if self.max_piece_len == 0 {
            return fail("max_piece_len must be at least 1");
        }
        Ok(())
    }
}

/// The generator's word lists. Signal words of class `c` occur only inside
/// planted spans of documents generated with label `c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub signal: Vec<Vec<String>>,
    pub neutral: Vec<String>,
}

impl Lexicon {
    /// The label implied by the planted signal words, before label noise.
    pub fn lookup_label(&self, doc: &Document) -> Option<usize> {
        let mut counts = vec![0usize; self.signal.len()];
        for token in &doc.tokens {
            for (c, words) in self.signal.iter().enumerate() {
                if words.contains(&token.surface) {
                    counts[c] += 1;
                }
            }
        }
        let (best, &count) = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        (count > 0).then_some(best)
    }

    pub fn is_signal(&self, surface: &str) -> bool {
        self.signal.iter().any(|w| w.iter().any(|s| s == surface))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub splits: Splits,
    pub lexicon: Lexicon,
}

fn random_words(
    rng: &mut ChaCha8Rng,
    count: usize,
    max_piece_len: usize,
    used_pieces: &mut HashSet<String>,
) -> Vec<String> {
    let mut words = Vec::with_capacity(count);
    while words.len() < count {
        let len = rng.gen_range(3..=8);
        let word: String = (0..len)
            .map(|_| char::from(b'a' + rng.gen_range(0..26u8)))
            .collect();
        let token = Token::from_word(&word, max_piece_len);
        // Pieces are never shared between words, so signal and neutral
        // pieces stay disjoint.
        if token.pieces.iter().any(|p| used_pieces.contains(p)) {
            continue;
        }
        used_pieces.extend(token.pieces.iter().cloned());
        words.push(word);
    }
    words
}

/// Generate train/dev/test splits with a planted contiguous rationale per
/// document. A pure function of `(cfg, seed)`.
pub fn make_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let signal: Vec<Vec<String>> = (0..cfg.num_classes)
        .map(|_| random_words(&mut rng, cfg.signal_words_per_class, cfg.max_piece_len, &mut used))
        .collect();
    let neutral_count = cfg.vocab_size - cfg.num_classes * cfg.signal_words_per_class;
    let neutral = random_words(&mut rng, neutral_count, cfg.max_piece_len, &mut used);
    let lexicon = Lexicon { signal, neutral };

    let vocab = Arc::new(Vocabulary::from_pieces(used.iter().map(String::as_str)));
    let sizes = [cfg.train_docs, cfg.dev_docs, cfg.test_docs];
    let mut splits = Vec::with_capacity(3);
    for (stream, (name, size)) in SplitName::ALL.into_iter().zip(sizes).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64 + 1);
        let documents = (0..size)
            .map(|j| planted_document(cfg, &lexicon, &mut rng, format!("{name}-{j:05}")))
            .collect();
        splits.push(DatasetSplit::new(name, documents, cfg.num_classes, vocab.clone())?);
    }
    let test = splits.pop().expect("three splits");
    let dev = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SyntheticCorpus {
        splits: Splits::new(train, dev, test)?,
        lexicon,
    })
}

fn planted_document(
    cfg: &SynthConfig,
    lexicon: &Lexicon,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Document {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let span = resolve_k(len, cfg.planted_ratio);
    let start = rng.gen_range(0..=len - span);
    let mut label = rng.gen_range(0..cfg.num_classes);
    let tokens = (0..len)
        .map(|i| {
            let pool = if (start..start + span).contains(&i) {
                &lexicon.signal[label]
            } else {
                &lexicon.neutral
            };
            let word = pool.choose(rng).expect("nonempty word pool");
            Token::from_word(word, cfg.max_piece_len)
        })
        .collect();
    if rng.gen_bool(cfg.noise_rate) {
        label = (label + rng.gen_range(1..cfg.num_classes)) % cfg.num_classes;
    }
    Document {
        id,
        tokens,
        query: None,
        label,
        gold_rationale: Some((start..start + span).collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub doc_len_mean: f64,
    pub doc_len_max: usize,
    /// Over documents that carry a query; `None` if none do.
    pub query_len_mean: Option<f64>,
    pub query_len_max: Option<usize>,
    /// `|gold| / l` over documents that carry a rationale.
    pub rationale_ratio_mean: Option<f64>,
    pub rationale_ratio_max: Option<f64>,
    pub label_distribution: Vec<f64>,
}

pub fn stats(split: &DatasetSplit) -> Result<CorpusStats> {
    let docs = split.documents();
    if docs.is_empty() {
        return Err(Error::Schema(format!("split `{}` is empty", split.name())));
    }
    let n = docs.len() as f64;
    let lens: Vec<usize> = docs.iter().map(Document::len).collect();
    let queries: Vec<usize> = docs
        .iter()
        .filter_map(|d| d.query.as_ref().map(Vec::len))
        .collect();
    let ratios: Vec<f64> = docs
        .iter()
        .filter_map(|d| {
            d.gold_rationale
                .as_ref()
                .map(|g| g.len() as f64 / d.len() as f64)
        })
        .collect();
    let mut label_distribution = vec![0.0; split.num_classes()];
    for d in docs {
        label_distribution[d.label] += 1.0 / n;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CorpusStats {
        count: docs.len(),
        doc_len_mean: lens.iter().sum::<usize>() as f64 / n,
        doc_len_max: lens.iter().copied().max().unwrap_or(0),
        query_len_mean: (!queries.is_empty())
            .then(|| queries.iter().sum::<usize>() as f64 / queries.len() as f64),
        query_len_max: queries.iter().copied().max(),
        rationale_ratio_mean: (!ratios.is_empty()).then(|| mean(&ratios)),
        rationale_ratio_max: ratios.iter().copied().reduce(f64::max),
        label_distribution,
    })
}
