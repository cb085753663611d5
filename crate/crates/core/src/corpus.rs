//! Corpus ingestion: JSON-lines sentences with labeled spans, precomputed
//! embeddings, subword alignment and vocabularies.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the distinguished end-of-sequence label.
pub const EOS: &str = "EOS";

/// Token string that absorbs every out-of-vocabulary token.
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    /// Precomputed contextual vectors, one per token.
    pub vectors: Option<Vec<Vec<f64>>>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Self {
        Sentence {
            id: id.into(),
            tokens,
            vectors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Dimension of the attached vectors, if any.
    pub fn vector_dim(&self) -> Option<usize> {
        self.vectors
            .as_ref()
            .and_then(|v| v.first())
            .map(|v| v.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(self.invalid("sentence has no tokens".into()));
        }
        if let Some(vectors) = &self.vectors {
            if vectors.len() != self.tokens.len() {
                return Err(self.invalid(format!(
                    "{} vectors for {} tokens",
                    vectors.len(),
                    self.tokens.len()
                )));
            }
            let dim = vectors[0].len();
            if dim == 0 {
                return Err(self.invalid("zero-dimensional vectors".into()));
            }
            if vectors.iter().any(|v| v.len() != dim) {
                return Err(self.invalid("vectors have unequal dimensions".into()));
            }
        }
        Ok(())
    }

    fn invalid(&self, message: String) -> Error {
        Error::Validation {
            id: self.id.clone(),
            message,
        }
    }
}

impl AsMut<Sentence> for Sentence {
    fn as_mut(&mut self) -> &mut Sentence {
        self
    }
}

/// A contiguous token range `[start, end)` carrying a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl LabeledSpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        LabeledSpan {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn same_boundaries(&self, other: &LabeledSpan) -> bool {
        self.start == other.start && self.end == other.end
    }

    pub fn overlaps(&self, other: &LabeledSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Whether `self` contains `other` as a distinct span.
    pub fn contains(&self, other: &LabeledSpan) -> bool {
        self.start <= other.start && other.end <= self.end && self.len() > other.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub sentence: Sentence,
    pub spans: Vec<LabeledSpan>,
}

impl AsMut<Sentence> for AnnotatedSentence {
    fn as_mut(&mut self) -> &mut Sentence {
        &mut self.sentence
    }
}

impl AnnotatedSentence {
    pub fn id(&self) -> &str {
        &self.sentence.id
    }

    pub fn validate(&self) -> Result<()> {
        self.sentence.validate()?;
        let n = self.sentence.len();
        let mut seen = HashSet::new();
        for span in &self.spans {
            if span.start >= span.end || span.end > n {
                return Err(self.sentence.invalid(format!(
                    "span [{}, {}) out of bounds for {} tokens",
                    span.start, span.end, n
                )));
            }
            if span.label == EOS {
                return Err(self
                    .sentence
                    .invalid(format!("{EOS} is reserved and cannot label a span")));
            }
            if span.label.is_empty()
                || span.label.chars().any(char::is_whitespace)
                || span.label == "CN"
                || span.label.parse::<usize>().is_ok()
            {
                return Err(self.sentence.invalid(format!(
                    "label {:?} is empty, contains whitespace or collides with decision syntax",
                    span.label
                )));
            }
            if !seen.insert(span) {
                return Err(self.sentence.invalid(format!(
                    "duplicate span [{}, {}, {}]",
                    span.start, span.end, span.label
                )));
            }
        }
        Ok(())
    }

    /// The tokens covered by a span, joined by single spaces.
    pub fn span_text(&self, span: &LabeledSpan) -> String {
        self.sentence.tokens[span.start..span.end].join(" ")
    }
}

/// Ordered label inventory. `EOS` always sits at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub const EOS_ID: usize = 0;

    /// Builds a label set from entity labels; `EOS` is prepended and the
    /// remainder sorted so the order does not depend on corpus order.
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut uniq = BTreeSet::new();
        for l in labels {
            let l = l.into();
            if l == EOS {
                continue;
            }
            uniq.insert(l);
        }
        let mut all = vec![EOS.to_string()];
        all.extend(uniq);
        Self::from_ordered(all)
    }

    /// Restores a persisted ordering. The first entry must be `EOS`.
    pub fn from_ordered(labels: Vec<String>) -> Result<Self> {
        if labels.first().map(String::as_str) != Some(EOS) {
            return Err(Error::Format(format!("label set must start with {EOS}")));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l == "CN" || l.parse::<usize>().is_ok() || l.is_empty() {
                return Err(Error::Format(format!(
                    "label {l:?} collides with the printed decision syntax"
                )));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate label {l:?}")));
            }
        }
        Ok(LabelSet { labels, index })
    }

    pub fn from_corpus(corpus: &[AnnotatedSentence]) -> Result<Self> {
        Self::new(
            corpus
                .iter()
                .flat_map(|s| s.spans.iter().map(|sp| sp.label.clone())),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn require(&self, label: &str) -> Result<usize> {
        self.id(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// For each original token, the range of subword positions it expands to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordMap {
    pub tokens: Vec<String>,
    pub ranges: Vec<Range<usize>>,
}

impl SubwordMap {
    pub fn identity(tokens: &[String]) -> Self {
        SubwordMap {
            tokens: tokens.to_vec(),
            ranges: (0..tokens.len()).map(|i| i..i + 1).collect(),
        }
    }

    pub fn subword_len(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }
}

pub trait Tokenizer {
    fn split(&self, token: &str) -> Vec<String>;
}

impl<F> Tokenizer for F
where
    F: Fn(&str) -> Vec<String>,
{
    fn split(&self, token: &str) -> Vec<String> {
        self(token)
    }
}

/// Splits on internal whitespace; a token without whitespace maps to itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn split(&self, token: &str) -> Vec<String> {
        let parts: Vec<String> = token.split_whitespace().map(str::to_string).collect();
        if parts.is_empty() && !token.is_empty() {
            vec![token.to_string()]
        } else {
            parts
        }
    }
}

/// Re-tokenizes a sentence into subwords and moves span boundaries so each
/// span covers exactly the subwords of its original tokens.
pub fn subword_align(
    sent: &AnnotatedSentence,
    tokenizer: &dyn Tokenizer,
) -> Result<(AnnotatedSentence, SubwordMap)> {
    let mut subwords = Vec::new();
    let mut ranges = Vec::with_capacity(sent.sentence.len());
    for (index, token) in sent.sentence.tokens.iter().enumerate() {
        let pieces = tokenizer.split(token);
        if pieces.is_empty() {
            return Err(Error::Alignment {
                index,
                token: token.clone(),
            });
        }
        let begin = subwords.len();
        subwords.extend(pieces);
        ranges.push(begin..subwords.len());
    }
    let spans = sent
        .spans
        .iter()
        .map(|s| LabeledSpan {
            start: ranges[s.start].start,
            end: ranges[s.end - 1].end,
            label: s.label.clone(),
        })
        .collect();
    let aligned = AnnotatedSentence {
        sentence: Sentence::new(sent.sentence.id.clone(), subwords),
        spans,
    };
    let map = SubwordMap {
        tokens: sent.sentence.tokens.clone(),
        ranges,
    };
    Ok((aligned, map))
}

/// Mean-pools subword vectors back to original-token granularity.
pub fn pool_subwords(sent: &Sentence, map: &SubwordMap) -> Result<Sentence> {
    let vectors = sent.vectors.as_ref().ok_or_else(|| {
        Error::Unsupported(format!("sentence {} has no vectors to pool", sent.id))
    })?;
    if map.subword_len() != vectors.len() {
        return Err(Error::Format(format!(
            "subword map covers {} positions but sentence {} has {} vectors",
            map.subword_len(),
            sent.id,
            vectors.len()
        )));
    }
    let dim = sent.vector_dim().unwrap_or(0);
    let pooled = map
        .ranges
        .iter()
        .map(|r| {
            let mut acc = vec![0.0; dim];
            for v in &vectors[r.clone()] {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
            let k = r.len() as f64;
            acc.iter_mut().for_each(|a| *a /= k);
            acc
        })
        .collect();
    Ok(Sentence {
        id: sent.id.clone(),
        tokens: map.tokens.clone(),
        vectors: Some(pooled),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    tokens: Vec<String>,
    #[serde(default)]
    spans: Vec<(usize, usize, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vectors: Option<Vec<Vec<f64>>>,
}

/// Parses one JSON-lines record. Records without an `id` are named after
/// their 1-based line number.
pub fn parse_record(line: &str, line_no: usize) -> Result<AnnotatedSentence> {
    let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let sent = AnnotatedSentence {
        sentence: Sentence {
            id: rec.id.unwrap_or_else(|| line_no.to_string()),
            tokens: rec.tokens,
            vectors: rec.vectors,
        },
        spans: rec
            .spans
            .into_iter()
            .map(|(start, end, label)| LabeledSpan { start, end, label })
            .collect(),
    };
    sent.validate()?;
    Ok(sent)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<AnnotatedSentence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sent = parse_record(&line, i + 1)?;
        if !ids.insert(sent.sentence.id.clone()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate sentence id {:?}", sent.sentence.id),
            });
        }
        out.push(sent);
    }
    Ok(out)
}

pub fn record_json(sent: &AnnotatedSentence) -> String {
    let rec = CorpusRecord {
        id: Some(sent.sentence.id.clone()),
        tokens: sent.sentence.tokens.clone(),
        spans: sent
            .spans
            .iter()
            .map(|s| (s.start, s.end, s.label.clone()))
            .collect(),
        vectors: sent.sentence.vectors.clone(),
    };
    serde_json::to_string(&rec).expect("corpus records always serialize")
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[AnnotatedSentence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for sent in corpus {
        writeln!(w, "{}", record_json(sent)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct EmbeddingRecord {
    id: String,
    vectors: Vec<Vec<f64>>,
}

/// Attaches contextual vectors from a JSON-lines file keyed by sentence id.
/// Returns the embedding dimension.
pub fn load_embeddings<S: AsMut<Sentence>>(
    path: impl AsRef<Path>,
    corpus: &mut [S],
) -> Result<usize> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let wanted: HashSet<String> = corpus.iter_mut().map(|s| s.as_mut().id.clone()).collect();
    let mut found: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !wanted.contains(&rec.id) {
            continue;
        }
        for v in &rec.vectors {
            match dim {
                None if v.is_empty() => {
                    return Err(Error::Format(format!(
                        "sentence {} has zero-dimensional vectors",
                        rec.id
                    )))
                }
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Format(format!(
                        "sentence {} has a vector of dimension {} but {} was established earlier",
                        rec.id,
                        v.len(),
                        d
                    )))
                }
                Some(_) => {}
            }
        }
        found.insert(rec.id, rec.vectors);
    }
    let mut missing: Vec<String> = wanted
        .iter()
        .filter(|id| !found.contains_key(*id))
        .cloned()
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::Coverage { missing });
    }
    for s in corpus.iter_mut() {
        let s = s.as_mut();
        let vectors = found.remove(&s.id).expect("coverage checked above");
        if vectors.len() != s.tokens.len() {
            return Err(Error::Format(format!(
                "sentence {} has {} tokens but {} vectors",
                s.id,
                s.tokens.len(),
                vectors.len()
            )));
        }
        s.vectors = Some(vectors);
    }
    Ok(dim.unwrap_or(0))
}

/// Static word vectors: `V E` header followed by `token v1 .. vE` lines.
#[derive(Debug, Clone)]
pub struct StaticEmbeddings {
    pub dim: usize,
    pub table: HashMap<String, Vec<f64>>,
}

impl StaticEmbeddings {
    /// Attaches one vector per token; tokens missing from the table get
    /// zeros. Returns how many tokens were missing.
    pub fn attach(&self, sent: &mut Sentence) -> usize {
        let mut missing = 0;
        let vectors = sent
            .tokens
            .iter()
            .map(|t| match self.table.get(t) {
                Some(v) => v.clone(),
                None => {
                    missing += 1;
                    vec![0.0; self.dim]
                }
            })
            .collect();
        sent.vectors = Some(vectors);
        missing
    }
}

pub fn load_static_embeddings(path: impl AsRef<Path>) -> Result<StaticEmbeddings> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty static embedding file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let mut parts = header.split_whitespace().map(str::parse::<usize>);
    let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
        (Some(Ok(v)), Some(Ok(e)), None) if e > 0 => (v, e),
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header \"V E\", got {header:?}"),
            })
        }
    };
    let mut table = HashMap::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line").to_string();
        let values: Result<Vec<f64>> = fields
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 2,
                    message: e.to_string(),
                })
            })
            .collect();
        let values = values?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "line {}: token {token:?} has {} values, header declares {dim}",
                i + 2,
                values.len()
            )));
        }
        table.insert(token, values);
    }
    if table.len() != count {
        return Err(Error::Format(format!(
            "header declares {count} vectors, file holds {}",
            table.len()
        )));
    }
    Ok(StaticEmbeddings { dim, table })
}

/// Closed token vocabulary with a single UNK row at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const UNK_ID: usize = 0;

    pub fn build<'a, I>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let mut uniq = BTreeSet::new();
        for s in sentences {
            uniq.extend(s.tokens.iter().cloned());
        }
        uniq.remove(UNK);
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(uniq);
        Self::from_ordered(tokens).expect("built vocabularies are unique")
    }

    pub fn from_ordered(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Format(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn split_coke(token: &str) -> Vec<String> {
        if token == "Coke" {
            vec!["C".into(), "oke".into()]
        } else {
            vec![token.into()]
        }
    }

    #[test]
    fn worked_example_record_parses() {
        let line = r#"{"tokens":["James","Wilbur",",","a","Smith","Barney","analyst"], "spans":[[0,2,"PER"],[0,1,"FIRST"],[1,2,"NAME"],[4,6,"ORGCORP"],[4,6,"NAME"],[4,5,"NAME"],[5,6,"NAME"]]}"#;
        let s = parse_record(line, 1).unwrap();
        assert_eq!(s.spans.len(), 7);
        assert_eq!(s.sentence.len(), 7);
        assert_eq!(s.id(), "1");
    }

    #[test]
    fn empty_annotation_is_valid() {
        let s = parse_record(r#"{"id":"a","tokens":["x","y"],"spans":[]}"#, 3).unwrap();
        assert!(s.spans.is_empty());
    }

    #[test]
    fn out_of_bounds_span_names_sentence() {
        let line = r#"{"id":"s9","tokens":["a","b","c","d","e","f","g"],"spans":[[0,9,"X"]]}"#;
        match parse_record(line, 1) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, "s9"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_names_line() {
        match parse_record("{\"tokens\": [", 12) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 12),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_triples_rejected_but_shared_boundaries_allowed() {
        let ok = r#"{"id":"a","tokens":["x","y"],"spans":[[0,2,"A"],[0,2,"B"]]}"#;
        assert!(parse_record(ok, 1).is_ok());
        let dup = r#"{"id":"a","tokens":["x","y"],"spans":[[0,2,"A"],[0,2,"A"]]}"#;
        assert!(matches!(parse_record(dup, 1), Err(Error::Validation { .. })));
    }

    #[test]
    fn eos_cannot_label_a_span() {
        let line = r#"{"id":"a","tokens":["x"],"spans":[[0,1,"EOS"]]}"#;
        assert!(matches!(parse_record(line, 1), Err(Error::Validation { .. })));
    }

    #[test]
    fn label_set_puts_eos_first() {
        let ls = LabelSet::new(["PER", "NAME", "PER", "FIRST"]).unwrap();
        assert_eq!(ls.labels(), &["EOS", "FIRST", "NAME", "PER"]);
        assert_eq!(ls.id("EOS"), Some(LabelSet::EOS_ID));
        assert!(LabelSet::from_ordered(toks(&["A", "EOS"])).is_err());
    }

    #[test]
    fn subword_align_single_token_span() {
        let sent = AnnotatedSentence {
            sentence: Sentence::new("c", toks(&["Coke", "rose"])),
            spans: vec![LabeledSpan::new(0, 1, "A")],
        };
        let (aligned, map) = subword_align(&sent, &split_coke).unwrap();
        assert_eq!(aligned.sentence.tokens, toks(&["C", "oke", "rose"]));
        assert_eq!(aligned.spans, vec![LabeledSpan::new(0, 2, "A")]);
        assert_eq!(map.ranges, vec![0..2, 2..3]);
    }

    #[test]
    fn subword_align_two_token_span() {
        let sent = AnnotatedSentence {
            sentence: Sentence::new("c", toks(&["Coke", "rose"])),
            spans: vec![LabeledSpan::new(0, 2, "A")],
        };
        let (aligned, _) = subword_align(&sent, &split_coke).unwrap();
        assert_eq!(aligned.spans, vec![LabeledSpan::new(0, 3, "A")]);
    }

    #[test]
    fn identity_tokenizer_keeps_spans() {
        let sent = AnnotatedSentence {
            sentence: Sentence::new("c", toks(&["a", "b", "c"])),
            spans: vec![LabeledSpan::new(0, 2, "A"), LabeledSpan::new(1, 3, "B")],
        };
        let (aligned, map) = subword_align(&sent, &WhitespaceTokenizer).unwrap();
        assert_eq!(aligned.spans, sent.spans);
        assert_eq!(map, SubwordMap::identity(&sent.sentence.tokens));
    }

    #[test]
    fn empty_tokenization_is_an_error() {
        let sent = AnnotatedSentence {
            sentence: Sentence::new("c", toks(&["a", "drop"])),
            spans: vec![],
        };
        let tok = |t: &str| -> Vec<String> {
            if t == "drop" {
                vec![]
            } else {
                vec![t.to_string()]
            }
        };
        assert!(matches!(
            subword_align(&sent, &tok),
            Err(Error::Alignment { index: 1, .. })
        ));
    }

    #[test]
    fn pooling_takes_the_mean() {
        let map = SubwordMap {
            tokens: toks(&["tok"]),
            ranges: vec![0..2],
        };
        let mut s = Sentence::new("p", toks(&["a", "b"]));
        s.vectors = Some(vec![vec![1.0, 1.0], vec![3.0, 3.0]]);
        let pooled = pool_subwords(&s, &map).unwrap();
        assert_eq!(pooled.vectors.unwrap(), vec![vec![2.0, 2.0]]);
        assert_eq!(pooled.tokens, toks(&["tok"]));
    }

    #[test]
    fn pooling_three_subwords_matches_scalar_loop() {
        let vs = vec![
            vec![0.25, -1.5, 7.0],
            vec![1.125, 2.0, -3.0],
            vec![-0.75, 0.5, 11.0],
            vec![9.0, 9.0, 9.0],
        ];
        let map = SubwordMap {
            tokens: toks(&["long", "x"]),
            ranges: vec![0..3, 3..4],
        };
        let mut s = Sentence::new("p", toks(&["a", "b", "c", "x"]));
        s.vectors = Some(vs.clone());
        let pooled = pool_subwords(&s, &map).unwrap().vectors.unwrap();
        for k in 0..3 {
            let mut sum = 0.0;
            let mut i = 0;
            while i < 3 {
                sum += vs[i][k];
                i += 1;
            }
            assert!((pooled[0][k] - sum / 3.0).abs() < 1e-15);
        }
        assert_eq!(pooled[1], vs[3]);
    }

    #[test]
    fn pooling_without_vectors_is_unsupported() {
        let s = Sentence::new("p", toks(&["a"]));
        let map = SubwordMap::identity(&s.tokens);
        assert!(matches!(pool_subwords(&s, &map), Err(Error::Unsupported(_))));
    }

    #[test]
    fn vocab_maps_unknowns_to_unk() {
        let s = Sentence::new("v", toks(&["b", "a", "b"]));
        let v = Vocab::build([&s]);
        assert_eq!(v.tokens(), &["<unk>", "a", "b"]);
        assert_eq!(v.ids(&toks(&["a", "zzz"])), vec![1, 0]);
    }
}
