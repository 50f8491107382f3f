//! JSONL corpus files and binary feature files.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use deconfound_core::corpus::{Corpus, CorpusError, PosTag, Sample, Token, NUM_CHOICES};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PERSON_PATTERN: &str = r"^person\d+$";

/// One line of a corpus file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub question: Vec<String>,
    pub answer_choices: Vec<Vec<String>>,
    pub rationale_choices: Vec<Vec<String>>,
    pub answer_label: i64,
    pub rationale_label: i64,
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_feature: Option<Vec<f64>>,
    /// `path` or `path#row`, relative to the corpus file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_feature_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_pos_tags: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_pos_tags: Option<Vec<Vec<String>>>,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Expected feature length; inferred from the first sample when unset.
    pub feature_dim: Option<usize>,
    pub person_pattern: Regex,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { feature_dim: None, person_pattern: Regex::new(DEFAULT_PERSON_PATTERN).expect("valid pattern") }
    }
}

impl IngestOptions {
    pub fn with_person_pattern(mut self, pattern: &str) -> Result<Self, LoadError> {
        self.person_pattern = Regex::new(pattern).map_err(|e| LoadError::Pattern(e.to_string()))?;
        Ok(self)
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: malformed JSON: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: CorpusError },
    #[error("line {line}: feature file {path}: {message}")]
    FeatureFile { line: usize, path: PathBuf, message: String },
    #[error("invalid person pattern: {0}")]
    Pattern(String),
    #[error("corpus has no samples")]
    Empty,
}

impl LoadError {
    /// Line number (1-based) the error refers to, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Malformed { line, .. }
            | Self::Schema { line, .. }
            | Self::Invalid { line, .. }
            | Self::FeatureFile { line, .. } => Some(*line),
            _ => None,
        }
    }
}

fn token(surface: &str, tag: Option<&str>, opts: &IngestOptions) -> Result<Token, CorpusError> {
    let lower = surface.to_lowercase();
    let t = Token::with_person_flag(&lower, opts.person_pattern.is_match(&lower))?;
    Ok(match tag.and_then(PosTag::parse) {
        Some(p) => t.tagged(p),
        None => t,
    })
}

fn token_list(words: &[String], tags: Option<&Vec<String>>, opts: &IngestOptions) -> Result<Vec<Token>, String> {
    if let Some(t) = tags {
        if t.len() != words.len() {
            return Err(format!("tag array has {} entries for {} tokens", t.len(), words.len()));
        }
    }
    words
        .iter()
        .enumerate()
        .map(|(i, w)| token(w, tags.map(|t| t[i].as_str()), opts).map_err(|e| e.to_string()))
        .collect()
}

fn choices(
    field: &str,
    lists: &[Vec<String>],
    tags: Option<&Vec<Vec<String>>>,
    opts: &IngestOptions,
) -> Result<[Vec<Token>; NUM_CHOICES], String> {
    if lists.len() != NUM_CHOICES {
        return Err(format!("{field} must have exactly {NUM_CHOICES} entries, found {}", lists.len()));
    }
    if let Some(t) = tags {
        if t.len() != NUM_CHOICES {
            return Err(format!("{field} tag arrays must have {NUM_CHOICES} entries"));
        }
    }
    let mut out: [Vec<Token>; NUM_CHOICES] = Default::default();
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = token_list(&lists[i], tags.map(|t| &t[i]), opts)?;
    }
    Ok(out)
}

fn label(field: &'static str, id: &str, v: i64) -> Result<usize, CorpusError> {
    usize::try_from(v)
        .ok()
        .filter(|&x| x < NUM_CHOICES)
        .ok_or_else(|| CorpusError::LabelOutOfRange { id: id.to_string(), field, value: v.max(0) as usize })
}

/// Reads whole binary feature files once and hands out rows.
#[derive(Default)]
struct FeatureCache {
    files: HashMap<PathBuf, Vec<f32>>,
}

impl FeatureCache {
    fn row(&mut self, base: &Path, reference: &str, dim: usize) -> Result<Vec<f64>, (PathBuf, String)> {
        let (rel, row) = match reference.rsplit_once('#') {
            Some((p, r)) => (p, r.parse::<usize>().map_err(|_| (PathBuf::from(p), format!("bad row index {r:?}")))?),
            None => (reference, 0),
        };
        let path = base.join(rel);
        if !self.files.contains_key(&path) {
            let bytes = std::fs::read(&path).map_err(|e| (path.clone(), e.to_string()))?;
            if bytes.len() % 4 != 0 {
                return Err((path, "length is not a multiple of 4 bytes".into()));
            }
            let floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            self.files.insert(path.clone(), floats);
        }
        let data = &self.files[&path];
        let start = row * dim;
        data.get(start..start + dim)
            .map(|r| r.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| (path.clone(), format!("row {row} of width {dim} is out of range")))
    }
}

/// Parses a corpus from JSONL text. Feature references resolve against `base`.
pub fn read_corpus<R: BufRead>(reader: R, base: &Path, opts: &IngestOptions) -> Result<Corpus, LoadError> {
    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    let mut dim = opts.feature_dim;
    let mut cache = FeatureCache::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| LoadError::Io { path: base.to_path_buf(), source: e })?;
        if text.trim().is_empty() {
            continue;
        }
        let raw: RawSample =
            serde_json::from_str(&text).map_err(|e| LoadError::Malformed { line: line_no, message: e.to_string() })?;
        let schema = |message: String| LoadError::Schema { line: line_no, message };
        let invalid = |source: CorpusError| LoadError::Invalid { line: line_no, source };

        if !seen.insert(raw.id.clone()) {
            return Err(invalid(CorpusError::DuplicateId(raw.id)));
        }
        let answer_label = label("answer_label", &raw.id, raw.answer_label).map_err(invalid)?;
        let rationale_label = label("rationale_label", &raw.id, raw.rationale_label).map_err(invalid)?;
        let image_feature = match (&raw.img_feature, &raw.img_feature_ref) {
            (Some(v), None) => v.clone(),
            (None, Some(r)) => {
                let d = dim.ok_or_else(|| schema("feature_dim must be set to resolve img_feature_ref".into()))?;
                cache
                    .row(base, r, d)
                    .map_err(|(path, message)| LoadError::FeatureFile { line: line_no, path, message })?
            }
            (Some(_), Some(_)) => return Err(schema("give img_feature or img_feature_ref, not both".into())),
            (None, None) => return Err(schema("missing img_feature or img_feature_ref".into())),
        };
        let d = *dim.get_or_insert(image_feature.len());

        let sample = Sample {
            question: token_list(&raw.question, raw.pos_tags.as_ref(), opts).map_err(schema)?,
            answer_choices: choices("answer_choices", &raw.answer_choices, raw.answer_pos_tags.as_ref(), opts)
                .map_err(schema)?,
            rationale_choices: choices("rationale_choices", &raw.rationale_choices, raw.rationale_pos_tags.as_ref(), opts)
                .map_err(schema)?,
            answer_label,
            rationale_label,
            object_tags: raw.objects,
            image_feature,
            id: raw.id,
        };
        sample.validate(d).map_err(invalid)?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(LoadError::Empty);
    }
    let dim = dim.expect("set by the first sample");
    Corpus::new(samples, dim).map_err(|e| LoadError::Invalid { line: 0, source: e })
}

pub fn load_corpus(path: &Path, opts: &IngestOptions) -> Result<Corpus, LoadError> {
    let file = File::open(path).map_err(|e| LoadError::Io { path: path.to_path_buf(), source: e })?;
    let base = path.parent().unwrap_or(Path::new("."));
    read_corpus(BufReader::new(file), base, opts)
}

fn tags_of(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.pos_tag.map_or(String::new(), |p| p.as_str().to_string())).collect()
}

/// Schema view of a sample with its features inline. Tag arrays are written
/// only when some token carries a tag.
pub fn to_raw(s: &Sample) -> RawSample {
    let words = |ts: &[Token]| ts.iter().map(|t| t.surface().to_string()).collect::<Vec<_>>();
    let tagged = s.all_tokens().any(|t| t.pos_tag.is_some());
    RawSample {
        id: s.id.clone(),
        question: words(&s.question),
        answer_choices: s.answer_choices.iter().map(|c| words(c)).collect(),
        rationale_choices: s.rationale_choices.iter().map(|c| words(c)).collect(),
        answer_label: s.answer_label as i64,
        rationale_label: s.rationale_label as i64,
        objects: s.object_tags.clone(),
        img_feature: Some(s.image_feature.clone()),
        img_feature_ref: None,
        pos_tags: tagged.then(|| tags_of(&s.question)),
        answer_pos_tags: tagged.then(|| s.answer_choices.iter().map(|c| tags_of(c)).collect()),
        rationale_pos_tags: tagged.then(|| s.rationale_choices.iter().map(|c| tags_of(c)).collect()),
    }
}

pub fn write_corpus_to<W: Write>(corpus: &Corpus, mut w: W) -> std::io::Result<()> {
    for s in corpus.samples() {
        serde_json::to_writer(&mut w, &to_raw(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> std::io::Result<()> {
    write_corpus_to(corpus, BufWriter::new(File::create(path)?))
}

/// Writes features as consecutive little-endian f32 rows.
pub fn write_feature_file(rows: &[Vec<f64>], path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        for &x in r {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

/// Reads a plain-text word list (one word per line, `#` comments).
pub fn read_word_list(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|e| LoadError::Io { path: path.to_path_buf(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, label: i64) -> String {
        format!(
            r#"{{"id":"{id}","question":["What","is","person1","holding"],"answer_choices":[["a","Cup"],["b"],["c"],["d"]],"rationale_choices":[["r"],["s"],["t"],["u"]],"answer_label":{label},"rationale_label":1,"objects":["cup"],"img_feature":[0.5,-1.0]}}"#
        )
    }

    fn read(text: &str) -> Result<Corpus, LoadError> {
        read_corpus(text.as_bytes(), Path::new("."), &IngestOptions::default())
    }

    #[test]
    fn two_lines_make_a_corpus() {
        let c = read(&format!("{}\n{}\n", line("a", 0), line("b", 3))).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.feature_dim(), 2);
        assert!(c.vocab().contains("cup"));
        let q = &c.samples()[0].question;
        assert_eq!(q[0].surface(), "what");
        assert!(q[2].is_person_ref());
        assert!(q.iter().all(|t| t.pos_tag.is_none()));
    }

    #[test]
    fn label_out_of_range_names_the_line() {
        let e = read(&format!("{}\n{}\n", line("a", 0), line("b", 5))).unwrap_err();
        assert_eq!(e.line(), Some(2));
        assert!(e.to_string().contains("label out of range"), "{e}");
    }

    #[test]
    fn duplicate_ids_and_bad_json_are_rejected() {
        let e = read(&format!("{}\n{}\n", line("a", 0), line("a", 1))).unwrap_err();
        assert!(matches!(e, LoadError::Invalid { line: 2, source: CorpusError::DuplicateId(_) }));
        let e = read(&format!("{}\n{{oops\n", line("a", 0))).unwrap_err();
        assert!(matches!(e, LoadError::Malformed { line: 2, .. }));
    }

    #[test]
    fn feature_length_must_match() {
        let bad = line("b", 0).replace("[0.5,-1.0]", "[1.0]");
        let e = read(&format!("{}\n{bad}\n", line("a", 0))).unwrap_err();
        assert!(matches!(e, LoadError::Invalid { line: 2, source: CorpusError::FeatureLength { .. } }));
    }

    #[test]
    fn tags_round_trip() {
        let tagged = line("a", 0).replace(r#""objects""#, r#""pos_tags":["PRON","AUX","PROPN","VERB"],"objects""#);
        let c = read(&tagged).unwrap();
        let q = &c.samples()[0].question;
        assert_eq!(q[1].pos_tag, Some(PosTag::Verb));
        assert_eq!(q[2].pos_tag, Some(PosTag::Noun));
        let mut buf = Vec::new();
        write_corpus_to(&c, &mut buf).unwrap();
        assert_eq!(read(std::str::from_utf8(&buf).unwrap()).unwrap(), c);
    }
}
