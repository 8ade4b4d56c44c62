//! Tokenization, vocabulary construction and TF-IDF vectorization.
//!
//! Weights are raw term counts times the smoothed inverse document frequency
//! `ln((1 + N) / (1 + df)) + 1`, and every document vector is L2-normalized.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const VOCAB_FORMAT_VERSION: u32 = 1;

/// Lower-cases and splits on anything that is not alphanumeric.
///
/// Digit runs joined by hyphens (dispatch codes such as `10-46`) stay a single
/// token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_alphanumeric() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_alphanumeric() {
            i += 1;
        }
        // digit-run '-' digit-run, repeated
        let all_digits = |s: usize, e: usize| chars[s..e].iter().all(|c| c.is_ascii_digit());
        if all_digits(start, i) {
            loop {
                if i + 1 < chars.len() && chars[i] == '-' && chars[i + 1].is_ascii_digit() {
                    let seg = i + 1;
                    let mut j = seg;
                    while j < chars.len() && chars[j].is_alphanumeric() {
                        j += 1;
                    }
                    if all_digits(seg, j) {
                        i = j;
                        continue;
                    }
                }
                break;
            }
        }
        tokens.push(chars[start..i].iter().collect::<String>().to_lowercase());
    }
    tokens
}

/// Unigrams followed by adjacent-pair bigrams joined with a space.
pub fn with_bigrams(tokens: &[String]) -> Vec<String> {
    let mut out = tokens.to_vec();
    out.extend(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermStats {
    pub index: usize,
    pub document_frequency: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum TextFeatError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("min_df must be at least 1")]
    InvalidMinDf,
    #[error("vocabulary file: {0}")]
    File(String),
}

/// Term index and document frequencies over a corpus of `corpus_size` documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: BTreeMap<String, TermStats>,
    by_index: Vec<String>,
    corpus_size: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format_version: u32,
    corpus_size: usize,
    version: String,
    terms: Vec<VocabEntry>,
}

#[derive(Serialize, Deserialize)]
struct VocabEntry {
    term: String,
    index: usize,
    df: usize,
}

impl Vocabulary {
    /// Keeps terms with document frequency >= `min_df`, indexed in
    /// lexicographic order.
    pub fn build<S: AsRef<str>>(docs: &[Vec<S>], min_df: usize) -> Result<Self, TextFeatError> {
        if min_df == 0 {
            return Err(TextFeatError::InvalidMinDf);
        }
        if docs.is_empty() {
            return Err(TextFeatError::EmptyCorpus);
        }
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in docs {
            let distinct: HashSet<&str> = doc.iter().map(|t| t.as_ref()).collect();
            for t in distinct {
                *df.entry(t).or_default() += 1;
            }
        }
        let kept: Vec<(&str, usize)> = df.into_iter().filter(|(_, n)| *n >= min_df).collect();
        let by_index: Vec<String> = kept.iter().map(|(t, _)| t.to_string()).collect();
        let terms = kept
            .into_iter()
            .enumerate()
            .map(|(index, (t, n))| {
                (
                    t.to_string(),
                    TermStats {
                        index,
                        document_frequency: n,
                    },
                )
            })
            .collect();
        Ok(Vocabulary {
            terms,
            by_index,
            corpus_size: docs.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.by_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_index.is_empty()
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn get(&self, term: &str) -> Option<&TermStats> {
        self.terms.get(term)
    }

    pub fn term(&self, index: usize) -> Option<&str> {
        self.by_index.get(index).map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TermStats)> {
        self.terms.iter().map(|(t, s)| (t.as_str(), s))
    }

    pub fn idf(&self, document_frequency: usize) -> f64 {
        ((1.0 + self.corpus_size as f64) / (1.0 + document_frequency as f64)).ln() + 1.0
    }

    /// Content hash identifying this vocabulary; models record it.
    pub fn version(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.corpus_size.to_le_bytes());
        for (t, s) in &self.terms {
            h.update(t.as_bytes());
            h.update([0u8]);
            h.update(s.index.to_le_bytes());
            h.update(s.document_frequency.to_le_bytes());
        }
        hex::encode(&h.finalize()[..12])
    }

    pub fn tfidf<S: AsRef<str>>(&self, tokens: &[S]) -> SparseVector {
        let mut counts: HashMap<usize, (usize, usize)> = HashMap::new();
        for t in tokens {
            if let Some(s) = self.terms.get(t.as_ref()) {
                counts.entry(s.index).or_insert((0, s.document_frequency)).0 += 1;
            }
        }
        let mut entries: Vec<(usize, f64)> = counts
            .into_iter()
            .map(|(idx, (tf, df))| (idx, tf as f64 * self.idf(df)))
            .collect();
        entries.sort_by_key(|(i, _)| *i);
        SparseVector::from_sorted(entries).normalized()
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            format_version: VOCAB_FORMAT_VERSION,
            corpus_size: self.corpus_size,
            version: self.version(),
            terms: self
                .by_index
                .iter()
                .enumerate()
                .map(|(index, t)| VocabEntry {
                    term: t.clone(),
                    index,
                    df: self.terms[t].document_frequency,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TextFeatError> {
        let file: VocabFile =
            serde_json::from_str(s).map_err(|e| TextFeatError::File(e.to_string()))?;
        if file.format_version != VOCAB_FORMAT_VERSION {
            return Err(TextFeatError::File(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        let mut by_index = vec![String::new(); file.terms.len()];
        let mut terms = BTreeMap::new();
        for e in file.terms {
            if e.index >= by_index.len() || !by_index[e.index].is_empty() {
                return Err(TextFeatError::File(format!(
                    "bad index {} for {:?}",
                    e.index, e.term
                )));
            }
            if e.df == 0 || e.df > file.corpus_size {
                return Err(TextFeatError::File(format!(
                    "df out of range for {:?}",
                    e.term
                )));
            }
            by_index[e.index] = e.term.clone();
            terms.insert(
                e.term,
                TermStats {
                    index: e.index,
                    document_frequency: e.df,
                },
            );
        }
        let vocab = Vocabulary {
            terms,
            by_index,
            corpus_size: file.corpus_size,
        };
        if vocab.version() != file.version {
            return Err(TextFeatError::File(
                "version hash does not match contents".into(),
            ));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextFeatError> {
        std::fs::write(path, self.to_json()).map_err(|e| TextFeatError::File(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TextFeatError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextFeatError::File(e.to_string()))?;
        Self::from_json(&text)
    }
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    /// Panics if indices are not strictly increasing.
    pub fn from_sorted(entries: Vec<(usize, f64)>) -> Self {
        assert!(
            entries.windows(2).all(|w| w[0].0 < w[1].0),
            "sparse indices must be strictly increasing"
        );
        SparseVector { entries }
    }

    /// Sorts by index and sums duplicates.
    pub fn from_unsorted(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by_key(|(i, _)| *i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (i, v) in entries {
            match merged.last_mut() {
                Some((j, w)) if *j == i => *w += v,
                _ => merged.push((i, v)),
            }
        }
        SparseVector { entries: merged }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|(_, v)| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return SparseVector::default();
        }
        SparseVector {
            entries: self.entries.into_iter().map(|(i, v)| (i, v / n)).collect(),
        }
    }

    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| dense[i] * v).sum()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|(i, _)| *i)
    }
}

/// Tokenizer plus vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vectorizer {
    pub vocab: Vocabulary,
    pub bigrams: bool,
}

impl Vectorizer {
    pub fn fit<S: AsRef<str>>(
        texts: &[S],
        min_df: usize,
        bigrams: bool,
    ) -> Result<Self, TextFeatError> {
        let docs: Vec<Vec<String>> = texts
            .iter()
            .map(|t| Self::terms_of(t.as_ref(), bigrams))
            .collect();
        Ok(Vectorizer {
            vocab: Vocabulary::build(&docs, min_df)?,
            bigrams,
        })
    }

    fn terms_of(text: &str, bigrams: bool) -> Vec<String> {
        let toks = tokenize(text);
        if bigrams {
            with_bigrams(&toks)
        } else {
            toks
        }
    }

    pub fn transform(&self, text: &str) -> SparseVector {
        self.vocab.tfidf(&Self::terms_of(text, self.bigrams))
    }
}
