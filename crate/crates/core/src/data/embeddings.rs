use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::Sentence;
use super::document::Document;
use crate::error::{Error, Result};

/// Half-width of the uniform range used for randomly initialised rows.
pub const RANDOM_INIT_RANGE: f32 = 0.25;

/// Word vectors with two reserved trailing rows: unknown, then padding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    words: Vec<String>,
    vocab: HashMap<String, usize>,
    dim: usize,
    matrix: Vec<f32>,
    /// Words that appeared more than once in the source file, with the line
    /// of the ignored occurrence.
    pub duplicates: Vec<(String, usize)>,
}

#[derive(Clone, Debug, Default)]
pub enum VocabPolicy {
    #[default]
    All,
    /// Keep only the listed words.
    Restrict(HashSet<String>),
}

impl EmbeddingTable {
    /// Builds a table from words and their row-major vectors; unk and pad
    /// rows are appended (unk = `unk_row`, pad = zeros).
    pub fn from_rows(words: Vec<String>, dim: usize, mut matrix: Vec<f32>, unk_row: Vec<f32>) -> Result<Self> {
        if dim == 0 || matrix.len() != words.len() * dim || unk_row.len() != dim {
            return Err(Error::Contract("embedding rows do not match the vocabulary".into()));
        }
        let mut vocab = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if vocab.insert(w.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate word `{w}`")));
            }
        }
        matrix.extend(unk_row);
        matrix.extend(std::iter::repeat(0.0).take(dim));
        Ok(EmbeddingTable {
            words,
            vocab,
            dim,
            matrix,
            duplicates: Vec::new(),
        })
    }

    /// Every row (unk included) uniform in `±RANDOM_INIT_RANGE`; pad is zero.
    pub fn random(words: Vec<String>, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |k: usize| -> Vec<f32> {
            (0..k)
                .map(|_| rng.gen_range(-RANDOM_INIT_RANGE..RANDOM_INIT_RANGE))
                .collect()
        };
        let matrix = draw(words.len() * dim);
        let unk = draw(dim);
        Self::from_rows(words, dim, matrix, unk)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rows including unk and pad.
    pub fn rows(&self) -> usize {
        self.words.len() + 2
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn unk_index(&self) -> usize {
        self.words.len()
    }

    pub fn pad_index(&self) -> usize {
        self.words.len() + 1
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, id: usize) -> &[f32] {
        &self.matrix[id * self.dim..(id + 1) * self.dim]
    }

    pub fn index(&self, word: &str) -> usize {
        self.vocab.get(word).copied().unwrap_or(self.unk_index())
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.index(t)).collect()
    }

    /// Replaces the matrix (unk and pad rows included); used when restoring
    /// from a checkpoint.
    pub fn with_matrix(mut self, matrix: Vec<f32>) -> Result<Self> {
        if matrix.len() != self.matrix.len() {
            return Err(Error::Checkpoint("embedding matrix size mismatch".into()));
        }
        self.matrix = matrix;
        Ok(self)
    }
}

/// Reads word2vec text format: optional `count dim` header, then
/// `word v1 v2 ...` per line. The first occurrence of a word wins.
pub fn load_embeddings(path: &Path, policy: &VocabPolicy) -> Result<EmbeddingTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut words = Vec::new();
    let mut seen = HashSet::new();
    let mut matrix = Vec::new();
    let mut dim: Option<usize> = None;
    let mut duplicates = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fmt_err = |msg: String| Error::Format {
            path: origin.clone(),
            line: lineno + 1,
            msg,
        };
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if lineno == 0 && rest.len() == 1 {
            if let (Ok(_), Ok(d)) = (word.parse::<usize>(), rest[0].parse::<usize>()) {
                dim = Some(d);
                continue;
            }
        }
        match dim {
            None => dim = Some(rest.len()),
            Some(d) if d != rest.len() => {
                return Err(fmt_err(format!("expected {d} components, found {}", rest.len())));
            }
            _ => {}
        }
        if rest.is_empty() {
            return Err(fmt_err("word without a vector".into()));
        }
        if !seen.insert(word.to_string()) {
            log::warn!("{origin}:{}: duplicate word `{word}` ignored", lineno + 1);
            duplicates.push((word.to_string(), lineno + 1));
            continue;
        }
        if let VocabPolicy::Restrict(keep) = policy {
            if !keep.contains(word) {
                continue;
            }
        }
        for x in &rest {
            let v: f32 = x.parse().map_err(|_| fmt_err(format!("bad float `{x}`")))?;
            matrix.push(v);
        }
        words.push(word.to_string());
    }
    let dim = dim.filter(|&d| d > 0).ok_or_else(|| Error::Format {
        path: origin.clone(),
        line: 0,
        msg: "no vectors found".into(),
    })?;
    let mut table = EmbeddingTable::from_rows(words, dim, matrix, vec![0.0; dim])?;
    table.duplicates = duplicates;
    Ok(table)
}

/// General-purpose and domain-specific tables, concatenated per token.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleEmbeddings {
    pub general: EmbeddingTable,
    pub domain: EmbeddingTable,
}

impl DoubleEmbeddings {
    pub fn dim(&self) -> usize {
        self.general.dim() + self.domain.dim()
    }

    pub fn index_sentence(&self, s: &mut Sentence) {
        s.general_ids = self.general.ids(&s.tokens);
        s.domain_ids = self.domain.ids(&s.tokens);
    }

    pub fn index_document(&self, d: &mut Document) {
        let toks = d.tokens();
        d.general_ids = self.general.ids(&toks);
        d.domain_ids = self.domain.ids(&toks);
    }

    pub fn pad_ids(&self) -> (usize, usize) {
        (self.general.pad_index(), self.domain.pad_index())
    }

    /// Concatenated `[general | domain]` rows for a token sequence.
    pub fn gather(&self, general_ids: &[usize], domain_ids: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(general_ids.len() * self.dim());
        for (&g, &d) in general_ids.iter().zip(domain_ids) {
            out.extend_from_slice(self.general.row(g));
            out.extend_from_slice(self.domain.row(d));
        }
        out
    }
}

/// Sorted, de-duplicated vocabulary of every token in the corpora.
pub fn corpus_vocabulary<'a>(
    sentences: impl IntoIterator<Item = &'a Sentence>,
    documents: impl IntoIterator<Item = &'a Document>,
) -> Vec<String> {
    let mut set: HashSet<&str> = HashSet::new();
    let sentences: Vec<&Sentence> = sentences.into_iter().collect();
    let documents: Vec<&Document> = documents.into_iter().collect();
    for s in &sentences {
        set.extend(s.tokens.iter().map(String::as_str));
    }
    for d in &documents {
        for sent in &d.sentences {
            set.extend(sent.iter().map(String::as_str));
        }
    }
    let mut words: Vec<String> = set.into_iter().map(str::to_string).collect();
    words.sort();
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_words_give_four_rows() {
        let f = write_tmp("2 3\ncat 1 2 3\ndog 4 5 6\n");
        let t = load_embeddings(f.path(), &VocabPolicy::All).unwrap();
        assert_eq!(t.rows(), 4);
        assert_eq!(t.dim(), 3);
        assert_eq!(t.row(t.index("dog")), &[4.0, 5.0, 6.0]);
        assert_eq!(t.index("zebra"), t.unk_index());
        assert!(t.row(t.pad_index()).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn header_is_optional() {
        let f = write_tmp("cat 1 2\ndog 3 4\n");
        let t = load_embeddings(f.path(), &VocabPolicy::All).unwrap();
        assert_eq!((t.rows(), t.dim()), (4, 2));
    }

    #[test]
    fn duplicate_word_first_wins() {
        let f = write_tmp("cat 1 2\ncat 9 9\n");
        let t = load_embeddings(f.path(), &VocabPolicy::All).unwrap();
        assert_eq!(t.row(t.index("cat")), &[1.0, 2.0]);
        assert_eq!(t.duplicates, vec![("cat".to_string(), 2)]);
    }

    #[test]
    fn ragged_rows_report_line() {
        let f = write_tmp("cat 1 2\ndog 3\n");
        let err = load_embeddings(f.path(), &VocabPolicy::All).unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }));
    }

    #[test]
    fn restrict_policy_filters() {
        let f = write_tmp("cat 1\ndog 2\nemu 3\n");
        let keep: HashSet<String> = ["dog".to_string()].into();
        let t = load_embeddings(f.path(), &VocabPolicy::Restrict(keep)).unwrap();
        assert_eq!(t.words(), &["dog".to_string()]);
    }

    #[test]
    fn random_rows_within_bounds() {
        let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
        let t = EmbeddingTable::random(words, 16, 3).unwrap();
        let body = &t.matrix()[..t.unk_index() * 16 + 16];
        assert!(body.iter().all(|x| x.abs() <= RANDOM_INIT_RANGE));
        let (lo, hi) = body.iter().fold((1.0f32, -1.0f32), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(lo < -0.24 && hi > 0.24, "range not covered: {lo} {hi}");
        let mean: f32 = body.iter().sum::<f32>() / body.len() as f32;
        assert!(mean.abs() < 0.01);
        assert!(t.row(t.pad_index()).iter().all(|&x| x == 0.0));
        assert_eq!(t, EmbeddingTable::random(t.words().to_vec(), 16, 3).unwrap());
    }
}
