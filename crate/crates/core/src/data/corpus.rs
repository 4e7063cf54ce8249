//! Aspect-level corpus: CoNLL-style TSV plus an adjacency sidecar.
//!
//! One token per line with four tab-separated columns
//! `token  ate-tag  ote-tag  asc-tag-or-_`, blank line between sentences.
//! The sidecar holds `<sentence-index> <i> <j>` edge lines (0-based).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::schemes::{Bio, TagSchemes, BIO};
use crate::error::{Error, Result};

pub type Span = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub ate_gold: Vec<usize>,
    pub ote_gold: Vec<usize>,
    pub asc_gold: Vec<Option<usize>>,
    /// Row-major `n×n`, symmetric with unit diagonal.
    pub adjacency: Vec<bool>,
    pub general_ids: Vec<usize>,
    pub domain_ids: Vec<usize>,
}

impl Sentence {
    /// Builds a sentence with identity adjacency and unassigned embedding ids.
    pub fn new(
        tokens: Vec<String>,
        ate_gold: Vec<usize>,
        ote_gold: Vec<usize>,
        asc_gold: Vec<Option<usize>>,
    ) -> Self {
        let n = tokens.len();
        Sentence {
            tokens,
            ate_gold,
            ote_gold,
            asc_gold,
            adjacency: identity_adjacency(n),
            general_ids: Vec::new(),
            domain_ids: Vec::new(),
        }
    }

    /// Unlabelled sentence for inference: all tags `O`, no sentiment.
    pub fn unlabeled(tokens: Vec<String>) -> Self {
        let n = tokens.len();
        Sentence::new(tokens, vec![BIO.outside; n], vec![BIO.outside; n], vec![None; n])
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn aspect_spans(&self) -> Vec<Span> {
        extract_spans(&self.ate_gold, BIO)
    }

    pub fn opinion_spans(&self) -> Vec<Span> {
        extract_spans(&self.ote_gold, BIO)
    }

    /// Gold `(span, sentiment)` pairs; a span's sentiment is read from its
    /// first token.
    pub fn gold_pairs(&self) -> Vec<(Span, usize)> {
        self.aspect_spans()
            .into_iter()
            .filter_map(|s| self.asc_gold[s.0].map(|p| (s, p)))
            .collect()
    }

    /// Adds undirected edges, keeping the matrix symmetric.
    pub fn set_edges(&mut self, edges: &[(usize, usize)]) -> Result<()> {
        let n = self.len();
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Index {
                    what: "adjacency",
                    index: i.max(j),
                    len: n,
                });
            }
            self.adjacency[i * n + j] = true;
            self.adjacency[j * n + i] = true;
        }
        Ok(())
    }

    /// Checks every structural invariant; `index` is used in error messages.
    pub fn validate(&self, index: usize) -> Result<()> {
        let n = self.len();
        let bad = |msg: String| Error::Validation { sentence: index, msg };
        if n == 0 {
            return Err(bad("empty sentence".into()));
        }
        if self.ate_gold.len() != n || self.ote_gold.len() != n || self.asc_gold.len() != n {
            return Err(bad("tag sequences differ in length from the token list".into()));
        }
        if let Some(p) = first_bio_violation(&self.ate_gold, BIO) {
            return Err(bad(format!("ATE inside tag without a preceding begin at token {p}")));
        }
        if let Some(p) = first_bio_violation(&self.ote_gold, BIO) {
            return Err(bad(format!("OTE inside tag without a preceding begin at token {p}")));
        }
        let in_aspect = span_membership(&self.aspect_spans(), n);
        for (i, (&inside, asc)) in in_aspect.iter().zip(&self.asc_gold).enumerate() {
            if inside != asc.is_some() {
                return Err(bad(format!(
                    "token {i}: sentiment label must be present exactly on aspect tokens"
                )));
            }
        }
        if self.adjacency.len() != n * n {
            return Err(bad("adjacency is not n×n".into()));
        }
        for i in 0..n {
            if !self.adjacency[i * n + i] {
                return Err(bad(format!("adjacency diagonal missing at {i}")));
            }
            for j in 0..i {
                if self.adjacency[i * n + j] != self.adjacency[j * n + i] {
                    return Err(bad(format!("adjacency not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

pub fn identity_adjacency(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n == k % n).collect()
}

/// Chain adjacency: each token linked to its neighbours, plus self-loops.
pub fn chain_edges(n: usize) -> Vec<(usize, usize)> {
    (1..n).map(|i| (i - 1, i)).collect()
}

fn span_membership(spans: &[Span], n: usize) -> Vec<bool> {
    let mut inside = vec![false; n];
    for &(s, e) in spans {
        inside[s..e].iter_mut().for_each(|x| *x = true);
    }
    inside
}

/// Position of the first inside tag that follows neither a begin nor an
/// inside tag, if any.
pub fn first_bio_violation(tags: &[usize], bio: Bio) -> Option<usize> {
    let mut prev = bio.outside;
    for (i, &t) in tags.iter().enumerate() {
        if t == bio.inside && prev == bio.outside {
            return Some(i);
        }
        prev = t;
    }
    None
}

pub fn is_valid_bio(tags: &[usize], bio: Bio) -> bool {
    tags.iter().all(|&t| t == bio.begin || t == bio.inside || t == bio.outside)
        && first_bio_violation(tags, bio).is_none()
}

/// Maximal begin-then-inside runs as `(start, end)` with exclusive end.
/// Decoding is lenient: an inside tag with no open span starts one.
pub fn extract_spans(tags: &[usize], bio: Bio) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &t) in tags.iter().enumerate() {
        if t == bio.begin {
            if let Some(s) = open.take() {
                spans.push((s, i));
            }
            open = Some(i);
        } else if t == bio.inside {
            if open.is_none() {
                open = Some(i);
            }
        } else if let Some(s) = open.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = open {
        spans.push((s, tags.len()));
    }
    spans
}

/// Inverse of [`extract_spans`] for disjoint spans.
pub fn tags_from_spans(spans: &[Span], n: usize, bio: Bio) -> Vec<usize> {
    let mut tags = vec![bio.outside; n];
    for &(s, e) in spans {
        tags[s] = bio.begin;
        tags[s + 1..e].iter_mut().for_each(|t| *t = bio.inside);
    }
    tags
}

/// Corpus-level counts in the shape of a dataset statistics table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub sentences: usize,
    pub aspect_terms: usize,
    pub opinion_terms: usize,
}

pub fn corpus_stats(sentences: &[Sentence]) -> CorpusStats {
    CorpusStats {
        sentences: sentences.len(),
        aspect_terms: sentences.iter().map(|s| s.aspect_spans().len()).sum(),
        opinion_terms: sentences.iter().map(|s| s.opinion_spans().len()).sum(),
    }
}

/// Parses the TSV corpus text. `origin` names the source in error messages.
pub fn parse_aspect_corpus(text: &str, origin: &str, schemes: &TagSchemes) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut cur: Vec<(String, usize, usize, Option<usize>)> = Vec::new();
    let mut flush = |cur: &mut Vec<(String, usize, usize, Option<usize>)>| -> Result<()> {
        if cur.is_empty() {
            return Ok(());
        }
        let rows = std::mem::take(cur);
        let mut s = Sentence::new(
            rows.iter().map(|r| r.0.clone()).collect(),
            rows.iter().map(|r| r.1).collect(),
            rows.iter().map(|r| r.2).collect(),
            rows.iter().map(|r| r.3).collect(),
        );
        s.adjacency = identity_adjacency(s.len());
        s.validate(sentences.len())?;
        sentences.push(s);
        Ok(())
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut cur)?;
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let fmt_err = |msg: String| Error::Format {
            path: origin.to_string(),
            line: lineno + 1,
            msg,
        };
        if cols.len() != 4 {
            return Err(fmt_err(format!("expected 4 tab-separated columns, found {}", cols.len())));
        }
        let at_line = |e: Error| match e {
            Error::Schema(m) => Error::Schema(format!("{origin}:{}: {m}", lineno + 1)),
            other => other,
        };
        let ate = schemes.ate_index(cols[1]).map_err(at_line)?;
        let ote = schemes.ote_index(cols[2]).map_err(at_line)?;
        let asc = match cols[3] {
            "_" => None,
            tag => Some(schemes.asc_index(tag).map_err(at_line)?),
        };
        cur.push((cols[0].to_string(), ate, ote, asc));
    }
    flush(&mut cur)?;
    Ok(sentences)
}

pub fn load_aspect_corpus(path: &Path, schemes: &TagSchemes) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_aspect_corpus(&text, &path.display().to_string(), schemes)
}

/// Applies an adjacency sidecar to already-loaded sentences.
pub fn parse_adjacency(text: &str, origin: &str, sentences: &mut [Sentence]) -> Result<()> {
    let mut edges: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fmt_err = |msg: String| Error::Format {
            path: origin.to_string(),
            line: lineno + 1,
            msg,
        };
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(|x| x.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| fmt_err(format!("bad edge `{line}`: {e}")))?;
        let [k, i, j] = nums[..] else {
            return Err(fmt_err(format!("expected `<sentence> <i> <j>`, got `{line}`")));
        };
        let n = sentences
            .get(k)
            .ok_or_else(|| fmt_err(format!("sentence index {k} out of range")))?
            .len();
        if i >= n || j >= n {
            return Err(fmt_err(format!("edge ({i}, {j}) out of range for sentence {k} of length {n}")));
        }
        edges.entry(k).or_default().push((i, j));
    }
    for (k, es) in edges {
        sentences[k].set_edges(&es)?;
    }
    Ok(())
}

pub fn load_adjacency(path: &Path, sentences: &mut [Sentence]) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_adjacency(&text, &path.display().to_string(), sentences)
}

/// Writes sentences back to the TSV format.
pub fn write_aspect_corpus(sentences: &[Sentence], schemes: &TagSchemes) -> String {
    let mut out = String::new();
    for s in sentences {
        for i in 0..s.len() {
            let asc = s.asc_gold[i].map_or("_", |p| schemes.asc[p].as_str());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                s.tokens[i], schemes.ate[s.ate_gold[i]], schemes.ote[s.ote_gold[i]], asc
            ));
        }
        out.push('\n');
    }
    out
}

/// Writes the off-diagonal upper-triangle edges of every sentence.
pub fn write_adjacency(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for (k, s) in sentences.iter().enumerate() {
        let n = s.len();
        for i in 0..n {
            for j in i + 1..n {
                if s.adjacency[i * n + j] {
                    out.push_str(&format!("{k} {i} {j}\n"));
                }
            }
        }
    }
    out
}
