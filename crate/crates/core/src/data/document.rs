use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::schemes::TagSchemes;
use crate::error::{Error, Result};

/// Document-level instance for domain and/or sentiment classification.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub sentences: Vec<Vec<String>>,
    pub domain_gold: Option<usize>,
    pub sentiment_gold: Option<usize>,
    pub general_ids: Vec<usize>,
    pub domain_ids: Vec<usize>,
}

impl Document {
    /// All tokens of the document in order.
    pub fn tokens(&self) -> Vec<String> {
        self.sentences.iter().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: String,
    #[serde(default)]
    domain: Option<String>,
    #[serde(default)]
    sentiment: Option<String>,
}

/// Splits whitespace tokens into sentences after `.`, `!` and `?`.
fn split_sentences(text: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for tok in text.split_whitespace() {
        cur.push(tok.to_string());
        if matches!(tok, "." | "!" | "?") {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn parse_document_corpus(text: &str, origin: &str, schemes: &TagSchemes) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fmt_err = |msg: String| Error::Format {
            path: origin.to_string(),
            line: lineno + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| fmt_err(e.to_string()))?;
        let at_line = |e: Error| match e {
            Error::Schema(m) => Error::Schema(format!("{origin}:{}: {m}", lineno + 1)),
            other => other,
        };
        let domain_gold = rec.domain.as_deref().map(|d| schemes.domain_index(d)).transpose().map_err(at_line)?;
        let sentiment_gold = rec.sentiment.as_deref().map(|d| schemes.dsc_index(d)).transpose().map_err(at_line)?;
        if domain_gold.is_none() && sentiment_gold.is_none() {
            return Err(fmt_err("record has neither a domain nor a sentiment label".into()));
        }
        let sentences = split_sentences(&rec.text);
        if sentences.is_empty() {
            return Err(fmt_err("empty document text".into()));
        }
        docs.push(Document {
            sentences,
            domain_gold,
            sentiment_gold,
            general_ids: Vec::new(),
            domain_ids: Vec::new(),
        });
    }
    Ok(docs)
}

pub fn load_document_corpus(path: &Path, schemes: &TagSchemes) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document_corpus(&text, &path.display().to_string(), schemes)
}

/// Serialises documents back to JSONL.
pub fn write_document_corpus(docs: &[Document], schemes: &TagSchemes) -> String {
    let mut out = String::new();
    for d in docs {
        let mut obj = serde_json::Map::new();
        obj.insert("text".into(), d.tokens().join(" ").into());
        if let Some(x) = d.domain_gold {
            obj.insert("domain".into(), schemes.domain[x].clone().into());
        }
        if let Some(x) = d.sentiment_gold {
            obj.insert("sentiment".into(), schemes.dsc[x].clone().into());
        }
        out.push_str(&serde_json::Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}
