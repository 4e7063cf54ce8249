//! Span-level evaluation: F1-a, F1-o, acc-s, F1-s and F1-I.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Sentence, Span, TagSchemes};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub span: Span,
    pub sentiment: Option<String>,
}

/// One line of the prediction file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePrediction {
    pub tokens: Vec<String>,
    pub ate_spans: Vec<Span>,
    pub ote_spans: Vec<Span>,
    pub pairs: Vec<SpanPrediction>,
}

impl SentencePrediction {
    /// The gold annotation in prediction form.
    pub fn from_gold(s: &Sentence, schemes: &TagSchemes) -> Self {
        SentencePrediction {
            tokens: s.tokens.clone(),
            ate_spans: s.aspect_spans(),
            ote_spans: s.opinion_spans(),
            pairs: s
                .gold_pairs()
                .into_iter()
                .map(|(span, k)| SpanPrediction {
                    span,
                    sentiment: Some(schemes.asc[k].clone()),
                })
                .collect(),
        }
    }
}

/// Precision, recall and F1 with their counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
    }
}

fn count<T: Ord>(pred: BTreeSet<T>, gold: BTreeSet<T>) -> Prf {
    let tp = pred.intersection(&gold).count();
    prf(tp, pred.len() - tp, gold.len() - tp)
}

/// Exact-match span F1, micro-averaged over sentences.
pub fn span_f1(pred: &[Vec<Span>], gold: &[Vec<Span>]) -> Prf {
    let tag = |v: &[Vec<Span>]| -> BTreeSet<(usize, Span)> {
        v.iter().enumerate().flat_map(|(i, s)| s.iter().map(move |&sp| (i, sp))).collect()
    };
    count(tag(pred), tag(gold))
}

/// Exact `(span, sentiment)` match F1, micro-averaged.
pub fn f1_i(pred: &[Vec<SpanPrediction>], gold: &[Vec<SpanPrediction>]) -> Prf {
    let tag = |v: &[Vec<SpanPrediction>]| -> BTreeSet<(usize, Span, String)> {
        v.iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.iter()
                    .filter_map(move |p| p.sentiment.clone().map(|lab| (i, p.span, lab)))
            })
            .collect()
    };
    count(tag(pred), tag(gold))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscScores {
    pub acc_s: f64,
    pub f1_s: f64,
    /// Predicted spans that exactly match a gold span.
    pub matched: usize,
    pub correct: usize,
    pub per_class: Vec<ClassScore>,
    /// Set when no predicted span matched, so both scores are 0 by convention.
    pub no_matched_spans: bool,
}

/// Sentiment accuracy and macro-F1 over correctly extracted spans only.
/// The macro average always divides by the full label count.
pub fn asc_scores(pred: &[Vec<SpanPrediction>], gold: &[Vec<SpanPrediction>], labels: &[String]) -> AscScores {
    let mut outcomes: Vec<(Option<&str>, &str)> = Vec::new();
    for (p, g) in pred.iter().zip(gold) {
        for pp in p {
            if let Some(gp) = g.iter().find(|gp| gp.span == pp.span) {
                if let Some(gl) = gp.sentiment.as_deref() {
                    outcomes.push((pp.sentiment.as_deref(), gl));
                }
            }
        }
    }
    let matched = outcomes.len();
    let correct = outcomes.iter().filter(|(p, g)| *p == Some(*g)).count();
    let per_class: Vec<ClassScore> = labels
        .iter()
        .map(|lab| {
            let l = Some(lab.as_str());
            let tp = outcomes.iter().filter(|(p, g)| *p == l && Some(*g) == l).count();
            let fp = outcomes.iter().filter(|(p, g)| *p == l && Some(*g) != l).count();
            let fn_ = outcomes.iter().filter(|(p, g)| *p != l && Some(*g) == l).count();
            let s = prf(tp, fp, fn_);
            ClassScore {
                label: lab.clone(),
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
            }
        })
        .collect();
    let f1_s = if labels.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.f1).sum::<f64>() / labels.len() as f64
    };
    AscScores {
        acc_s: ratio(correct, matched),
        f1_s,
        matched,
        correct,
        per_class,
        no_matched_spans: matched == 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_a: f64,
    pub f1_o: f64,
    pub f1_s: f64,
    pub acc_s: f64,
    pub f1_i: f64,
    pub sentences: usize,
    pub ate: Prf,
    pub ote: Prf,
    pub pairs: Prf,
    pub asc: AscScores,
}

impl EvalReport {
    /// Metric names and values in reporting order.
    pub fn columns(&self) -> [(&'static str, f64); 5] {
        [
            ("F1-a", self.f1_a),
            ("F1-o", self.f1_o),
            ("F1-s", self.f1_s),
            ("acc-s", self.acc_s),
            ("F1-I", self.f1_i),
        ]
    }

    /// Aligned two-line table, values in percent.
    pub fn table(&self) -> String {
        let cols = self.columns();
        let head: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>8}")).collect();
        let vals: Vec<String> = cols.iter().map(|(_, v)| format!("{:>8.2}", v * 100.0)).collect();
        format!("{}\n{}", head.join(""), vals.join(""))
    }
}

/// All five metrics for parallel prediction/gold lists.
pub fn evaluate(pred: &[SentencePrediction], gold: &[SentencePrediction], labels: &[String]) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let ate = span_f1(
        &pred.iter().map(|p| p.ate_spans.clone()).collect::<Vec<_>>(),
        &gold.iter().map(|p| p.ate_spans.clone()).collect::<Vec<_>>(),
    );
    let ote = span_f1(
        &pred.iter().map(|p| p.ote_spans.clone()).collect::<Vec<_>>(),
        &gold.iter().map(|p| p.ote_spans.clone()).collect::<Vec<_>>(),
    );
    let pp: Vec<Vec<SpanPrediction>> = pred.iter().map(|p| p.pairs.clone()).collect();
    let gp: Vec<Vec<SpanPrediction>> = gold.iter().map(|p| p.pairs.clone()).collect();
    let pairs = f1_i(&pp, &gp);
    let asc = asc_scores(&pp, &gp, labels);
    Ok(EvalReport {
        f1_a: ate.f1,
        f1_o: ote.f1,
        f1_s: asc.f1_s,
        acc_s: asc.acc_s,
        f1_i: pairs.f1,
        sentences: pred.len(),
        ate,
        ote,
        pairs,
        asc,
    })
}

pub fn write_predictions(path: &Path, preds: &[SentencePrediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<SentencePrediction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
