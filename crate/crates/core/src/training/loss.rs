use crate::data::{Document, Padded};
use crate::error::{Error, Result};
use crate::model::IterationState;
use crate::tensor::{Graph, Scalar, Var};

/// Weighted aspect-level loss and its unweighted per-task parts.
#[derive(Clone, Copy, Debug)]
pub struct AspectLoss {
    pub total: Var,
    /// `L_ate`, `L_ote`, `L_asc`; `None` for ASC when no token is labelled.
    pub parts: [Option<Var>; 3],
}

/// `λ1 L_ate + λ2 L_ote + λ3 L_asc` on the final state. Each term is the
/// mean token cross-entropy over unpadded tokens (ASC: over labelled ones).
pub fn aspect_loss<F: Scalar>(
    g: &mut Graph<F>,
    states: &[IterationState],
    input: &Padded,
    lambdas: &[f64; 5],
) -> Result<AspectLoss> {
    let last = states.last().ok_or_else(|| Error::Contract("no iteration states".into()))?;
    let n = input.n;
    if n == 0 {
        return Err(Error::Contract("aspect loss of an empty sentence".into()));
    }
    let tags = |gold: &[usize]| -> Vec<Option<usize>> {
        gold.iter().zip(&input.mask).map(|(&t, &m)| m.then_some(t)).collect()
    };
    let asc: Vec<Option<usize>> = input.asc.iter().zip(&input.mask).map(|(&t, &m)| t.filter(|_| m)).collect();
    let labelled = asc.iter().filter(|t| t.is_some()).count();
    let targets = [(tags(&input.ate), n), (tags(&input.ote), n), (asc, labelled)];
    let mut parts = [None; 3];
    let mut total: Option<Var> = None;
    for (k, (t, count)) in targets.iter().enumerate() {
        if *count == 0 {
            continue;
        }
        let ce = g.cross_entropy(last.logits[k], t)?;
        let mean = g.scale(ce, F::lit(1.0 / *count as f64));
        parts[k] = Some(mean);
        let weighted = g.scale(mean, F::lit(lambdas[k]));
        total = Some(match total {
            Some(acc) => g.add(acc, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("ate term always present");
    Ok(AspectLoss { total, parts })
}

/// `λ4 L_ddc + λ5 L_dsc`, each term present only if the label is.
pub fn document_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits_ddc: Var,
    logits_dsc: Var,
    doc: &Document,
    lambdas: &[f64; 5],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (logits, gold, lambda) in [
        (logits_ddc, doc.domain_gold, lambdas[3]),
        (logits_dsc, doc.sentiment_gold, lambdas[4]),
    ] {
        let Some(gold) = gold else { continue };
        let ce = g.cross_entropy(logits, &[Some(gold)])?;
        let w = g.scale(ce, F::lit(lambda));
        total = Some(match total {
            Some(acc) => g.add(acc, w)?,
            None => w,
        });
    }
    total.ok_or_else(|| Error::Contract("document without any label".into()))
}
