use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{aspect_loss, document_loss};
use crate::data::{Document, Sentence};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub threshold: f64,
    /// Breaks the squash backward rule in the analytic pass.
    pub corrupt_squash: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-3,
            threshold: 1e-3,
            corrupt_squash: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    /// Elements whose `±step` evaluations crossed a ReLU kink and were
    /// re-measured with a smaller step.
    pub kinked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub threshold: f64,
    pub params: Vec<ParamCheck>,
    pub passed: bool,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect()
    }
}

/// `|a - n| / max(|a|, |n|)`; pairs that are both below `1e-10` in
/// magnitude compare by absolute difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Smallest step tried when a perturbation straddles a ReLU kink.
const MIN_STEP: f64 = 1e-7;

/// Compares analytic gradients of `objective` against central finite
/// differences for every element of every parameter in `params`.
///
/// A central difference is only meaningful on a single linear piece of
/// every ReLU. When the `±step` evaluations change any ReLU sign relative
/// to the unperturbed point, the step is divided by ten until they agree
/// (down to `1e-7`); such elements are counted in `kinked`.
pub fn check_gradients(
    params: &ParamStore<f64>,
    options: &GradcheckOptions,
    objective: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut g = Graph::new();
    g.set_corrupt_squash(options.corrupt_squash);
    let loss = objective(&mut g, params)?;
    g.backward(loss)?;
    let mut analytic = params.clone();
    analytic.zero_grad();
    analytic.accumulate_from(&g);

    let base_pattern = g.relu_pattern();
    let eval = |p: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut g = Graph::new();
        let l = objective(&mut g, p)?;
        Ok((g.scalar_value(l), g.relu_pattern() == base_pattern))
    };
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut checks = Vec::with_capacity(names.len());
    for name in names {
        let numel = params.get(&name).expect("listed").numel();
        let grad = analytic.get(&name).and_then(|t| t.grad().map(<[f64]>::to_vec)).unwrap_or(vec![0.0; numel]);
        let (mut worst_rel, mut worst_abs, mut worst_index, mut kinked) = (0.0f64, 0.0f64, 0, 0);
        for k in 0..numel {
            let orig = work.get(&name).expect("listed").data()[k];
            let mut step = options.step;
            let numeric = loop {
                work.get_mut(&name).expect("listed").data_mut()[k] = orig + step;
                let (plus, same_p) = eval(&work)?;
                work.get_mut(&name).expect("listed").data_mut()[k] = orig - step;
                let (minus, same_m) = eval(&work)?;
                work.get_mut(&name).expect("listed").data_mut()[k] = orig;
                if (same_p && same_m) || step / 10.0 < MIN_STEP {
                    break (plus - minus) / (2.0 * step);
                }
                step /= 10.0;
            };
            if step < options.step {
                kinked += 1;
            }
            let rel = relative_error(grad[k], numeric);
            if !rel.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for `{name}`[{k}]")));
            }
            if rel > worst_rel {
                worst_rel = rel;
                worst_index = k;
            }
            worst_abs = worst_abs.max((grad[k] - numeric).abs());
        }
        checks.push(ParamCheck {
            name,
            numel,
            max_rel_err: worst_rel,
            max_abs_err: worst_abs,
            worst_index,
            kinked,
            passed: worst_rel < options.threshold,
        });
    }
    Ok(GradcheckReport {
        step: options.step,
        threshold: options.threshold,
        passed: checks.iter().all(|c| c.passed),
        params: checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Gradient check of `J_a` on `sentence` plus `J_d` on `document`, run in
/// 64-bit with dropout disabled.
pub fn gradcheck(
    model: &Model,
    sentence: &Sentence,
    document: Option<&Document>,
    options: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let params: ParamStore<f64> = model.params.cast();
    let input = model.pad(sentence, sentence.len());
    let doc = document.map(|d| {
        let mut d = d.clone();
        model.embeddings.index_document(&mut d);
        d
    });
    check_gradients(&params, options, |g, p| {
        let net = model.net(p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let states = net.forward(g, &input, Mode::Eval, &mut rng, false)?;
        let mut loss = aspect_loss(g, &states, &input, &model.config.lambdas)?.total;
        if let Some(d) = &doc {
            let (ddc, dsc) = net.document_logits(g, &d.general_ids, &d.domain_ids, Mode::Eval, &mut rng)?;
            let jd = document_loss(g, ddc, dsc, d, &model.config.lambdas)?;
            loss = g.add(loss, jd)?;
        }
        Ok(loss)
    })
}
