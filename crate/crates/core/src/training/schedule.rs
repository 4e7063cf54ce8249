use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{aspect_loss, document_loss};
use crate::data::{make_batches, shuffled_indices, Batch, Document, Padded, Sentence};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, SentencePrediction};
use crate::model::{Mode, Model};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph};

/// Epoch counts, batching and stopping rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    /// Document-only epochs before joint training.
    pub pretrain_epochs: usize,
    /// Aspect batches per document batch during joint training.
    pub alternation: usize,
    pub batch_size: usize,
    pub doc_batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Epochs without dev F1-I improvement before stopping; 0 disables.
    pub patience: usize,
    /// Stop once train token accuracy reaches this on all three tasks.
    pub target_accuracy: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 30,
            pretrain_epochs: 2,
            alternation: 1,
            batch_size: 32,
            doc_batch_size: 32,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            patience: 0,
            target_accuracy: None,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.alternation < 1 {
            return Err(Error::Config("alternation ratio must be at least 1".into()));
        }
        if self.batch_size < 1 || self.doc_batch_size < 1 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    #[serde(rename = "J_a")]
    pub j_a: Option<f64>,
    #[serde(rename = "J_d")]
    pub j_d: Option<f64>,
    pub dev: Option<EvalReport>,
    /// Train token accuracy (ate, ote, asc), when a target is set.
    pub train_accuracy: Option<[f64; 3]>,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    /// Best model by dev F1-I, or the last one without a dev set.
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
    /// Loss of every optimisation step, in order.
    pub loss_trace: Vec<f64>,
    /// First joint epoch at which the accuracy target was met.
    pub reached_target: Option<usize>,
}

/// Corpora for one run. Sentences and documents need not be indexed.
pub struct TrainData<'a> {
    pub train: &'a [Sentence],
    pub dev: &'a [Sentence],
    pub documents: &'a [Document],
}

/// Mean loss of one aspect batch; gradients are left in `model.params`.
pub fn aspect_batch_loss(
    model: &mut Model,
    sentences: &[Sentence],
    batch: &Batch,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let net = model.net(&model.params);
    let mut total = None;
    let k = 1.0 / batch.members.len() as f32;
    for &i in &batch.members {
        let input = Padded::from_sentence(&sentences[i], batch.len, model.embeddings.pad_ids());
        let states = net.forward(&mut g, &input, mode, rng, false)?;
        let l = aspect_loss(&mut g, &states, &input, &model.config.lambdas)?.total;
        let l = g.scale(l, k);
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let value = g.scalar_value(total) as f64;
    if value.is_finite() {
        g.backward(total)?;
        model.params.accumulate_from(&g);
    }
    Ok(value)
}

/// Mean loss of one document batch; gradients are left in `model.params`.
pub fn document_batch_loss(
    model: &mut Model,
    docs: &[Document],
    members: &[usize],
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let net = model.net(&model.params);
    let mut total = None;
    let k = 1.0 / members.len() as f32;
    for &i in members {
        let d = &docs[i];
        let (ddc, dsc) = net.document_logits(&mut g, &d.general_ids, &d.domain_ids, mode, rng)?;
        let l = document_loss(&mut g, ddc, dsc, d, &model.config.lambdas)?;
        let l = g.scale(l, k);
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let value = g.scalar_value(total) as f64;
    if value.is_finite() {
        g.backward(total)?;
        model.params.accumulate_from(&g);
    }
    Ok(value)
}

fn update(model: &mut Model, adam: &mut Adam, clip: f64) {
    clip_grad_norm(&mut model.params, clip);
    adam.step(&mut model.params);
}

fn diverged(value: f64, what: String) -> Error {
    Error::Numerical(format!("loss became {value} on {what}"))
}

/// Token accuracy of the final-state argmax: ATE and OTE over every token,
/// ASC over tokens with a gold sentiment.
pub fn token_accuracy(model: &Model, sentences: &[Sentence]) -> Result<[f64; 3]> {
    let mut hit = [0usize; 3];
    let mut tot = [0usize; 3];
    for s in sentences {
        let [ate, ote, asc] = model.infer(s, false)?.labels();
        for i in 0..s.len() {
            tot[0] += 1;
            tot[1] += 1;
            hit[0] += usize::from(ate[i] == s.ate_gold[i]);
            hit[1] += usize::from(ote[i] == s.ote_gold[i]);
            if let Some(g) = s.asc_gold[i] {
                tot[2] += 1;
                hit[2] += usize::from(asc[i] == g);
            }
        }
    }
    Ok([0, 1, 2].map(|k| if tot[k] == 0 { 1.0 } else { hit[k] as f64 / tot[k] as f64 }))
}

/// Predicts every sentence and scores against the gold annotation.
pub fn evaluate_model(model: &Model, sentences: &[Sentence]) -> Result<EvalReport> {
    let mut pred = Vec::with_capacity(sentences.len());
    let mut gold = Vec::with_capacity(sentences.len());
    for s in sentences {
        pred.push(model.predict(s)?);
        gold.push(SentencePrediction::from_gold(s, &model.schemes));
    }
    evaluate(&pred, &gold, &model.schemes.asc)
}

/// Document pretraining, then alternating aspect and document batches.
/// `on_epoch` sees every log record as soon as it is produced.
pub fn train(
    mut model: Model,
    data: TrainData<'_>,
    schedule: &Schedule,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let index = |s: &Sentence| {
        let mut s = s.clone();
        model.index_sentence(&mut s);
        s
    };
    let train: Vec<Sentence> = data.train.iter().map(index).collect();
    let dev: Vec<Sentence> = data.dev.iter().map(index).collect();
    let docs: Vec<Document> = data
        .documents
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| {
            let mut d = d.clone();
            model.embeddings.index_document(&mut d);
            d
        })
        .collect();
    let seed = model.config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut adam = Adam::new(schedule.adam);
    let mut log = Vec::new();
    let mut loss_trace = Vec::new();
    let start = Instant::now();
    let mut doc_round = 0u64;
    let mut doc_queue: Vec<usize> = Vec::new();
    let next_docs = |round: &mut u64, queue: &mut Vec<usize>| -> Vec<usize> {
        if queue.is_empty() {
            *round += 1;
            let mut order = shuffled_indices(docs.len(), seed.wrapping_add(1_000_003 * *round));
            order.reverse();
            *queue = order;
        }
        let take = schedule.doc_batch_size.min(queue.len());
        queue.split_off(queue.len() - take).into_iter().rev().collect()
    };

    if !docs.is_empty() {
        for epoch in 1..=schedule.pretrain_epochs {
            let mut sum = 0.0;
            let order = shuffled_indices(docs.len(), seed.wrapping_add(epoch as u64));
            let chunks: Vec<&[usize]> = order.chunks(schedule.doc_batch_size).collect();
            for (b, members) in chunks.iter().enumerate() {
                let v = document_batch_loss(&mut model, &docs, members, Mode::Train, &mut rng)?;
                if !v.is_finite() {
                    return Err(diverged(v, format!("pretrain epoch {epoch}, document batch {b} {members:?}")));
                }
                update(&mut model, &mut adam, schedule.clip_norm);
                loss_trace.push(v);
                sum += v;
            }
            let rec = EpochLog {
                epoch,
                phase: Phase::Pretrain,
                j_a: None,
                j_d: Some(sum / chunks.len() as f64),
                dev: None,
                train_accuracy: None,
                wall_time_s: start.elapsed().as_secs_f64(),
            };
            on_epoch(&rec)?;
            log.push(rec);
        }
    }

    let mut best: Option<(f64, usize, Model)> = None;
    let mut reached_target = None;
    let mut since_best = 0;
    for epoch in 1..=schedule.epochs {
        let batches = make_batches(&train, schedule.batch_size, seed.wrapping_mul(31).wrapping_add(epoch as u64));
        let (mut sa, mut na, mut sd, mut nd) = (0.0, 0usize, 0.0, 0usize);
        for (b, batch) in batches.iter().enumerate() {
            let v = aspect_batch_loss(&mut model, &train, batch, Mode::Train, &mut rng)?;
            if !v.is_finite() {
                return Err(diverged(v, format!("epoch {epoch}, aspect batch {b} {:?}", batch.members)));
            }
            update(&mut model, &mut adam, schedule.clip_norm);
            loss_trace.push(v);
            sa += v;
            na += 1;
            if !docs.is_empty() && (b + 1) % schedule.alternation == 0 {
                let members = next_docs(&mut doc_round, &mut doc_queue);
                let v = document_batch_loss(&mut model, &docs, &members, Mode::Train, &mut rng)?;
                if !v.is_finite() {
                    return Err(diverged(v, format!("epoch {epoch}, document batch {members:?}")));
                }
                update(&mut model, &mut adam, schedule.clip_norm);
                loss_trace.push(v);
                sd += v;
                nd += 1;
            }
        }
        let dev_report = if dev.is_empty() { None } else { Some(evaluate_model(&model, &dev)?) };
        let train_accuracy = match schedule.target_accuracy {
            Some(_) => Some(token_accuracy(&model, &train)?),
            None => None,
        };
        let rec = EpochLog {
            epoch,
            phase: Phase::Joint,
            j_a: (na > 0).then(|| sa / na as f64),
            j_d: (nd > 0).then(|| sd / nd as f64),
            dev: dev_report.clone(),
            train_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec)?;
        log.push(rec);
        if let Some(r) = dev_report {
            if best.as_ref().map_or(true, |(f, _, _)| r.f1_i > *f) {
                best = Some((r.f1_i, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        if let (Some(target), Some(acc)) = (schedule.target_accuracy, train_accuracy) {
            if acc.iter().all(|&a| a >= target) {
                reached_target = Some(epoch);
                break;
            }
        }
        if schedule.patience > 0 && since_best >= schedule.patience {
            log::info!("no dev improvement for {since_best} epochs, stopping at epoch {epoch}");
            break;
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (model, None),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
        loss_trace,
        reached_target,
    })
}
