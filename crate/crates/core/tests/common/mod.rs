#![allow(dead_code)]

pub mod reference;

use iktn::data::{corpus_vocabulary, Document, DoubleEmbeddings, EmbeddingTable, Sentence, TagSchemes};
use iktn::model::{Mode, Model, ModelConfig};
use iktn::tensor::{Graph, ParamStore, Tensor, Var};
use iktn::training::aspect_loss;
use iktn::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Inputs bounded away from zero, for ops with a kink at the origin.
pub fn random_off_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Largest relative error between backward-pass gradients of
/// `Σ w ⊙ f(inputs)` (random fixed `w`) and central differences.
pub fn fd_max_rel_error<R: Rng>(
    rng: &mut R,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let step = 1e-3;
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.data(out).len()
    };
    let weights: Vec<f64> = (0..probe).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |ins: &[Tensor<f64>], grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone().with_grad(grad))).collect();
        let out = f(&mut g, &vars).unwrap();
        let value: f64 = g.data(out).iter().zip(&weights).map(|(a, b)| a * b).sum();
        if !grad {
            return (value, Vec::new());
        }
        let shape = g.shape(out).to_vec();
        let w = g.constant(&shape, weights.clone()).unwrap();
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.data(v).len()]))
            .collect();
        (value, grads)
    };
    let (_, analytic) = objective(inputs, true);
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= step;
            let numeric = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * step);
            let a = analytic[k][e];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-10 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

pub fn embeddings_for(sentences: &[Sentence], documents: &[Document], c: &ModelConfig) -> DoubleEmbeddings {
    let words = corpus_vocabulary(sentences.iter(), documents.iter());
    DoubleEmbeddings {
        general: EmbeddingTable::random(words.clone(), c.d_general, 11).unwrap(),
        domain: EmbeddingTable::random(words, c.d_domain, 12).unwrap(),
    }
}

/// Small widths that keep whole-model experiments fast.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_general: 12,
        d_domain: 8,
        d_enc: 16,
        d_task: 16,
        d_route: 8,
        dropout: 0.0,
        ..Default::default()
    }
}

pub fn model_for(c: &ModelConfig, sentences: &[Sentence], documents: &[Document]) -> Model {
    Model::new(c.clone(), TagSchemes::default(), embeddings_for(sentences, documents, c)).unwrap()
}

/// Gradients of one aspect task's loss on a model whose only cross-paths
/// are the two document injections.
pub fn task_gradients(task: usize) -> ParamStore<f64> {
    let mut c = small_config();
    c.directions.clear();
    let data = iktn::synth::generate(12, 6, 3);
    let model = model_for(&c, &data.sentences, &data.documents);
    let mut params: ParamStore<f64> = model.params.cast();
    params.zero_grad();
    for s in &data.sentences {
        let input = model.pad(s, s.len());
        let mut g = Graph::new();
        let states = model.net(&params).forward(&mut g, &input, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0), false).unwrap();
        let Some(part) = aspect_loss(&mut g, &states, &input, &c.lambdas).unwrap().parts[task] else { continue };
        g.backward(part).unwrap();
        params.accumulate_from(&g);
    }
    params
}

pub fn grad_norm(p: &ParamStore<f64>, prefix: &str) -> (usize, f64) {
    let mut n = 0;
    let mut total = 0.0;
    for (_, t) in p.iter().filter(|(k, _)| k.starts_with(prefix)) {
        n += 1;
        if let Some(g) = t.grad() {
            total += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    (n, total.sqrt())
}
