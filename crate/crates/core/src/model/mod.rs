//! The full network: shared encoding, task features, routing between the
//! aspect-level tasks, aggregation with document signals, and decoding,
//! repeated for `T` iterations.

mod checkpoint;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{read_header, CheckpointHeader, ManifestEntry, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC};
pub use config::{Ablation, ModelConfig};

use crate::data::{extract_spans, DoubleEmbeddings, Padded, Sentence, TagSchemes, BIO};
use crate::error::{Error, Result};
use crate::layers::{
    affine, decode_tokens, doc_attend, encode_shared, init_affine, init_decoders, init_encoder, init_heads,
    init_task_layers, task_features, LayerDims, Task,
};
use crate::metrics::{SentencePrediction, SpanPrediction};
use crate::routing::{init_direction, predict_vectors, route, Direction, PositionalEncoding, RoutingSnapshot};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Document-level signals computed from the sentence itself.
#[derive(Clone, Copy, Debug)]
pub struct DocSignals {
    /// Attention weights `[n]`.
    pub a_ddc: Var,
    pub a_dsc: Var,
    pub logits_ddc: Var,
    pub logits_dsc: Var,
    pub y_ddc: Var,
    pub y_dsc: Var,
}

/// Routing performed while producing a state.
#[derive(Clone, Debug)]
pub struct RouteTrace {
    pub direction: Direction,
    pub snapshots: Vec<RoutingSnapshot>,
}

/// Hidden sequences and predictions at iteration `t`, indexed in
/// `Task::ASPECT` order.
#[derive(Clone, Debug)]
pub struct IterationState {
    pub t: usize,
    pub hidden: [Var; 3],
    pub logits: [Var; 3],
    pub probs: [Var; 3],
    pub doc: DocSignals,
    pub routes: Vec<RouteTrace>,
}

/// Borrowed view of everything a forward pass needs.
pub struct Net<'a, F: Scalar> {
    pub config: &'a ModelConfig,
    pub dims: &'a LayerDims,
    pub params: &'a ParamStore<F>,
    pub embeddings: &'a DoubleEmbeddings,
    pub pe: &'a PositionalEncoding,
}

fn group_rng(seed: u64, group: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group);
    rng
}

fn aspect(q: Task) -> usize {
    q.aspect_index().expect("aspect task")
}

/// Initialises every parameter the configuration calls for. Each group
/// draws from its own stream, so removing one group leaves the others
/// bit-identical.
pub fn init_params<F: Scalar>(config: &ModelConfig, dims: &LayerDims) -> ParamStore<F> {
    let mut p = ParamStore::new();
    init_encoder(&mut p, dims, &mut group_rng(config.seed, 0));
    init_task_layers(&mut p, dims, &mut group_rng(config.seed, 1));
    init_decoders(&mut p, dims, &mut group_rng(config.seed, 2));
    init_heads(&mut p, dims, &mut group_rng(config.seed, 3));
    for dir in Direction::ALL.into_iter().filter(|d| config.is_enabled(*d)) {
        let mut rng = group_rng(config.seed, 10 + dir.index() as u64);
        init_direction(&mut p, dir, dims.d_task, config.d_route, &mut rng);
    }
    for q in Task::ASPECT {
        let k = config.incoming(q).len();
        if k > 0 {
            let mut rng = group_rng(config.seed, 20 + aspect(q) as u64);
            init_affine(&mut p, &format!("transfer.{q}"), dims.d_task + k * config.d_route, dims.d_task, &mut rng);
        }
        if config.aggregates(q) {
            let mut rng = group_rng(config.seed, 30 + aspect(q) as u64);
            init_affine(&mut p, &format!("aggregate.{q}"), config.aggregate_width(q, dims), dims.d_task, &mut rng);
        }
    }
    p
}

impl<F: Scalar> Net<'_, F> {
    fn embed<R: Rng>(
        &self,
        g: &mut Graph<F>,
        general_ids: &[usize],
        domain_ids: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let n = general_ids.len();
        let data = self.embeddings.gather(general_ids, domain_ids);
        let x = g.constant(&[n, self.embeddings.dim()], data.into_iter().map(|v| F::lit(v as f64)).collect())?;
        g.dropout(x, self.config.dropout, mode == Mode::Train, rng)
    }

    /// State 0: task features decoded before any transfer.
    pub fn initial_state<R: Rng>(
        &self,
        g: &mut Graph<F>,
        input: &Padded,
        mode: Mode,
        rng: &mut R,
    ) -> Result<IterationState> {
        if input.n > self.pe.max_len() {
            return Err(Error::Config(format!(
                "sentence of {} tokens exceeds max_len {}",
                input.n,
                self.pe.max_len()
            )));
        }
        let x = self.embed(g, &input.general_ids, &input.domain_ids, mode, rng)?;
        let shared = encode_shared(g, self.params, self.dims, x, &input.mask)?;
        let mut hidden = Vec::with_capacity(3);
        let mut logits = Vec::with_capacity(3);
        let mut probs = Vec::with_capacity(3);
        for q in Task::ASPECT {
            let h = task_features(g, self.params, self.dims, shared, q, &input.mask)?;
            let dec = decode_tokens(g, self.params, h, q)?;
            hidden.push(h);
            logits.push(dec.logits);
            probs.push(dec.probs);
        }
        let h_ddc = task_features(g, self.params, self.dims, shared, Task::Ddc, &input.mask)?;
        let h_dsc = task_features(g, self.params, self.dims, shared, Task::Dsc, &input.mask)?;
        let ddc = doc_attend(g, self.params, h_ddc, &input.mask, Task::Ddc)?;
        let dsc = doc_attend(g, self.params, h_dsc, &input.mask, Task::Dsc)?;
        Ok(IterationState {
            t: 0,
            hidden: hidden.try_into().expect("three tasks"),
            logits: logits.try_into().expect("three tasks"),
            probs: probs.try_into().expect("three tasks"),
            doc: DocSignals {
                a_ddc: ddc.weights,
                a_dsc: dsc.weights,
                logits_ddc: ddc.logits,
                logits_dsc: dsc.logits,
                y_ddc: ddc.probs,
                y_dsc: dsc.probs,
            },
            routes: Vec::new(),
        })
    }

    /// One round of routing, knowledge concatenation, aggregation and
    /// re-decoding.
    pub fn transfer_and_aggregate(
        &self,
        g: &mut Graph<F>,
        state: &IterationState,
        input: &Padded,
        record: bool,
    ) -> Result<IterationState> {
        let n = input.len();
        let mut routes = Vec::new();
        let mut hidden = state.hidden;
        let mut logits = state.logits;
        let mut probs = state.probs;
        for q in Task::ASPECT {
            let qi = aspect(q);
            if !self.config.aggregates(q) {
                continue;
            }
            let incoming = self.config.incoming(q);
            let mut h = state.hidden[qi];
            if !incoming.is_empty() {
                let mut parts = vec![h];
                for &dir in &incoming {
                    let src = state.hidden[aspect(dir.source)];
                    let u = predict_vectors(g, self.params, src, dir, self.pe, self.config.pe_mode)?;
                    let (v, snapshots) = route(g, u, &input.adjacency, self.config.route_iters, &input.mask, record)?;
                    parts.push(v);
                    if record {
                        routes.push(RouteTrace { direction: dir, snapshots });
                    }
                }
                let cat = g.concat(&parts, 1)?;
                h = affine(g, self.params, &format!("transfer.{q}"), cat)?;
            }
            let mut parts = vec![h, state.probs[qi]];
            parts.extend(incoming.iter().map(|d| state.probs[aspect(d.source)]));
            if self.config.injects_ddc(q) {
                parts.push(g.reshape(state.doc.a_ddc, &[n, 1])?);
            }
            if self.config.injects_dsc(q) {
                parts.push(g.broadcast_rows(state.doc.y_dsc, n)?);
                parts.push(g.reshape(state.doc.a_dsc, &[n, 1])?);
            }
            let z = g.concat(&parts, 1)?;
            let z = affine(g, self.params, &format!("aggregate.{q}"), z)?;
            let z = g.relu(z);
            hidden[qi] = g.mask_rows(z, &input.mask)?;
            let dec = decode_tokens(g, self.params, hidden[qi], q)?;
            logits[qi] = dec.logits;
            probs[qi] = dec.probs;
        }
        Ok(IterationState {
            t: state.t + 1,
            hidden,
            logits,
            probs,
            doc: state.doc,
            routes,
        })
    }

    /// States `0..=T`.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<F>,
        input: &Padded,
        mode: Mode,
        rng: &mut R,
        record: bool,
    ) -> Result<Vec<IterationState>> {
        let mut states = vec![self.initial_state(g, input, mode, rng)?];
        for _ in 0..self.config.steps {
            let next = self.transfer_and_aggregate(g, states.last().expect("nonempty"), input, record)?;
            states.push(next);
        }
        Ok(states)
    }

    /// Document-level forward: attention logits for ddc and dsc.
    pub fn document_logits<R: Rng>(
        &self,
        g: &mut Graph<F>,
        general_ids: &[usize],
        domain_ids: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        if general_ids.is_empty() {
            return Err(Error::Contract("empty document".into()));
        }
        let mask = vec![true; general_ids.len()];
        let x = self.embed(g, general_ids, domain_ids, mode, rng)?;
        let shared = encode_shared(g, self.params, self.dims, x, &mask)?;
        let h_ddc = task_features(g, self.params, self.dims, shared, Task::Ddc, &mask)?;
        let h_dsc = task_features(g, self.params, self.dims, shared, Task::Dsc, &mask)?;
        let ddc = doc_attend(g, self.params, h_ddc, &mask, Task::Ddc)?;
        let dsc = doc_attend(g, self.params, h_dsc, &mask, Task::Dsc)?;
        Ok((ddc.logits, dsc.logits))
    }
}

/// Span sentiment by majority vote over token labels; ties go to the tied
/// label that occurs first in the span.
pub fn vote_sentiment(labels: &[usize]) -> Option<usize> {
    let max = labels.iter().map(|l| labels.iter().filter(|x| *x == l).count()).max()?;
    labels
        .iter()
        .copied()
        .find(|l| labels.iter().filter(|x| *x == l).count() == max)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numeric results of an eval-mode forward pass.
pub struct Inference {
    pub graph: Graph<f32>,
    pub states: Vec<IterationState>,
    pub n: usize,
}

impl Inference {
    /// Per-token argmax labels of the final state, in `Task::ASPECT` order.
    pub fn labels(&self) -> [Vec<usize>; 3] {
        let last = self.states.last().expect("nonempty");
        [0, 1, 2].map(|k| {
            let p = self.graph.data(last.probs[k]);
            let c = p.len() / self.n;
            (0..self.n).map(|i| argmax(&p[i * c..(i + 1) * c])).collect()
        })
    }
}

/// A trained network with its vocabulary and label inventory.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub schemes: TagSchemes,
    pub embeddings: DoubleEmbeddings,
    pub params: ParamStore<f32>,
    dims: LayerDims,
    pe: PositionalEncoding,
}

impl Model {
    pub fn new(config: ModelConfig, schemes: TagSchemes, embeddings: DoubleEmbeddings) -> Result<Model> {
        let (dims, pe) = Self::check(&config, &schemes, &embeddings)?;
        let params = init_params(&config, &dims);
        Ok(Model {
            config,
            schemes,
            embeddings,
            params,
            dims,
            pe,
        })
    }

    /// Assembles a model from restored parts, checking that the parameter
    /// set is exactly what the configuration implies.
    pub fn from_parts(
        config: ModelConfig,
        schemes: TagSchemes,
        embeddings: DoubleEmbeddings,
        params: ParamStore<f32>,
    ) -> Result<Model> {
        let (dims, pe) = Self::check(&config, &schemes, &embeddings)?;
        let expected: ParamStore<f32> = init_params(&config, &dims);
        let want: Vec<(&str, &[usize])> = expected.iter().map(|(k, t)| (k, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(k, t)| (k, t.shape())).collect();
        if want != got {
            return Err(Error::Checkpoint(
                "parameter manifest does not match the stored configuration".into(),
            ));
        }
        Ok(Model {
            config,
            schemes,
            embeddings,
            params,
            dims,
            pe,
        })
    }

    fn check(
        config: &ModelConfig,
        schemes: &TagSchemes,
        embeddings: &DoubleEmbeddings,
    ) -> Result<(LayerDims, PositionalEncoding)> {
        config.validate()?;
        schemes.validate()?;
        let dims = config.layer_dims(schemes);
        dims.validate()?;
        if embeddings.general.dim() != config.d_general || embeddings.domain.dim() != config.d_domain {
            return Err(Error::Config(format!(
                "embedding dims {}+{} do not match d_general={} d_domain={}",
                embeddings.general.dim(),
                embeddings.domain.dim(),
                config.d_general,
                config.d_domain
            )));
        }
        let pe = PositionalEncoding::new(config.max_len, config.d_task)?;
        Ok((dims, pe))
    }

    pub fn dims(&self) -> &LayerDims {
        &self.dims
    }

    pub fn net<'a, F: Scalar>(&'a self, params: &'a ParamStore<F>) -> Net<'a, F> {
        Net {
            config: &self.config,
            dims: &self.dims,
            params,
            embeddings: &self.embeddings,
            pe: &self.pe,
        }
    }

    /// Fills in embedding ids from the tokens.
    pub fn index_sentence(&self, s: &mut Sentence) {
        self.embeddings.index_sentence(s);
    }

    /// Pads a sentence to `len`, indexing it first if needed.
    pub fn pad(&self, s: &Sentence, len: usize) -> Padded {
        if s.general_ids.len() == s.len() && s.domain_ids.len() == s.len() {
            Padded::from_sentence(s, len, self.embeddings.pad_ids())
        } else {
            let mut s = s.clone();
            self.index_sentence(&mut s);
            Padded::from_sentence(&s, len, self.embeddings.pad_ids())
        }
    }

    /// Eval-mode forward pass on one unpadded sentence.
    pub fn infer(&self, s: &Sentence, record: bool) -> Result<Inference> {
        if s.is_empty() {
            return Err(Error::Contract("cannot run the model on an empty sentence".into()));
        }
        let input = self.pad(s, s.len());
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let states = self.net(&self.params).forward(&mut g, &input, Mode::Eval, &mut rng, record)?;
        Ok(Inference {
            graph: g,
            states,
            n: s.len(),
        })
    }

    /// Spans and span sentiments from the final state.
    pub fn predict(&self, s: &Sentence) -> Result<SentencePrediction> {
        let inf = self.infer(s, false)?;
        let [ate, ote, asc] = inf.labels();
        Ok(self.assemble(s, &ate, &ote, &asc))
    }

    pub fn assemble(&self, s: &Sentence, ate: &[usize], ote: &[usize], asc: &[usize]) -> SentencePrediction {
        let ate_spans = extract_spans(ate, BIO);
        let pairs = ate_spans
            .iter()
            .map(|&(a, b)| SpanPrediction {
                span: (a, b),
                sentiment: vote_sentiment(&asc[a..b]).map(|k| self.schemes.asc[k].clone()),
            })
            .collect();
        SentencePrediction {
            tokens: s.tokens.clone(),
            ate_spans,
            ote_spans: extract_spans(ote, BIO),
            pairs,
        }
    }

    /// `(name, shape)` of every trainable tensor, in name order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{chain_edges, EmbeddingTable};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            steps: 2,
            route_iters: 2,
            d_general: 4,
            d_domain: 2,
            d_enc: 6,
            d_task: 4,
            d_route: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_model() -> Model {
        model(tiny_config())
    }

    fn model(config: ModelConfig) -> Model {
        let words: Vec<String> = ["the", "food", "was", "great"].map(String::from).to_vec();
        let emb = DoubleEmbeddings {
            general: EmbeddingTable::random(words.clone(), config.d_general, 3).unwrap(),
            domain: EmbeddingTable::random(words, config.d_domain, 4).unwrap(),
        };
        Model::new(config, TagSchemes::default(), emb).unwrap()
    }

    fn sentence() -> Sentence {
        let mut s = Sentence::unlabeled(["the", "food", "was", "great"].map(String::from).to_vec());
        s.set_edges(&chain_edges(4)).unwrap();
        s
    }

    #[test]
    fn forward_yields_t_plus_one_states() {
        let m = model(tiny_config());
        let inf = m.infer(&sentence(), false).unwrap();
        assert_eq!(inf.states.len(), 3);
        for st in &inf.states {
            for k in 0..3 {
                let p = inf.graph.data(st.probs[k]);
                for row in p.chunks(3) {
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn no_transfer_single_step_equals_initial_decode() {
        let mut c = tiny_config();
        c.disable_transfer();
        c.steps = 1;
        let m = model(c);
        let inf = m.infer(&sentence(), false).unwrap();
        for k in 0..3 {
            assert_eq!(inf.graph.data(inf.states[0].probs[k]), inf.graph.data(inf.states[1].probs[k]));
        }
        assert!(m.params.names().all(|n| !n.starts_with("route") && !n.starts_with("aggregate")));
    }

    #[test]
    fn ablated_model_shares_untouched_parameters() {
        let full = model(tiny_config());
        let mut c = tiny_config();
        c.apply_ablation(Ablation::OpinionTransfer);
        let abl = model(c);
        for (name, t) in abl.params.iter() {
            if !name.starts_with("transfer") && !name.starts_with("aggregate") {
                assert_eq!(full.params.get(name).unwrap(), t, "{name}");
            }
        }
        assert!(!abl.params.contains("route.ote_ate.weight"));
        assert!(!abl.params.contains("route.ote_asc.weight"));
    }

    #[test]
    fn two_steps_compose() {
        let m = model(tiny_config());
        let s = sentence();
        let inf = m.infer(&s, false).unwrap();
        let input = m.pad(&s, 4);
        let mut g = Graph::new();
        let net = m.net(&m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s0 = net.initial_state(&mut g, &input, Mode::Eval, &mut rng).unwrap();
        let s1 = net.transfer_and_aggregate(&mut g, &s0, &input, false).unwrap();
        let s2 = net.transfer_and_aggregate(&mut g, &s1, &input, false).unwrap();
        for k in 0..3 {
            assert_eq!(g.data(s2.probs[k]), inf.graph.data(inf.states[2].probs[k]));
        }
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = model(tiny_config());
        let s = sentence();
        let inf = m.infer(&s, false).unwrap();
        let input = m.pad(&s, 7);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let states = m.net(&m.params).forward(&mut g, &input, Mode::Eval, &mut rng, false).unwrap();
        for k in 0..3 {
            let a = inf.graph.data(inf.states[2].probs[k]);
            let b = &g.data(states[2].probs[k])[..12];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn majority_vote() {
        assert_eq!(vote_sentiment(&[0, 1, 0]), Some(0));
        assert_eq!(vote_sentiment(&[1, 0, 0, 1]), Some(1));
        assert_eq!(vote_sentiment(&[2, 0, 1, 0, 1]), Some(0));
        assert_eq!(vote_sentiment(&[]), None);
        // Exhaustive over label triples: the winner has the most votes and,
        // among ties, appears first.
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let v = [a, b, c];
                    let count = |l: usize| v.iter().filter(|&&x| x == l).count();
                    let want = if count(a) >= count(b) && count(a) >= count(c) {
                        a
                    } else if count(b) >= count(c) {
                        b
                    } else {
                        c
                    };
                    assert_eq!(vote_sentiment(&v), Some(want));
                }
            }
        }
    }

    #[test]
    fn assemble_pairs() {
        let m = model(tiny_config());
        let s = sentence();
        let p = m.assemble(&s, &[0, 1, 2, 2], &[2, 2, 2, 0], &[0, 0, 2, 1]);
        assert_eq!(p.ate_spans, vec![(0, 2)]);
        assert_eq!(p.ote_spans, vec![(3, 4)]);
        assert_eq!(p.pairs[0].sentiment.as_deref(), Some("pos"));
        let none = m.assemble(&s, &[2; 4], &[2; 4], &[0; 4]);
        assert!(none.ate_spans.is_empty() && none.ote_spans.is_empty() && none.pairs.is_empty());
    }
}
