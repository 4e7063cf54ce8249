//! Independent oracles shared by the integration suites and the
//! acceptance run.

use std::collections::{BTreeMap, BTreeSet};

use iktn::data::{parse_aspect_corpus, TagSchemes, BIO};
use iktn::layers::Task;
use iktn::model::{Ablation, ModelConfig};
use iktn::routing::Direction;
use iktn::metrics::{SentencePrediction, SpanPrediction};
use iktn::tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent re-execution of the routing loop on plain vectors.
/// Returns `(b, c)` per iteration and the final `v`.
pub fn reference_route(
    u: &[f64],
    n: usize,
    r: usize,
    adj: &[bool],
    mask: &[bool],
    iters: usize,
) -> (Vec<(Vec<f64>, Vec<f64>)>, Vec<f64>) {
    let at = |i: usize, j: usize, k: usize| u[(i * n + j) * r + k];
    let mut b = vec![0.0; n * n];
    let mut snaps = Vec::new();
    let mut v = vec![0.0; n * r];
    for it in 1..=iters {
        // b ← b + A
        for (x, &a) in b.iter_mut().zip(adj) {
            if a {
                *x += 1.0;
            }
        }
        // c_i ← softmax over unpadded targets j
        let mut c = vec![0.0; n * n];
        for i in (0..n).filter(|&i| mask[i]) {
            let m = (0..n).filter(|&j| mask[j]).map(|j| b[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).filter(|&j| mask[j]).map(|j| (b[i * n + j] - m).exp()).sum();
            for j in (0..n).filter(|&j| mask[j]) {
                c[i * n + j] = (b[i * n + j] - m).exp() / z;
            }
        }
        // s_j ← Σ_i c_{j|i} û_{j|i};  v_j ← squash(s_j)
        v = vec![0.0; n * r];
        for j in (0..n).filter(|&j| mask[j]) {
            let s: Vec<f64> = (0..r).map(|k| (0..n).map(|i| c[i * n + j] * at(i, j, k)).sum()).collect();
            let norm2: f64 = s.iter().map(|x| x * x).sum();
            if norm2 > 0.0 {
                let f = norm2 / (1.0 + norm2) / norm2.sqrt();
                for k in 0..r {
                    v[j * r + k] = f * s[k];
                }
            }
        }
        snaps.push((b.clone(), c));
        // b ← b + û·v
        if it < iters {
            for i in 0..n {
                for j in 0..n {
                    b[i * n + j] += (0..r).map(|k| at(i, j, k) * v[j * r + k]).sum::<f64>();
                }
            }
        }
    }
    (snaps, v)
}

pub struct RouteInstance {
    pub n: usize,
    pub r: usize,
    pub iters: usize,
    pub u: Vec<f64>,
    pub adj: Vec<bool>,
    pub mask: Vec<bool>,
}

/// Random routing problem with `n <= 10`, `iters <= 4`, a random padded
/// tail and random extra edges.
pub fn route_instance(seed: u64) -> RouteInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=10);
    let r = rng.gen_range(1..=6);
    let iters = rng.gen_range(1..=4);
    let scale = rng.gen_range(0.1..3.0);
    let u = (0..n * n * r).map(|_| rng.gen_range(-scale..scale)).collect();
    let adj = (0..n * n).map(|k| k % (n + 1) == 0 || rng.gen_bool(0.2)).collect();
    let real = rng.gen_range(1..=n);
    let mask = (0..n).map(|i| i < real).collect();
    RouteInstance { n, r, iters, u, adj, mask }
}

/// Runs `route` on one instance and compares it with the re-execution,
/// the row sums and the output norms.
pub fn check_route_instance(seed: u64) -> Result<(), String> {
    let t = route_instance(seed);
    let mut g = Graph::<f64>::new();
    let u = g.constant(&[t.n, t.n, t.r], t.u.clone()).map_err(|e| e.to_string())?;
    let (v, snaps) = iktn::routing::route(&mut g, u, &t.adj, t.iters, &t.mask, true).map_err(|e| e.to_string())?;
    let (want_snaps, want_v) = reference_route(&t.u, t.n, t.r, &t.adj, &t.mask, t.iters);
    if snaps.len() != t.iters {
        return Err(format!("seed {seed}: {} snapshots for {} iterations", snaps.len(), t.iters));
    }
    for (it, (got, (b, c))) in snaps.iter().zip(&want_snaps).enumerate() {
        for k in 0..t.n * t.n {
            if (got.b[k] - b[k]).abs() >= 1e-6 || (got.c[k] - c[k]).abs() >= 1e-6 {
                return Err(format!("seed {seed}: iteration {} entry {k} differs", it + 1));
            }
        }
        for i in (0..t.n).filter(|&i| t.mask[i]) {
            let row: f64 = (0..t.n).map(|j| got.c_at(i, j)).sum();
            if (row - 1.0).abs() >= 1e-6 {
                return Err(format!("seed {seed}: row {i} sums to {row}"));
            }
        }
    }
    for (k, (a, b)) in g.data(v).iter().zip(&want_v).enumerate() {
        if (a - b).abs() >= 1e-6 {
            return Err(format!("seed {seed}: v[{k}] = {a}, oracle {b}"));
        }
    }
    for j in 0..t.n {
        let norm: f64 = g.data(v)[j * t.r..(j + 1) * t.r].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm >= 1.0 {
            return Err(format!("seed {seed}: |v_{j}| = {norm}"));
        }
    }
    Ok(())
}

/// Tag index order in the default schemes: begin, inside, outside.
pub const NAMES_ATE: [&str; 3] = ["BA", "IA", "O"];
pub const NAMES_OTE: [&str; 3] = ["BP", "IP", "O"];

/// An inside tag must follow a begin or inside tag.
pub fn oracle_valid(tags: &[usize]) -> bool {
    let mut prev = BIO.outside;
    for &t in tags {
        if t == BIO.inside && prev == BIO.outside {
            return false;
        }
        prev = t;
    }
    true
}

/// Lenient run-length decoding: a span starts at every begin tag and at
/// every inside tag that follows an outside tag, and runs over the
/// following inside tags.
pub fn oracle_spans(tags: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        if tags[i] == BIO.outside {
            i += 1;
            continue;
        }
        let start = i;
        i += 1;
        while i < tags.len() && tags[i] == BIO.inside {
            i += 1;
        }
        out.push((start, i));
    }
    out
}

pub fn random_tags<R: Rng>(rng: &mut R, n: usize, valid: bool) -> Vec<usize> {
    let mut tags: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let t = match rng.gen_range(0..3) {
            0 => BIO.begin,
            1 if valid && (i == 0 || tags[i - 1] == BIO.outside) => BIO.outside,
            1 => BIO.inside,
            _ => BIO.outside,
        };
        tags.push(t);
    }
    tags
}

pub fn render(ate: &[usize], ote: &[usize]) -> String {
    let asc_inside: BTreeSet<usize> = oracle_spans(ate).into_iter().flat_map(|(a, b)| a..b).collect();
    let mut out = String::new();
    for i in 0..ate.len() {
        let asc = if asc_inside.contains(&i) { "pos" } else { "_" };
        out.push_str(&format!("w{i}\t{}\t{}\t{asc}\n", NAMES_ATE[ate[i]], NAMES_OTE[ote[i]]));
    }
    out
}

/// Classifies `cases` random tag sequences with the loader and with
/// [`oracle_valid`]. Returns `(accepted, rejected, mismatches)`.
pub fn fuzz_bio(cases: usize, seed: u64) -> (usize, usize, Vec<String>) {
    let schemes = TagSchemes::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut accepted, mut rejected, mut bad) = (0, 0, Vec::new());
    for case in 0..cases {
        let n = rng.gen_range(1..=12);
        let valid_ate = rng.gen_bool(0.5);
        let ate = random_tags(&mut rng, n, valid_ate);
        let valid_ote = rng.gen_bool(0.7);
        let ote = random_tags(&mut rng, n, valid_ote);
        let expect = oracle_valid(&ate) && oracle_valid(&ote);
        let got = parse_aspect_corpus(&render(&ate, &ote), "fuzz", &schemes);
        if got.is_ok() != expect {
            bad.push(format!("case {case}: ate {ate:?} ote {ote:?}: {:?}", got.err()));
        }
        if expect {
            accepted += 1;
        } else {
            rejected += 1;
        }
    }
    (accepted, rejected, bad)
}

pub const LABELS: [&str; 3] = ["pos", "neg", "neu"];

pub fn labels() -> Vec<String> {
    LABELS.iter().map(|s| s.to_string()).collect()
}

pub fn random_spans<R: Rng>(rng: &mut R, n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if rng.gen_bool(0.35) {
            let len = rng.gen_range(1..=3).min(n - i);
            out.push((i, i + len));
            i += len;
        }
        i += 1;
    }
    out
}

pub fn random_sentence<R: Rng>(rng: &mut R, n: usize) -> SentencePrediction {
    let ate_spans = random_spans(rng, n);
    let pairs = ate_spans
        .iter()
        .map(|&span| SpanPrediction {
            span,
            sentiment: Some(LABELS[rng.gen_range(0..3)].to_string()),
        })
        .collect();
    SentencePrediction {
        tokens: (0..n).map(|k| format!("w{k}")).collect(),
        ate_spans,
        ote_spans: random_spans(rng, n),
        pairs,
    }
}

/// A noisy copy of the gold sentence: some spans kept, some shifted,
/// some sentiments changed.
pub fn perturb<R: Rng>(rng: &mut R, gold: &SentencePrediction) -> SentencePrediction {
    if rng.gen_bool(0.3) {
        return random_sentence(rng, gold.tokens.len());
    }
    let n = gold.tokens.len();
    let mut p = gold.clone();
    p.ate_spans.retain(|_| rng.gen_bool(0.8));
    p.ote_spans.retain(|_| rng.gen_bool(0.8));
    for s in &mut p.ote_spans {
        if rng.gen_bool(0.2) && s.1 < n {
            s.1 += 1;
        }
    }
    p.pairs = p
        .ate_spans
        .iter()
        .map(|&span| SpanPrediction {
            span,
            sentiment: Some(LABELS[rng.gen_range(0..3)].to_string()),
        })
        .collect();
    p
}

pub fn f1(tp: usize, n_pred: usize, n_gold: usize) -> f64 {
    let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let r = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Brute-force counting by nested loops over every sentence.
pub fn brute(pred: &[SentencePrediction], gold: &[SentencePrediction]) -> [f64; 5] {
    let span_f1 = |get: fn(&SentencePrediction) -> &Vec<(usize, usize)>| {
        let (mut tp, mut np, mut ng) = (0, 0, 0);
        for (p, g) in pred.iter().zip(gold) {
            np += get(p).len();
            ng += get(g).len();
            for a in get(p) {
                if get(g).iter().any(|b| b == a) {
                    tp += 1;
                }
            }
        }
        f1(tp, np, ng)
    };
    let f1_a = span_f1(|s| &s.ate_spans);
    let f1_o = span_f1(|s| &s.ote_spans);

    let (mut tp_i, mut np_i, mut ng_i) = (0, 0, 0);
    let mut outcomes = Vec::new();
    for (p, g) in pred.iter().zip(gold) {
        np_i += p.pairs.len();
        ng_i += g.pairs.len();
        for a in &p.pairs {
            for b in &g.pairs {
                if a.span == b.span {
                    outcomes.push((a.sentiment.clone().unwrap(), b.sentiment.clone().unwrap()));
                    if a.sentiment == b.sentiment {
                        tp_i += 1;
                    }
                }
            }
        }
    }
    let f1_i = f1(tp_i, np_i, ng_i);
    let correct = outcomes.iter().filter(|(a, b)| a == b).count();
    let acc = if outcomes.is_empty() { 0.0 } else { correct as f64 / outcomes.len() as f64 };
    let mut macro_f1 = 0.0;
    for lab in LABELS {
        let tp = outcomes.iter().filter(|(a, b)| a == lab && b == lab).count();
        let np = outcomes.iter().filter(|(a, _)| a == lab).count();
        let ng = outcomes.iter().filter(|(_, b)| b == lab).count();
        macro_f1 += f1(tp, np, ng);
    }
    [f1_a, f1_o, macro_f1 / 3.0, acc, f1_i]
}

/// A random gold set and a noisy prediction for it.
pub fn metric_case<R: Rng>(rng: &mut R) -> (Vec<SentencePrediction>, Vec<SentencePrediction>) {
    let m = rng.gen_range(1..=8);
    let gold: Vec<SentencePrediction> = (0..m)
        .map(|_| {
            let n = rng.gen_range(1..=10);
            random_sentence(rng, n)
        })
        .collect();
    let pred = gold.iter().map(|g| perturb(rng, g)).collect();
    (pred, gold)
}

/// Label counts of the default schemes: BIO tags and document sentiments.
pub const C1: usize = 3;
pub const C_DSC: usize = 3;

pub type Manifest = BTreeMap<String, Vec<usize>>;

/// Widths of the transfer and aggregation affines, counted by hand from
/// which paths feed each task.
pub fn expected_widths(c: &ModelConfig, dirs: &[Direction], ddc_to: &[Task], dsc_to: &[Task]) -> Manifest {
    let mut out = Manifest::new();
    for q in [Task::Ate, Task::Ote, Task::Asc] {
        let k = dirs.iter().filter(|d| d.target == q).count();
        if k > 0 {
            out.insert(format!("transfer.{q}.weight"), vec![c.d_task + k * c.d_route, c.d_task]);
        }
        let mut w = c.d_task + C1 + C1 * k;
        if ddc_to.contains(&q) {
            w += 1;
        }
        if dsc_to.contains(&q) {
            w += C_DSC + 1;
        }
        if w > c.d_task + C1 {
            out.insert(format!("aggregate.{q}.weight"), vec![w, c.d_task]);
        }
    }
    for d in dirs {
        out.insert(d.weight_name(), vec![c.d_task, c.d_route]);
    }
    out
}

pub fn path_entries(m: &Manifest) -> Manifest {
    m.iter()
        .filter(|(k, _)| {
            (k.starts_with("transfer.") || k.starts_with("aggregate.") || k.starts_with("route.")) && k.ends_with(".weight")
        })
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

pub fn core_entries(m: &Manifest) -> Manifest {
    m.iter()
        .filter(|(k, _)| !(k.starts_with("transfer.") || k.starts_with("aggregate.") || k.starts_with("route.")))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Expected path tensors of the default wiring after `ablation`.
pub fn expected_paths(c: &ModelConfig, ablation: Option<Ablation>) -> Manifest {
    let all = Direction::ALL.to_vec();
    let without = |src: Task| -> Vec<Direction> { all.iter().copied().filter(|d| d.source != src).collect() };
    let (ao, asc, everyone) = ([Task::Ate, Task::Ote], [Task::Asc], [Task::Ate, Task::Ote, Task::Asc]);
    match ablation {
        None => expected_widths(c, &all, &ao, &asc),
        Some(Ablation::AspectTransfer) => expected_widths(c, &without(Task::Ate), &ao, &asc),
        Some(Ablation::OpinionTransfer) => expected_widths(c, &without(Task::Ote), &ao, &asc),
        Some(Ablation::SentimentTransfer) => expected_widths(c, &without(Task::Asc), &ao, &asc),
        Some(Ablation::DdcTransfer) => expected_widths(c, &all, &[], &asc),
        Some(Ablation::DscTransfer) => expected_widths(c, &all, &ao, &[]),
        Some(Ablation::Coarse) => expected_widths(c, &all, &everyone, &everyone),
    }
}
