//! Dynamic-length routing between two aspect-level tasks.
//!
//! Every token of the source task sends a prediction vector `û_{j|i}` to
//! every token slot `j` of the target task. Coupling coefficients start
//! uniform, are biased by the dependency adjacency, and are sharpened by the
//! agreement between each prediction and the squashed aggregate it produced.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{glorot, Task};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

/// Sinusoidal position table: `PE(pos, 2p) = sin(pos / 10000^{2p/d})`,
/// `PE(pos, 2p+1) = cos(pos / 10000^{2p/d})`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    d_model: usize,
    max_len: usize,
    table: Vec<f64>,
}

impl PositionalEncoding {
    pub fn new(max_len: usize, d_model: usize) -> Result<Self> {
        if d_model == 0 || d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "positional encoding needs an even d_model, got {d_model}"
            )));
        }
        if max_len == 0 {
            return Err(Error::Config("positional encoding needs max_len >= 1".into()));
        }
        let mut table = vec![0.0; max_len * d_model];
        for pos in 0..max_len {
            for p in 0..d_model / 2 {
                let angle = pos as f64 / 10000f64.powf(2.0 * p as f64 / d_model as f64);
                table[pos * d_model + 2 * p] = angle.sin();
                table[pos * d_model + 2 * p + 1] = angle.cos();
            }
        }
        Ok(PositionalEncoding {
            d_model,
            max_len,
            table,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// The first `n` rows, row-major.
    pub fn rows(&self, n: usize) -> Result<&[f64]> {
        if n > self.max_len {
            return Err(Error::Config(format!(
                "sentence length {n} exceeds positional capacity {}",
                self.max_len
            )));
        }
        Ok(&self.table[..n * self.d_model])
    }
}

/// Convenience wrapper returning the `n×d_model` table.
pub fn positional_encoding(n: usize, d_model: usize) -> Result<Vec<f64>> {
    Ok(PositionalEncoding::new(n.max(1), d_model)?.rows(n)?.to_vec())
}

/// How positions enter the prediction vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeMode {
    /// `û_{j|i} = (h_i + PE(i) + PE(j)) · W`
    #[default]
    AddBoth,
    /// `û_{j|i} = (h_i + PE(i)) · W`
    AddSource,
    /// `û_{j|i} = h_i · W`
    Off,
}

impl PeMode {
    pub fn parse(s: &str) -> Result<PeMode> {
        match s {
            "add-both" => Ok(PeMode::AddBoth),
            "add-source" => Ok(PeMode::AddSource),
            "off" => Ok(PeMode::Off),
            _ => Err(Error::Config(format!(
                "unknown pe-mode `{s}` (expected add-both, add-source or off)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PeMode::AddBoth => "add-both",
            PeMode::AddSource => "add-source",
            PeMode::Off => "off",
        }
    }
}

/// An ordered (source → target) pair of distinct aspect-level tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Direction {
    pub source: Task,
    pub target: Task,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::new(Task::Ate, Task::Ote),
        Direction::new(Task::Ate, Task::Asc),
        Direction::new(Task::Ote, Task::Ate),
        Direction::new(Task::Ote, Task::Asc),
        Direction::new(Task::Asc, Task::Ate),
        Direction::new(Task::Asc, Task::Ote),
    ];

    pub const fn new(source: Task, target: Task) -> Self {
        Direction { source, target }
    }

    /// Position in [`Direction::ALL`].
    pub fn index(self) -> usize {
        Direction::ALL.iter().position(|&d| d == self).expect("aspect direction")
    }

    pub fn weight_name(self) -> String {
        format!("route.{}_{}.weight", self.source, self.target)
    }

    /// Parses `ate->asc`, `ate_asc` or `ate:asc`.
    pub fn parse(s: &str) -> Result<Direction> {
        let parts: Vec<&str> = s.split(|c| c == '>' || c == '_' || c == ':' || c == '-').filter(|p| !p.is_empty()).collect();
        if let [a, b] = parts[..] {
            let d = Direction::new(Task::parse(a)?, Task::parse(b)?);
            if Direction::ALL.contains(&d) {
                return Ok(d);
            }
        }
        Err(Error::Config(format!(
            "unknown transfer direction `{s}` (expected one of {})",
            Direction::ALL.map(|d| d.to_string()).join(", ")
        )))
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

pub fn init_direction<F: Scalar, R: Rng>(
    params: &mut ParamStore<F>,
    dir: Direction,
    d_source: usize,
    d_route: usize,
    rng: &mut R,
) {
    params.insert(dir.weight_name(), glorot(&[d_source, d_route], d_source, d_route, rng));
}

/// Prediction vectors `[n×n×d_route]` indexed `[source i, target j, :]`.
pub fn predict_vectors<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamStore<F>,
    h_source: Var,
    dir: Direction,
    pe: &PositionalEncoding,
    mode: PeMode,
) -> Result<Var> {
    let n = g.shape(h_source)[0];
    let d = g.shape(h_source)[1];
    let w = g.param(params, &dir.weight_name())?;
    let d_route = g.shape(w)[1];
    let rows = pe.rows(n)?;
    if mode != PeMode::Off && pe.d_model() != d {
        return Err(Error::shape("positional encoding", &[n, d], &[n, pe.d_model()]));
    }
    let pe_var = g.constant(&[n, d], rows.iter().map(|&x| F::lit(x)).collect())?;
    let src = match mode {
        PeMode::Off => h_source,
        _ => g.add(h_source, pe_var)?,
    };
    let src_proj = g.matmul(src, w)?;
    let tgt_proj = match mode {
        PeMode::AddBoth => g.matmul(pe_var, w)?,
        _ => g.constant(&[n, d_route], vec![F::zero(); n * d_route])?,
    };
    g.pair_sum(src_proj, tgt_proj)
}

/// Values captured from one routing iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingSnapshot {
    /// 1-based iteration number.
    pub iteration: usize,
    pub n: usize,
    /// Logits after the adjacency prior was added, `[source][target]`.
    pub b: Vec<f64>,
    /// Coupling coefficients, `[source][target]`.
    pub c: Vec<f64>,
    /// Squashed outputs `[n×d_route]`.
    pub v: Vec<f64>,
}

impl RoutingSnapshot {
    pub fn c_at(&self, i: usize, j: usize) -> f64 {
        self.c[i * self.n + j]
    }
}

/// Runs `iters` rounds of agreement routing over `u_hat[n×n×r]`.
///
/// Per round: add the adjacency prior to the logits, softmax over targets,
/// sum coupled predictions over unpadded sources, squash, then add the
/// prediction/output agreement to the logits. Returns the final outputs
/// (padded rows zeroed) and, when `record` is set, one snapshot per round.
pub fn route<F: Scalar>(
    g: &mut Graph<F>,
    u_hat: Var,
    adjacency: &[bool],
    iters: usize,
    mask: &[bool],
    record: bool,
) -> Result<(Var, Vec<RoutingSnapshot>)> {
    if iters < 1 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let shape = g.shape(u_hat).to_vec();
    if shape.len() != 3 || shape[0] != shape[1] {
        return Err(Error::Contract(format!("prediction vectors must be n×n×d, got {shape:?}")));
    }
    let n = shape[0];
    if adjacency.len() != n * n || mask.len() != n {
        return Err(Error::shape("route", &shape, &[adjacency.len(), mask.len()]));
    }
    let prior = g.constant(
        &[n, n],
        adjacency.iter().map(|&a| if a { F::one() } else { F::zero() }).collect(),
    )?;
    let mut b = g.constant(&[n, n], vec![F::zero(); n * n])?;
    let mut trace = Vec::new();
    let mut v = None;
    for it in 1..=iters {
        b = g.add(b, prior)?;
        let c = g.softmax_masked(b, 1, Some(mask))?;
        let c_src = g.mask_rows(c, mask)?;
        let s = g.weighted_sources(c_src, u_hat)?;
        let squashed = g.squash(s);
        let out = g.mask_rows(squashed, mask)?;
        if record {
            trace.push(RoutingSnapshot {
                iteration: it,
                n,
                b: g.data(b).iter().map(|x| x.as_f64()).collect(),
                c: g.data(c_src).iter().map(|x| x.as_f64()).collect(),
                v: g.data(out).iter().map(|x| x.as_f64()).collect(),
            });
        }
        if it < iters {
            let agree = g.agreement(u_hat, out)?;
            b = g.add(b, agree)?;
        }
        v = Some(out);
    }
    Ok((v.expect("at least one iteration"), trace))
}

/// Plot-ready coupling matrices, one record per routing iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub direction: String,
    /// Outer transfer step (1-based) in which this routing ran.
    pub step: usize,
    pub iteration: usize,
    pub tokens: Vec<String>,
    /// `c[i][j]`: share of source token `i` routed to target token `j`.
    pub c: Vec<Vec<f64>>,
}

/// Converts snapshots into annotated coupling matrices restricted to the
/// first `tokens.len()` (unpadded) positions.
pub fn agreement_trace(
    trace: &[RoutingSnapshot],
    dir: Direction,
    step: usize,
    tokens: &[String],
) -> Result<Vec<TraceRecord>> {
    if trace.is_empty() {
        return Err(Error::Contract("empty routing trace".into()));
    }
    let n = tokens.len();
    Ok(trace
        .iter()
        .map(|snap| TraceRecord {
            direction: dir.to_string(),
            step,
            iteration: snap.iteration,
            tokens: tokens.to_vec(),
            c: (0..n).map(|i| (0..n).map(|j| snap.c_at(i, j)).collect()).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pe_row_zero_alternates() {
        let pe = positional_encoding(3, 8).unwrap();
        assert_eq!(&pe[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pe_row_one_small_model() {
        let pe = positional_encoding(2, 4).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe[4..8].iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pe_rejects_odd_and_overflow() {
        assert!(matches!(PositionalEncoding::new(4, 5), Err(Error::Config(_))));
        let pe = PositionalEncoding::new(4, 4).unwrap();
        assert!(pe.rows(5).is_err());
    }

    #[test]
    fn direction_names() {
        for d in Direction::ALL {
            assert_eq!(Direction::parse(&d.to_string()).unwrap(), d);
        }
        assert_eq!(Direction::parse("ote_asc").unwrap(), Direction::new(Task::Ote, Task::Asc));
        assert!(Direction::parse("ate->ate").is_err());
        assert!(Direction::parse("ddc->ate").is_err());
    }

    fn u_hat(g: &mut Graph<f64>, n: usize, r: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * n * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        g.constant(&[n, n, r], data).unwrap()
    }

    #[test]
    fn single_iteration_without_prior_is_uniform_mean() {
        let n = 4;
        let mut g = Graph::new();
        let u = u_hat(&mut g, n, 3, 1);
        let (v, trace) = route(&mut g, u, &vec![false; n * n], 1, &[true; 4], true).unwrap();
        assert!(trace[0].c.iter().all(|&c| (c - 0.25).abs() < 1e-15));
        let ud = g.data(u).to_vec();
        for j in 0..n {
            let s: Vec<f64> = (0..3).map(|k| (0..n).map(|i| ud[(i * n + j) * 3 + k]).sum::<f64>() / n as f64).collect();
            let q: f64 = s.iter().map(|x| x * x).sum();
            for k in 0..3 {
                let want = q / (1.0 + q) * s[k] / (q.sqrt() + 1e-9);
                assert!((g.data(v)[j * 3 + k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_routes_to_itself() {
        let mut g = Graph::new();
        let u = u_hat(&mut g, 1, 3, 2);
        let (v, trace) = route(&mut g, u, &[true], 3, &[true], true).unwrap();
        assert!(trace.iter().all(|t| t.c == vec![1.0]));
        let s = g.data(u).to_vec();
        let q: f64 = s.iter().map(|x| x * x).sum();
        for k in 0..3 {
            assert!((g.data(v)[k] - q / (1.0 + q) * s[k] / (q.sqrt() + 1e-9)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let mut g = Graph::new();
        let u = u_hat(&mut g, 2, 2, 0);
        assert!(matches!(route(&mut g, u, &[true; 4], 0, &[true; 2], false), Err(Error::Config(_))));
    }

    #[test]
    fn padded_sources_do_not_contribute() {
        let n = 4;
        let mut g = Graph::new();
        let u = u_hat(&mut g, n, 3, 5);
        let mask = [true, true, true, false];
        let (v, trace) = route(&mut g, u, &vec![false; 16], 2, &mask, true).unwrap();
        for snap in &trace {
            for i in 0..3 {
                let row: f64 = (0..n).map(|j| snap.c_at(i, j)).sum();
                assert!((row - 1.0).abs() < 1e-12);
                assert_eq!(snap.c_at(i, 3), 0.0);
            }
            assert!((0..n).all(|j| snap.c_at(3, j) == 0.0));
        }
        assert!(g.data(v)[9..12].iter().all(|&x| x == 0.0));
        // Changing a padded source's predictions leaves the result unchanged.
        let mut g2 = Graph::new();
        let mut data = g.data(u).to_vec();
        for j in 0..n {
            for k in 0..3 {
                data[(3 * n + j) * 3 + k] = 42.0;
            }
        }
        let u2 = g2.constant(&[n, n, 3], data).unwrap();
        let (v2, _) = route(&mut g2, u2, &vec![false; 16], 2, &mask, false).unwrap();
        assert_eq!(g.data(v), g2.data(v2));
    }

    #[test]
    fn zero_weight_gives_zero_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::<f64>::new();
        let dir = Direction::new(Task::Ote, Task::Asc);
        init_direction(&mut p, dir, 4, 3, &mut rng);
        p.get_mut(&dir.weight_name()).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        let pe = PositionalEncoding::new(16, 4).unwrap();
        let mut g = Graph::new();
        let h = g.constant(&[3, 4], (0..12).map(|x| x as f64).collect()).unwrap();
        let u = predict_vectors(&mut g, &p, h, dir, &pe, PeMode::AddBoth).unwrap();
        assert_eq!(g.shape(u), &[3, 3, 3]);
        assert!(g.data(u).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn predictions_vary_with_target_only_through_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamStore::<f64>::new();
        let dir = Direction::new(Task::Ate, Task::Ote);
        init_direction(&mut p, dir, 4, 3, &mut rng);
        let pe = PositionalEncoding::new(16, 4).unwrap();
        let w = p.get(&dir.weight_name()).unwrap().data().to_vec();
        let mut g = Graph::new();
        let hdata: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = g.constant(&[3, 4], hdata.clone()).unwrap();
        let u = predict_vectors(&mut g, &p, h, dir, &pe, PeMode::AddBoth).unwrap();
        let rows = pe.rows(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let mut want = 0.0;
                    for c in 0..4 {
                        want += (hdata[i * 4 + c] + rows[i * 4 + c] + rows[j * 4 + c]) * w[c * 3 + k];
                    }
                    assert!((g.data(u)[(i * 3 + j) * 3 + k] - want).abs() < 1e-12);
                }
            }
        }
        let u_src = predict_vectors(&mut g, &p, h, dir, &pe, PeMode::AddSource).unwrap();
        let d = g.data(u_src);
        for i in 0..3 {
            assert_eq!(d[(i * 3) * 3..(i * 3 + 1) * 3], d[(i * 3 + 2) * 3..(i * 3 + 3) * 3]);
        }
    }

    #[test]
    fn trace_for_two_tokens_is_half() {
        let mut g = Graph::new();
        let u = u_hat(&mut g, 2, 3, 8);
        let (_, trace) = route(&mut g, u, &[false; 4], 1, &[true; 2], true).unwrap();
        let toks = vec!["a".to_string(), "b".to_string()];
        let recs = agreement_trace(&trace, Direction::ALL[0], 1, &toks).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].c.iter().flatten().all(|&c| c == 0.5));
        assert!(agreement_trace(&[], Direction::ALL[0], 1, &toks).is_err());
    }
}
