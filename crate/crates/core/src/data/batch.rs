use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::Sentence;
use super::schemes::BIO;

/// Indices of the sentences in one mini-batch and the padded length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub members: Vec<usize>,
    pub len: usize,
}

/// A sentence padded to a batch length, with its pad mask.
///
/// Gold tags at padded positions are arbitrary and never read.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    pub n: usize,
    pub mask: Vec<bool>,
    pub general_ids: Vec<usize>,
    pub domain_ids: Vec<usize>,
    /// Row-major `len×len`; padded rows and columns are false.
    pub adjacency: Vec<bool>,
    pub ate: Vec<usize>,
    pub ote: Vec<usize>,
    pub asc: Vec<Option<usize>>,
}

impl Padded {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn from_sentence(s: &Sentence, len: usize, pad_ids: (usize, usize)) -> Padded {
        let n = s.len();
        assert!(len >= n, "pad length {len} shorter than sentence {n}");
        let extend = |v: &[usize], fill: usize| -> Vec<usize> {
            v.iter().copied().chain(std::iter::repeat(fill).take(len - n)).collect()
        };
        let mut adjacency = vec![false; len * len];
        for i in 0..n {
            adjacency[i * len..i * len + n].copy_from_slice(&s.adjacency[i * n..(i + 1) * n]);
        }
        Padded {
            n,
            mask: (0..len).map(|i| i < n).collect(),
            general_ids: extend(&s.general_ids, pad_ids.0),
            domain_ids: extend(&s.domain_ids, pad_ids.1),
            adjacency,
            ate: extend(&s.ate_gold, BIO.outside),
            ote: extend(&s.ote_gold, BIO.outside),
            asc: s.asc_gold.iter().copied().chain(std::iter::repeat(None).take(len - n)).collect(),
        }
    }
}

/// Shuffles indices deterministically by `seed` and chunks them.
pub fn make_batches(sentences: &[Sentence], batch_size: usize, seed: u64) -> Vec<Batch> {
    let mut order = shuffled_indices(sentences.len(), seed);
    let bs = batch_size.max(1);
    let mut out = Vec::with_capacity(order.len().div_ceil(bs));
    for chunk in order.chunks_mut(bs) {
        let len = chunk.iter().map(|&i| sentences[i].len()).max().unwrap_or(0);
        out.push(Batch {
            members: chunk.to_vec(),
            len,
        });
    }
    out
}

pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Random partition into `(train, dev)`. The development share is
/// `floor(fraction · n)` (at least one item when `n ≥ 2`).
pub fn dev_split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(fraction > 0.0 && fraction < 1.0, "fraction must be in (0, 1)");
    let n = items.len();
    let mut dev_n = (fraction * n as f64 + 1e-9).floor() as usize;
    if n >= 2 {
        dev_n = dev_n.max(1);
    }
    let order = shuffled_indices(n, seed);
    let mut dev_idx = order[..dev_n].to_vec();
    let mut train_idx = order[dev_n..].to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    (
        train_idx.iter().map(|&i| items[i].clone()).collect(),
        dev_idx.iter().map(|&i| items[i].clone()).collect(),
    )
}
