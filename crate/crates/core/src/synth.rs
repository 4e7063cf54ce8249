//! Offline synthetic corpus with planted aspect/opinion/sentiment patterns.
//!
//! Every sentence holds one aspect term and one opinion word placed more
//! than four tokens apart, so a token's sentiment is not recoverable from
//! its local convolutional context alone. The sentiment is drawn
//! independently of the aspect word. Adjacency is a token chain plus one
//! planted edge between the aspect head and the opinion word.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{chain_edges, write_adjacency, write_aspect_corpus, write_document_corpus, Document, Sentence, TagSchemes, BIO};
use crate::error::{Error, Result};

const LAPTOP_ASPECTS: &[&str] = &["screen", "battery", "keyboard", "battery life", "touch pad"];
const RESTAURANT_ASPECTS: &[&str] = &["food", "service", "staff", "wine list", "price"];
const OPINIONS: [&[&str]; 3] = [&["great", "good", "excellent"], &["awful", "bad", "terrible"], &["okay", "average"]];

/// `{A}` is the aspect term, `{O}` the opinion word.
const TEMPLATES: &[&str] = &[
    "the {A} of this one was so very {O} .",
    "i have to say the {A} on the whole is quite {O} .",
    "{O} , at least in my view , was the {A} .",
];

/// Number of sentence templates.
pub fn template_count() -> usize {
    TEMPLATES.len()
}

pub struct SynthCorpus {
    pub sentences: Vec<Sentence>,
    pub documents: Vec<Document>,
}

fn sentence<R: Rng>(rng: &mut R) -> (Sentence, usize, usize) {
    let domain = rng.gen_range(0..2);
    let aspects = if domain == 0 { LAPTOP_ASPECTS } else { RESTAURANT_ASPECTS };
    let aspect: Vec<&str> = aspects.choose(rng).expect("nonempty").split(' ').collect();
    let sentiment = rng.gen_range(0..3);
    let opinion = *OPINIONS[sentiment].choose(rng).expect("nonempty");
    let template = TEMPLATES.choose(rng).expect("nonempty");
    let mut tokens = Vec::new();
    let mut ate = Vec::new();
    let mut ote = Vec::new();
    let mut asc = Vec::new();
    let (mut a_head, mut o_pos) = (0, 0);
    for piece in template.split(' ') {
        match piece {
            "{A}" => {
                a_head = tokens.len();
                for (k, w) in aspect.iter().enumerate() {
                    tokens.push(w.to_string());
                    ate.push(if k == 0 { BIO.begin } else { BIO.inside });
                    ote.push(BIO.outside);
                    asc.push(Some(sentiment));
                }
            }
            "{O}" => {
                o_pos = tokens.len();
                tokens.push(opinion.to_string());
                ate.push(BIO.outside);
                ote.push(BIO.begin);
                asc.push(None);
            }
            w => {
                tokens.push(w.to_string());
                ate.push(BIO.outside);
                ote.push(BIO.outside);
                asc.push(None);
            }
        }
    }
    let n = tokens.len();
    let mut s = Sentence::new(tokens, ate, ote, asc);
    let mut edges = chain_edges(n);
    edges.push((a_head, o_pos));
    s.set_edges(&edges).expect("edges in range");
    (s, domain, sentiment)
}

/// Deterministic corpus of `n_sentences` labelled sentences and
/// `n_documents` short reviews carrying domain and sentiment labels.
pub fn generate(n_sentences: usize, n_documents: usize, seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = (0..n_sentences).map(|_| sentence(&mut rng).0).collect();
    let documents = (0..n_documents)
        .map(|_| {
            let k = rng.gen_range(1..=3);
            let mut sents = Vec::new();
            let (mut domain, mut sentiment) = (0, 0);
            for i in 0..k {
                // Every sentence in a review shares the first one's labels.
                let (s, d, p) = loop {
                    let c = sentence(&mut rng);
                    if i == 0 || (c.1 == domain && c.2 == sentiment) {
                        break c;
                    }
                };
                domain = d;
                sentiment = p;
                sents.push(s.tokens);
            }
            Document {
                sentences: sents,
                domain_gold: Some(domain),
                sentiment_gold: Some(sentiment),
                general_ids: Vec::new(),
                domain_ids: Vec::new(),
            }
        })
        .collect();
    SynthCorpus { sentences, documents }
}

/// Four-token labelled sentence and a one-sentence review, small enough
/// for exhaustive finite-difference checks.
pub fn gradcheck_sample() -> (Sentence, Document) {
    let tokens: Vec<String> = ["the", "screen", "looks", "great"].map(String::from).to_vec();
    let o = BIO.outside;
    let mut s = Sentence::new(tokens.clone(), vec![o, BIO.begin, o, o], vec![o, o, o, BIO.begin], vec![None, Some(0), None, None]);
    let mut edges = chain_edges(4);
    edges.push((1, 3));
    s.set_edges(&edges).expect("edges in range");
    let doc = Document {
        sentences: vec![tokens],
        domain_gold: Some(0),
        sentiment_gold: Some(0),
        general_ids: Vec::new(),
        domain_ids: Vec::new(),
    };
    (s, doc)
}

/// File names written by [`write_corpus`].
pub const TRAIN_FILE: &str = "train.tsv";
pub const TRAIN_ADJ_FILE: &str = "train.adj";
pub const TEST_FILE: &str = "test.tsv";
pub const TEST_ADJ_FILE: &str = "test.adj";
pub const DOCS_FILE: &str = "docs.jsonl";
pub const CONFIG_FILE: &str = "synthetic.cfg";

/// Writes train/test corpora with adjacency sidecars, the document corpus
/// and a ready-to-run config into `dir`.
pub fn write_corpus(dir: &Path, n_train: usize, n_test: usize, n_docs: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schemes = TagSchemes::default();
    let train = generate(n_train, n_docs, seed);
    let test = generate(n_test, 0, seed.wrapping_add(7919));
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(TRAIN_FILE, write_aspect_corpus(&train.sentences, &schemes))?;
    write(TRAIN_ADJ_FILE, write_adjacency(&train.sentences))?;
    write(TEST_FILE, write_aspect_corpus(&test.sentences, &schemes))?;
    write(TEST_ADJ_FILE, write_adjacency(&test.sentences))?;
    write(DOCS_FILE, write_document_corpus(&train.documents, &schemes))?;
    write(CONFIG_FILE, synthetic_config(seed))?;
    Ok(())
}

/// Config tuned for the synthetic corpus; paths are relative to the config.
pub fn synthetic_config(seed: u64) -> String {
    format!(
        "# synthetic corpus, small model\n\
         train_corpus = \"{TRAIN_FILE}\"\n\
         train_adjacency = \"{TRAIN_ADJ_FILE}\"\n\
         test_corpus = \"{TEST_FILE}\"\n\
         test_adjacency = \"{TEST_ADJ_FILE}\"\n\
         documents = \"{DOCS_FILE}\"\n\
         output_dir = \"out\"\n\
         d_general = 20\n\
         d_domain = 10\n\
         d_enc = 32\n\
         d_task = 32\n\
         d_route = 16\n\
         dropout = 0.0\n\
         lr = 0.003\n\
         batch_size = 8\n\
         doc_batch_size = 8\n\
         epochs = 200\n\
         pretrain_epochs = 2\n\
         dev_fraction = 0.0\n\
         target_accuracy = 1.0\n\
         seed = {seed}\n"
    )
}
