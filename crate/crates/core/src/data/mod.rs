//! Corpora, embeddings, tagging schemes and batching.

mod batch;
mod corpus;
mod document;
mod embeddings;
mod schemes;

pub use batch::{dev_split, make_batches, shuffled_indices, Batch, Padded};
pub use corpus::{
    chain_edges, corpus_stats, extract_spans, first_bio_violation, identity_adjacency, is_valid_bio,
    load_adjacency, load_aspect_corpus, parse_adjacency, parse_aspect_corpus, tags_from_spans,
    write_adjacency, write_aspect_corpus, CorpusStats, Sentence, Span,
};
pub use document::{load_document_corpus, parse_document_corpus, write_document_corpus, Document};
pub use embeddings::{
    corpus_vocabulary, load_embeddings, DoubleEmbeddings, EmbeddingTable, VocabPolicy, RANDOM_INIT_RANGE,
};
pub use schemes::{Bio, TagSchemes, BIO};
