//! Desk-scale tasks: checkerboard classification and a character-level LM.

mod boundaries;
mod checkerboard;
mod corpus;
mod lm;
mod loss;

pub use boundaries::{export_boundaries, BoundaryExport, BoundarySegment, Domain};
pub use checkerboard::{
    accuracy, checkerboard_csv, gen_checkerboard, CheckerboardSpec, Classifier, Dataset, INPUT_SCALE,
    INPUT_SHIFT,
};
pub use corpus::{nested_paren_corpus, CharVocab, Corpus};
pub use lm::{FfForward, LayerGrads, LmCache, LmConfig, LmGrads, LmLayer, TinyLM};
pub use loss::{cross_entropy, log_softmax_row, perplexity};
