//! Synthetic glyph corpus with exact per-character masks.

pub mod corpus;
pub mod font;
pub mod image;
pub mod sample;

pub use corpus::{generate_samples, load_corpus, make_corpus, CorpusConfig, CorpusManifest};
pub use image::{crop_text_region, grayscale};
pub use sample::{render_sample, Alphabet, Canvas, GlyphSample};
