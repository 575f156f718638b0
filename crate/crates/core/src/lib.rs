//! Word-level recognizer for printed Urdu, trained with permutation
//! language modeling over contextual glyph labels.
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod imaging;
pub mod lexicon;
pub mod model;
pub mod plm;
pub mod shaping;
pub mod tensor;
pub mod train;
