//! Document-level neural machine translation with a cache-based word model.
//!
//! The toolkit trains a small attention-based encoder-decoder from scratch
//! (no external tensor library) and augments it with two caches resolved
//! against the shared target embedding table:
//!
//! - a dynamic cache holding recently produced target words (FIFO,
//!   duplicate-free, stop-word filtered), and
//! - a topic cache holding topical words for the document under translation,
//!   obtained from monolingual LDA models linked by a source-to-target
//!   topic projection.
//!
//! A dedicated scorer network rates cache words against the decoding context
//! and its distribution is mixed into the decoder's word distribution through
//! a learned sigmoid gate. Everything is driven by 64-bit reverse-mode
//! autodiff so gradient checks against finite differences are meaningful.

pub(crate) mod binfile;

pub mod cache;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod nmt;
pub mod numerics;
pub mod pipeline;
pub mod scorer;
pub mod synth;
pub mod topics;
