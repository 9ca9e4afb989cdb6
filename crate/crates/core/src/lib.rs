//! Discrete image-to-speech captioning.
//!
//! Speech is represented by *speech units*: feature frames assigned to
//! their nearest K-means centroid with repeated ids collapsed. Images are
//! represented by *image units*: patch vectors replaced by the id of their
//! nearest codebook patch. A transformer decoder reads the image units as a
//! prefix and predicts speech units one at a time, and can start from a
//! decoder pretrained to predict caption words.
//!
//! | module | contents |
//! |---|---|
//! | [`units`] | unit sequences, repetition removal, the packed `UCU1` stream |
//! | [`codebook`], [`features`] | centroid tables and feature frames with their file formats |
//! | [`quantizer`] | K-means and speech-unit extraction |
//! | [`image_units`] | patch tokenizer, reconstruction, PPM io |
//! | [`bits`] | storage budget of raw versus unit representations |
//! | [`model`] | the decoder: loss, gradients, training, decoding, checkpoints |
//! | [`metrics`] | BLEU-4, ROUGE-L, CIDEr over token ids |
//! | [`datagen`] | seeded synthetic corpus |
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doctests of this crate.

pub mod bits;
pub mod codebook;
pub mod config;
pub mod datagen;
mod error;
pub mod features;
pub mod image_units;
pub mod metrics;
pub mod model;
pub mod quantizer;
pub mod units;

pub use codebook::Codebook;
pub use error::{Error, Result};
pub use features::FeatureSequence;
pub use image_units::{Image, PatchGrid};
pub use units::UnitSequence;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/units.md")]
    mod units {}
    #[doc = include_str!("../../../book/src/quantizer.md")]
    mod quantizer {}
    #[doc = include_str!("../../../book/src/image_units.md")]
    mod image_units {}
    #[doc = include_str!("../../../book/src/bits.md")]
    mod bits {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/datagen.md")]
    mod datagen {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
