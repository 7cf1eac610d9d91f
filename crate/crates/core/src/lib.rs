//! Visual class embedding network for zero-shot semantic segmentation.
//!
//! The crate is `no_std` (with `alloc`) so the numerical pipeline can be embedded
//! anywhere; file formats, the dataset directory layout and the command line live
//! in the companion `vcenet` crate. Enable the default `std` feature for runtime
//! CPU feature detection in the matrix kernels.
//!
//! Pipeline, per query image:
//!
//! 1. [`backbone`]: a frozen feature extractor yields the segmentation feature
//!    `f_query` (256 channels) and the class-branch input `i_class` (C channels).
//! 2. [`mam`]: pyramid average pooling at ratios (1, 2, 3, 6), re-expanded and
//!    concatenated into a 5C-channel multi-scale feature.
//! 3. [`sam`]: compression to C/2, a non-local attention block, channel
//!    recovery and concatenation into the 2C-channel class embedding.
//! 4. [`ccm`]: pixel-wise comparison of `f_query` and the embedding through
//!    residual blocks and ASPP into a binary mask.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod backbone;
pub mod ccm;
pub mod checkpoint;
pub mod episode;
pub mod error;
pub mod image;
pub mod loss;
pub mod mam;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod sam;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
