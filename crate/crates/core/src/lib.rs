//! Core algorithms for trimodal contrastive audio representation learning.
//!
//! Three encoders (log-mel spectrogram, raw waveform, video frames) are
//! trained jointly with a shared projector and a pairwise contrastive loss
//! that uses both intra- and inter-modality negatives. The frozen audio
//! encoders are then evaluated with shallow downstream classifiers.
//!
//! The crate is `no_std` (with `alloc`); file formats, threading and the
//! command line live in the `trimodal` companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod augment;
pub mod diffmath;
pub mod dsp;
pub mod error;
pub mod evaluate;
pub(crate) mod math;
pub mod modality;
pub mod model;
pub mod objective;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
