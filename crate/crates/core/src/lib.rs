//! Hand-primed object-of-interest localization on synthetic egocentric
//! scenes, built from scratch.
//!
//! The crate trains two small fully convolutional networks on procedurally
//! generated desk scenes: a hand segmentation net, and an object localization
//! net that classifies the blob around the interacted object's center. The
//! interesting part is *hand priming*: feeding the hand net's output into the
//! localizer's feature blocks as an extra channel, against a zoo of baselines
//! (no hand input, frozen-trunk fine-tuning, a three-class formulation, and
//! hard-parameter-sharing multi-task variants).
//!
//! Layer by layer everything is implemented here: tensors, a reverse-mode
//! tape ([`tape::Tape`]), conv/pool/upsample kernels with a fixed summation
//! order so runs are bit-reproducible ([`kernels`]), Adam, the scene
//! generator, and COCO-style evaluation (mIoU, AP/AP50/AP75). Slow reference
//! implementations ([`reference`]) and finite differences back every fast
//! path in the tests.

pub mod error;
pub mod eval;
pub mod kernels;
pub mod models;
pub mod nn;
pub mod reference;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
