//! Open-vocabulary sound event detection.
//!
//! The pipeline detects sound events at frame resolution from per-class
//! query vectors that may come from text prompts or audio exemplars, so a
//! deployed model can be pointed at classes it was never trained on. The
//! crate is organized along the data path:
//!
//! * [`numerics`]: tensors, a recorded-graph reverse-mode autodiff engine
//!   with a closed operator set, parameter storage, checkpoints, and a
//!   finite-difference gradient oracle.
//! * [`frontend`]: WAV decoding, STFT/mel spectrograms, and the training
//!   augmentations (mixup, time shift, spectrogram masking).
//! * [`querybank`]: embedding providers and the on-disk store of per-class
//!   query vectors.
//! * [`encoder`]: the two-resolution audio encoder and its fusion.
//! * [`decoder`]: query refinement over encoder features, the clip and
//!   frame heads, attention masking strategies, and the full model.
//! * [`roster`]: strong-label event lists and their TSV form.
//! * [`training`]: losses, label ontology tooling, the synthetic corpus
//!   generator, the optimizer, and the training loop.
//! * [`eval`]: event extraction, median filtering, and the detection
//!   score over per-class ROC curves.

pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod frontend;
pub mod numerics;
pub mod querybank;
pub mod roster;
pub mod training;
