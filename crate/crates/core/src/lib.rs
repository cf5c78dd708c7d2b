//! Hallucination detection for vision-language models.
//!
//! The crate samples several responses from a VLM on an image and on a
//! noise-distorted copy of it, clusters them into semantic equivalence
//! classes, contrasts the two class distributions and scores the entropy of
//! the result (vision-conditioned semantic entropy, VSE). Ground-truth labels
//! come from atomic-fact alignment (ALFA) between responses and references.
//!
//! All model inference sits behind the traits in [`backends`]; the scripted
//! mock in [`backends::mock`] makes every pipeline reproducible offline.

pub mod alfa;
pub mod backends;
pub mod baselines;
pub mod harness;
pub mod longform;
pub mod metrics;
pub mod perturb;
pub mod seed;
pub mod semantic;
pub mod vcse;

pub use backends::{BackendError, EntailmentModel, LanguageModel, VisionLanguageModel};
pub use perturb::ImageTensor;

pub use semantic::{GenSample, SemanticDistribution};
pub use vcse::{VseOutcome, VseScore};
