//! Clean-label poisoning attacks against l-inf adversarial training.
//!
//! * [`data`]: datasets, poison plans and persistence.
//! * [`engine`]: small differentiable classifiers.
//! * [`adv`]: PGD, adversarial/standard training, evaluation.
//! * [`targeted`]: gradient-matching targeted poisons.
//! * [`untargeted`]: l0 stickers and error-minimizing noise.

pub mod adv;
pub mod data;
pub mod engine;
pub mod error;
pub mod rng;
pub mod targeted;
pub mod untargeted;

pub use error::{Error, Result};
