//! PGD attacks, adversarial and standard training, natural/robust evaluation.

mod augment;
mod pgd;
mod train;

pub use augment::Augment;
pub(crate) use pgd::{check_projection, sign};
pub use pgd::{pgd_attack, pgd_attack_traced, BallKind, PerturbationBall, PgdConfig, PROJECTION_SLACK};
pub(crate) use train::DIVERGENCE_LOSS;
pub use train::{
    adversarial_train, evaluate, standard_train, AdversarialTrainer, EpochRecord, EvalReport, LrSchedule, Sgd,
    TrainConfig, TrainOutcome,
};
