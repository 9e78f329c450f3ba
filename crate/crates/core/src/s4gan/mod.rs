//! Generator/discriminator branch: a segmentation network trained with
//! cross-entropy on labeled images, feature matching against an image-wise
//! discriminator, and self-training on discriminator-approved predictions.

pub mod discriminator;
pub mod generator;
pub mod losses;
pub mod train;

pub use discriminator::{discriminate, Critic, DiscOutput, Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig};
pub use losses::{
    discriminator_objective, feature_matching, loss_ce, loss_discriminator, loss_fm, loss_st,
    make_pseudo_labels, standard_gan_generator, DiscriminatorLoss, FmNorm, LossGrad, PseudoLabel,
    PROB_FLOOR, SCORE_CLAMP,
};
pub use train::{
    AdversarialTerm, LabeledPair, S4GanBranch, S4GanLosses, S4GanSettings, SegOptimizer,
};
