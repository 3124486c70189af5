//! Main-stage detector training with selective context gradients and the
//! cross-labeling post-training of the refinement head.

pub mod hungarian;
pub mod loss;
pub mod post;
pub mod selective;
pub mod step;
pub mod trainer;

pub use hungarian::{hungarian, MatchAssignment};
pub use loss::{detection_loss, match_proposals, LossVars, LossWeights, Target};
pub use selective::sample_context_gradients;
pub use step::{select_batch, step_gradients, Selection, StepGradients, StepStats};
pub use post::{
    aux_samples, fit_phi_prime, phi_samples, post_train_phi_prime, pre_detect, window_proposals, write_pseudo_labels_jsonl, LabelOrigin, PhiSample,
    PostConfig, PostReport, PreDetection, PseudoLabel, PseudoSource, PseudoStats,
};
pub use trainer::{evaluate, gt_point, score_slide, to_point, train_main, training_sample, EpochLog, EvalOutcome, Labeling, SlideData, TrainConfig, TrainReport};
