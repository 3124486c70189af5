//! Auxiliary segmentation model used for cross-labeling and morphology embeddings.

pub mod labels;
pub mod net;
pub mod train;

pub use labels::{cross_label, morph_embed, rasterize_pseudo_masks, CrossLabel, PseudoMask, VoteMode};
pub use net::{AuxConfig, AuxSeg};
pub use train::{train_aux, AuxReport, AuxSample, AuxTrainConfig};
