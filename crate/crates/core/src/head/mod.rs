//! The trainable detector head.

pub mod config;
pub mod model;
pub mod params;
pub mod select;

pub use config::{Branches, HeadConfig, NoiseScope};
pub use model::{
    assemble_branches, candidate_windows, compute_ltd, forward_head, gather_window, infer_logit, infer_logits, predict,
    BranchSequences, HeadForward, Selection, TransitionDiscrepancy,
};
pub use params::{HeadVars, LtdHeadParams};
pub use select::{sample_gumbel, select_on_tape, select_window, select_with_noise, SelectMode, SelectionResult};
