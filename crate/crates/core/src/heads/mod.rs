//! Refinement module, the two-stage T-head, the one-stage S-head and the
//! dual-path mimic loss.

mod mimic;
mod refinement;
mod shead;
mod thead;

pub use mimic::{extract_student_features, mimic_loss, mimic_loss_on, COSINE_EPS};
pub use refinement::{refinement_loss, RefinementModule, RefinementOutput};
pub use shead::{SHead, SHeadLevel};
pub use thead::{box_head_loss, THead, THeadOutput};
