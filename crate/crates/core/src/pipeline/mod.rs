//! Data, training, inference, evaluation and persistence.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod infer;
pub mod raster;
pub mod train;

pub use ablation::{run_ablation, AblationTable, Variant, VARIANTS};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use data::{generate_scene, generate_split, read_split, write_split, Scene, Split};
pub use eval::{evaluate, EvalReport};
pub use infer::{infer, infer_all, infer_teacher, infer_teacher_all, InferenceTrace};
pub use raster::Image;
pub use train::{forward_losses, lr_at, train, train_step, CsvLog, LossReport, StepLog, TrainState, LOG_HEADER};
