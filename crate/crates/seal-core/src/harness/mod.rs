//! Experiment plumbing: synthetic image datasets, small-scale training,
//! and the measurements that judge detectors and locks — false-positive
//! rates at non-overlapping positions, six-setting lock evaluation,
//! l1-pruning attacks, and Monte-Carlo validation of the probability
//! bounds.

pub mod dataset;
pub mod eval;
pub mod mc;
pub mod prune;
pub mod train;

pub use dataset::{
    dataset_from_bytes, dataset_to_bytes, flatten_images, load_dataset, save_dataset,
    DatasetSpec, ShapeClass, ShapesDataset,
};
pub use eval::{eval_fpr, eval_lock, fpr_csv, lock_csv, FprReport, Histogram, LockEval, SettingReport};
pub use mc::{
    calibration_csv, geometric_csv, validate_calibration_bound, validate_geometric_bound,
    CalibrationTrialReport, GeometricTrialRow, McDist,
};
pub use prune::{detector_survival, prune_l1};
pub use train::{accuracy, train_small, TrainOpts};
