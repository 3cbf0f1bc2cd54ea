//! Training procedures, the label-budget grid, F1 evaluation and map
//! rendering.

pub mod config;
pub mod grid;
pub mod map;
pub mod metrics;
pub mod train;

use std::path::Path;

pub use config::{ExperimentConfig, Method, Preset, StainVariant, TrainHyper};
pub use grid::{
    prepare_data, pretrain_autoencoders, run_grid, run_grid_pretrained, split_data, CellSummary,
    ExperimentData, GridOutcome, Pretrained, ResultsTable, RunResult,
};
pub use map::{render_classification_map, ClassificationMap};
pub use metrics::{evaluate_f1, f1_score, metrics_from_predictions, Metrics};
pub use train::{
    encode_set, predict_semi_supervised, predict_supervised, predict_unsupervised,
    train_autoencoder, train_head, train_semi_supervised, train_supervised,
    train_unsupervised_labeling, LossCurve,
};

use crate::error::Result;
use crate::io_util::write_atomic;

pub fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "epoch,mean_loss")?;
        for (epoch, loss) in curve.iter().enumerate() {
            writeln!(w, "{},{loss:.8}", epoch + 1)?;
        }
        Ok(())
    })
}
