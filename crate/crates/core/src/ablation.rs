//! Sweep over the number of solver steps.
//!
//! Every entry trains a fresh model from the same initialisation seed on the
//! same data. `N = 0` is the bare vector field and `N = 1` a single residual
//! block.

use crate::data::Dataset;
use crate::error::Result;
use crate::field::VectorFieldConfig;
use crate::model::{Denoiser, Offsets};
use crate::train::{evaluate_model, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub steps: usize,
    pub params: usize,
    /// Wall time of forward, backward and update per 100 batches.
    pub seconds_per_100_batches: f64,
    /// Recorded forward work per batch; a deterministic cost measure.
    pub work_per_batch: u64,
    pub eval_psnr: f64,
}

pub const ABLATION_HEADER: &str = "N,params,seconds_per_100_batches,work_per_batch,eval_psnr";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.4},{},{}",
            self.steps, self.params, self.seconds_per_100_batches, self.work_per_batch, self.eval_psnr
        )
    }
}

pub fn run_ablation(
    field: &VectorFieldConfig,
    train: &TrainConfig,
    data: &Dataset,
    sweep: &[usize],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(sweep.len());
    for &n in sweep {
        let mut model = Denoiser::build(field.clone(), n)?;
        let mut trainer = Trainer::new(*train, &model)?;
        trainer.run(&mut model, data, |_| {})?;
        let report = evaluate_model(&model, &data.eval, train.batch_size, Offsets::Zero)?;
        let batches = trainer.steps().max(1);
        let row = AblationRow {
            steps: n,
            params: model.param_count(),
            seconds_per_100_batches: 100.0 * trainer.compute_seconds() / batches as f64,
            work_per_batch: trainer.work() / batches,
            eval_psnr: report.mean_psnr,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
