//! Train-and-evaluate over the {PIGA} × {future fields} grid.

use crate::config::{Ablation, DiffusionConfig, ModelConfig, TrainConfig};
use crate::data::Prepared;
use crate::error::Result;
use crate::evaluation::forecast::{ensemble_forecast, EvalSet};
use crate::evaluation::metrics::{evaluate, MetricsTable};
use crate::model::PhysDiff;
use crate::training::{train, TrainOutcome};

/// Ensemble-mean metrics of `model` on `set`.
pub fn evaluate_model(model: &PhysDiff, prepared: &Prepared, set: &EvalSet, members: usize, seed: u64, tag: &str) -> Result<MetricsTable> {
    let fc = ensemble_forecast(model, &prepared.stats, &set.norm, members, seed)?;
    let records: Vec<_> = fc.iter().flat_map(|f| f.mean_records()).collect();
    evaluate(&records, &set.truths(), tag)
}

/// Shared settings for every grid cell.
#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub members: usize,
    /// Seeds parameter initialization; sampling uses `train.seed`.
    pub init_seed: u64,
}

pub struct AblationCell {
    pub ablation: Ablation,
    pub model: PhysDiff,
    pub outcome: TrainOutcome,
    pub table: MetricsTable,
}

/// Trains one variant on `prepared.train` and scores it on `set`.
pub fn run_variant(prepared: &Prepared, set: &EvalSet, plan: &AblationPlan, ablation: Ablation) -> Result<AblationCell> {
    let mut cfg = plan.model.clone();
    cfg.apply(ablation);
    let (m, n) = (prepared.train[0].m(), prepared.train[0].n());
    let mut model = PhysDiff::new(&cfg, &plan.diffusion, m, n, plan.init_seed)?;
    let outcome = train(&mut model, &prepared.train, &prepared.val, &plan.train, None)?;
    let table = evaluate_model(&model, prepared, set, plan.members, plan.train.seed, ablation.tag())?;
    Ok(AblationCell { ablation, model, outcome, table })
}

/// Every cell sees the same windows, batches, noise draws and budget.
pub fn run_ablation(prepared: &Prepared, set: &EvalSet, plan: &AblationPlan, grid: &[Ablation]) -> Result<Vec<AblationCell>> {
    grid.iter().map(|&a| run_variant(prepared, set, plan, a)).collect()
}
