//! Forecast scoring, ensembles, the persistence baseline and ablations.

pub mod ablation;
pub mod forecast;
pub mod metrics;

pub use ablation::{evaluate_model, run_ablation, run_variant, AblationCell, AblationPlan};
pub use forecast::{ensemble_forecast, persistence_baseline, thread_count, to_records, window_key_hash, EnsembleForecast, EvalSet, THREADS_ENV};
pub use metrics::{
    evaluate, haversine, read_forecasts_csv, sample_errors, table_from_errors, write_forecasts_csv, write_sample_errors_csv,
    ForecastRecord, LeadRow, MetricsTable, SampleError, EARTH_RADIUS_KM, STEP_HOURS,
};
