//! Best-track ingestion, windowing, normalization, splits and synthetic data.

pub mod dataset;
pub mod envfile;
pub mod norm;
pub mod prepared;
pub mod split;
pub mod synth;
pub mod track;
pub mod window;

pub use dataset::{load_dataset, save_dataset, Manifest};
pub use prepared::{prepare, windows_of, Prepared};
pub use norm::{denormalize, normalize, wrap_lon, wrap_lon_delta, NormStats, NormWindow, WindowKey, ATTRS};
pub use split::{chronological_split, split_boundaries, Split};
pub use synth::{synth_dataset, SynthConfig};
pub use track::{
    format_step, parse_best_track, parse_timestamp, read_best_track, step_to_datetime, write_best_track,
    TCObservation, Track,
};
pub use window::{make_windows, EnvField, FieldKind, TrackWindow};
