//! Split, normalize and window a track collection in one go.

use crate::data::{chronological_split, make_windows, normalize, NormStats, NormWindow, Split, Track};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Prepared {
    pub stats: NormStats,
    pub split: Split,
    pub train: Vec<NormWindow>,
    pub val: Vec<NormWindow>,
    pub test: Vec<NormWindow>,
}

impl Prepared {
    pub fn has_env(&self) -> bool {
        self.train.first().is_some_and(|w| w.env.is_some())
    }
}

pub fn windows_of(tracks: &[Track], stats: &NormStats, m: usize, n: usize) -> Result<Vec<NormWindow>> {
    let mut out = Vec::new();
    for t in tracks {
        for w in make_windows(t, m, n) {
            out.push(normalize(&w, stats)?);
        }
    }
    Ok(out)
}

/// Chronological split, train-only statistics, stride-1 windows per split.
pub fn prepare(tracks: Vec<Track>, m: usize, n: usize, train_frac: f64, val_frac: f64) -> Result<Prepared> {
    if m == 0 || n == 0 {
        return Err(Error::Config("M and N must be positive".into()));
    }
    let channels = tracks
        .iter()
        .find_map(|t| t.env.first().map(|f| f.channels))
        .unwrap_or(0);
    let split = chronological_split(tracks, train_frac, val_frac)?;
    let stats = NormStats::from_tracks(&split.train, channels)?;
    let train = windows_of(&split.train, &stats, m, n)?;
    if train.is_empty() {
        return Err(Error::Config(format!("no training track is long enough for M + N = {}", m + n)));
    }
    let val = windows_of(&split.val, &stats, m, n)?;
    let test = windows_of(&split.test, &stats, m, n)?;
    Ok(Prepared { stats, split, train, val, test })
}
