use crate::data::Track;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Track>,
    pub val: Vec<Track>,
    pub test: Vec<Track>,
}

/// Boundaries `(train_end, val_end)` into a year-sorted track list.
///
/// Targets are `floor(n·train_frac)` and `floor(n·(train_frac+val_frac))`;
/// each boundary then moves forward past any tracks sharing the year of the
/// track just before it, so a year never straddles two splits.
pub fn split_boundaries(years: &[i32], train_frac: f64, val_frac: f64) -> Result<(usize, usize)> {
    let ok = |f: f64| f > 0.0 && f < 1.0;
    if !ok(train_frac) || !ok(val_frac) || train_frac + val_frac >= 1.0 {
        return Err(Error::Config(format!(
            "split fractions must lie in (0,1) with sum < 1, got {train_frac}/{val_frac}"
        )));
    }
    let n = years.len();
    let target = |f: f64| ((n as f64 * f) + 1e-9).floor() as usize;
    let extend = |mut b: usize| {
        while b > 0 && b < n && years[b] == years[b - 1] {
            b += 1;
        }
        b
    };
    let train_end = extend(target(train_frac));
    let val_end = extend(target(train_frac + val_frac).max(train_end));
    let sizes = [train_end, val_end - train_end, n - val_end];
    if sizes.contains(&0) {
        return Err(Error::Config(format!(
            "split of {n} tracks would leave an empty partition (train/val/test = {}/{}/{})",
            sizes[0], sizes[1], sizes[2]
        )));
    }
    Ok((train_end, val_end))
}

/// Chronological split keyed on storm year (stable within a year).
pub fn chronological_split(mut tracks: Vec<Track>, train_frac: f64, val_frac: f64) -> Result<Split> {
    tracks.sort_by_key(|t| t.year);
    let years: Vec<i32> = tracks.iter().map(|t| t.year).collect();
    let (a, b) = split_boundaries(&years, train_frac, val_frac)?;
    let test = tracks.split_off(b);
    let val = tracks.split_off(a);
    Ok(Split { train: tracks, val, test })
}
