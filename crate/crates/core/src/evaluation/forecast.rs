//! Ensemble forecasting, the persistence baseline and evaluation sets.

use sha2::{Digest, Sha256};

use crate::data::{make_windows, normalize, NormStats, NormWindow, Track, TrackWindow, WindowKey, ATTRS};
use crate::error::{Error, Result};
use crate::evaluation::metrics::ForecastRecord;
use crate::model::PhysDiff;
use crate::rng::stream;

/// Windows per sampler call.
const CHUNK: usize = 32;
pub const THREADS_ENV: &str = "PHYSDIFF_THREADS";

/// Worker count: `PHYSDIFF_THREADS` if set and positive, else the number of
/// available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Stable 64-bit key of a window, used to derive its sampling streams.
pub fn window_key_hash(key: &WindowKey) -> u64 {
    let mut h = Sha256::new();
    h.update(key.track_id.as_bytes());
    h.update([0]);
    h.update(key.origin_time.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Raw and normalized views of the same windows.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub raw: Vec<TrackWindow>,
    pub norm: Vec<NormWindow>,
}

impl EvalSet {
    /// All stride-1 windows of `tracks`; `max_windows > 0` keeps an evenly
    /// spaced subset of that size.
    pub fn new(tracks: &[Track], stats: &NormStats, m: usize, n: usize, max_windows: usize) -> Result<Self> {
        let mut raw: Vec<TrackWindow> = tracks.iter().flat_map(|t| make_windows(t, m, n)).collect();
        if max_windows > 0 && raw.len() > max_windows {
            let len = raw.len();
            let keep: Vec<usize> = (0..max_windows).map(|i| i * len / max_windows).collect();
            raw = keep.into_iter().map(|i| raw[i].clone()).collect();
        }
        let norm = raw.iter().map(|w| normalize(w, stats)).collect::<Result<_>>()?;
        Ok(Self { raw, norm })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn truths(&self) -> Vec<ForecastRecord> {
        self.raw
            .iter()
            .flat_map(|w| {
                let origin = w.origin_time();
                w.future.iter().enumerate().map(move |(i, o)| ForecastRecord {
                    track_id: w.track_id.clone(),
                    origin,
                    lead: i + 1,
                    lat: o.lat,
                    lon: o.lon,
                    wind: o.wind,
                    pressure: o.pressure,
                })
            })
            .collect()
    }

    pub fn persistence(&self) -> Vec<ForecastRecord> {
        self.raw
            .iter()
            .flat_map(|w| {
                let rows = persistence_baseline(w);
                to_records(&w.track_id, w.origin_time(), &rows)
            })
            .collect()
    }
}

/// Every lead repeats the last observed `(lat, lon, wind, pressure)`.
pub fn persistence_baseline(w: &TrackWindow) -> Vec<[f64; ATTRS]> {
    let last = w.history.last().expect("window with history");
    vec![[last.lat, last.lon, last.wind, last.pressure]; w.future.len()]
}

pub fn to_records(track_id: &str, origin: i64, rows: &[[f64; ATTRS]]) -> Vec<ForecastRecord> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| ForecastRecord {
            track_id: track_id.to_string(),
            origin,
            lead: i + 1,
            lat: r[0],
            lon: r[1],
            wind: r[2],
            pressure: r[3],
        })
        .collect()
}

/// Forecast for one window in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleForecast {
    pub key: WindowKey,
    pub mean: Vec<[f64; ATTRS]>,
    pub members: Vec<Vec<[f64; ATTRS]>>,
}

impl EnsembleForecast {
    pub fn mean_records(&self) -> Vec<ForecastRecord> {
        to_records(&self.key.track_id, self.key.origin_time, &self.mean)
    }

    pub fn member_records(&self, i: usize) -> Vec<ForecastRecord> {
        to_records(&self.key.track_id, self.key.origin_time, &self.members[i])
    }
}

fn forecast_chunk(
    model: &PhysDiff,
    stats: &NormStats,
    windows: &[NormWindow],
    members: usize,
    root_seed: u64,
) -> Result<Vec<EnsembleForecast>> {
    let refs: Vec<&NormWindow> = windows.iter().collect();
    let mut rngs: Vec<_> = windows
        .iter()
        .flat_map(|w| {
            let k = window_key_hash(&w.key);
            (0..members as u64).map(move |i| stream(root_seed, k, i))
        })
        .collect();
    let samples = model.sample_windows(&refs, members, &mut rngs)?;
    Ok(windows
        .iter()
        .enumerate()
        .map(|(b, w)| {
            let mine = &samples[b * members..(b + 1) * members];
            let n = w.n();
            // normalized lat/lon are offsets from the origin, so averaging
            // them never crosses the dateline seam
            let mean: Vec<[f64; ATTRS]> = (0..n)
                .map(|r| {
                    let mut row = [0.0; ATTRS];
                    for s in mine {
                        for (a, v) in row.iter_mut().zip(s.row(r)) {
                            *a += v;
                        }
                    }
                    row.iter_mut().for_each(|a| *a /= members as f64);
                    stats.denormalize_row(&row, w.origin)
                })
                .collect();
            let members = mine.iter().map(|s| (0..n).map(|r| stats.denormalize_row(s.row(r), w.origin)).collect()).collect();
            EnsembleForecast { key: w.key.clone(), mean, members }
        })
        .collect())
}

/// `members` samples per window; member `i` of a window is driven by the
/// stream `(root_seed, window_key_hash, i)`, so it does not depend on the
/// member count, the batch layout or the thread count.
pub fn ensemble_forecast(
    model: &PhysDiff,
    stats: &NormStats,
    windows: &[NormWindow],
    members: usize,
    root_seed: u64,
) -> Result<Vec<EnsembleForecast>> {
    if members == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let chunks: Vec<&[NormWindow]> = windows.chunks(CHUNK).collect();
    let threads = thread_count().min(chunks.len()).max(1);
    if threads == 1 {
        let mut out = Vec::with_capacity(windows.len());
        for c in chunks {
            out.extend(forecast_chunk(model, stats, c, members, root_seed)?);
        }
        return Ok(out);
    }
    let results: Vec<Result<Vec<EnsembleForecast>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let mine: Vec<&[NormWindow]> = chunks.iter().skip(t).step_by(threads).copied().collect();
                s.spawn(move || {
                    let mut out = Vec::new();
                    for c in mine {
                        out.push(forecast_chunk(model, stats, c, members, root_seed)?);
                    }
                    Ok::<_, Error>(out)
                })
            })
            .collect();
        let per_thread: Vec<Result<Vec<Vec<EnsembleForecast>>>> =
            handles.into_iter().map(|h| h.join().expect("forecast worker panicked")).collect();
        let mut slots: Vec<Option<Result<Vec<EnsembleForecast>>>> = (0..chunks.len()).map(|_| None).collect();
        for (t, res) in per_thread.into_iter().enumerate() {
            match res {
                Ok(list) => {
                    for (j, v) in list.into_iter().enumerate() {
                        slots[t + j * threads] = Some(Ok(v));
                    }
                }
                Err(e) => slots[t] = Some(Err(e)),
            }
        }
        slots.into_iter().flatten().collect()
    });
    let mut out = Vec::with_capacity(windows.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}
