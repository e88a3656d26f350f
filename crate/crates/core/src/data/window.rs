use std::sync::Arc;

use crate::data::{TCObservation, Track};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Historical,
    Future,
}

/// A `C×H×W` environmental grid for one 6-hour step, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvField {
    pub kind: FieldKind,
    pub time: i64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Arc<Vec<f32>>,
}

impl EnvField {
    pub fn new(kind: FieldKind, time: i64, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "env field size");
        Self { kind, time, channels, height, width, data: Arc::new(data) }
    }

    pub fn zeros(kind: FieldKind, time: i64, channels: usize, height: usize, width: usize) -> Self {
        Self::new(kind, time, channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn with_kind(&self, kind: FieldKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// One training/evaluation sample: `M` history fixes, `N` future fixes and
/// the matching environment fields.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackWindow {
    pub track_id: String,
    pub year: i32,
    pub history: Vec<TCObservation>,
    pub future: Vec<TCObservation>,
    pub env_hist: Vec<EnvField>,
    pub env_fut: Vec<EnvField>,
}

impl TrackWindow {
    /// Forecast origin: time of the last history fix.
    pub fn origin_time(&self) -> i64 {
        self.history.last().map_or(0, |o| o.time)
    }

    pub fn has_env(&self) -> bool {
        !self.env_hist.is_empty()
    }
}

/// Stride-1 windows; `max(0, len − M − N + 1)` of them.
pub fn make_windows(track: &Track, m: usize, n: usize) -> Vec<TrackWindow> {
    assert!(m >= 1 && n >= 1, "window sizes must be positive");
    let len = track.obs.len();
    if len < m + n {
        return Vec::new();
    }
    let with_env = track.env.len() == len;
    (0..=len - m - n)
        .map(|k| {
            let (env_hist, env_fut) = if with_env {
                (
                    track.env[k..k + m].iter().map(|f| f.with_kind(FieldKind::Historical)).collect(),
                    track.env[k + m..k + m + n].iter().map(|f| f.with_kind(FieldKind::Future)).collect(),
                )
            } else {
                (Vec::new(), Vec::new())
            };
            TrackWindow {
                track_id: track.id.clone(),
                year: track.year,
                history: track.obs[k..k + m].to_vec(),
                future: track.obs[k + m..k + m + n].to_vec(),
                env_hist,
                env_fut,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(len: usize) -> Track {
        let obs = (0..len)
            .map(|i| TCObservation { lat: 10.0 + i as f64, lon: 120.0, wind: 20.0, pressure: 990.0, time: i as i64 })
            .collect();
        Track { id: "T".into(), year: 2000, obs, env: Vec::new() }
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(&track(8), 4, 4).len(), 1);
        assert_eq!(make_windows(&track(7), 4, 4).len(), 0);
        let w = make_windows(&track(10), 4, 4);
        assert_eq!(w.len(), 3);
        for (k, win) in w.iter().enumerate() {
            assert_eq!(win.history[0].time, k as i64);
            assert_eq!(win.future[0].time, k as i64 + 4);
            assert_eq!(win.origin_time(), k as i64 + 3);
        }
    }
}
