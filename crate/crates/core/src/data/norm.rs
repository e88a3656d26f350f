//! Normalization of windows into model space.
//!
//! Coordinates become offsets from the forecast origin (the last history
//! fix) in units of `coord_sigma`; longitude offsets are unwrapped across the
//! dateline first. Wind, pressure and each environment channel are z-scored
//! with training-split statistics. Row layout of the attribute matrices is
//! `(lat_rel, lon_rel, wind_norm, pressure_norm)`.

use serde::{Deserialize, Serialize};

use crate::data::{TCObservation, Track, TrackWindow};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ATTRS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub wind_mu: f64,
    pub wind_sigma: f64,
    pub pres_mu: f64,
    pub pres_sigma: f64,
    pub coord_sigma: f64,
    pub env_mu: Vec<f64>,
    pub env_sigma: Vec<f64>,
}

/// Wraps a longitude difference into `(-180, 180]`.
pub fn wrap_lon_delta(d: f64) -> f64 {
    let mut w = d - 360.0 * ((d + 180.0) / 360.0).floor();
    if w <= -180.0 {
        w += 360.0;
    }
    w
}

/// Wraps an absolute longitude into `[-180, 180]`.
pub fn wrap_lon(lon: f64) -> f64 {
    if (-180.0..=180.0).contains(&lon) {
        lon
    } else {
        wrap_lon_delta(lon)
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        s += v;
        s2 += v * v;
    }
    if n == 0 {
        return (0.0, 1.0, 0);
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(0.0);
    (mean, var.sqrt(), n)
}

impl NormStats {
    /// Statistics from the training split only.
    pub fn from_tracks(train: &[Track], channels: usize) -> Result<Self> {
        let obs = || train.iter().flat_map(|t| t.obs.iter());
        let (wind_mu, wind_sigma, n) = mean_std(obs().map(|o| o.wind));
        if n == 0 {
            return Err(Error::Config("cannot compute normalization from an empty split".into()));
        }
        let (pres_mu, pres_sigma, _) = mean_std(obs().map(|o| o.pressure));
        let disp = train.iter().flat_map(|t| {
            t.obs.windows(2).flat_map(|w| [w[1].lat - w[0].lat, wrap_lon_delta(w[1].lon - w[0].lon)])
        });
        let (_, coord_sigma, _) = mean_std(disp);
        let mut env_mu = vec![0.0; channels];
        let mut env_sigma = vec![1.0; channels];
        for c in 0..channels {
            let vals = train.iter().flat_map(|t| {
                t.env.iter().flat_map(move |f| {
                    let plane = f.height * f.width;
                    f.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64)
                })
            });
            let (mu, sd, cnt) = mean_std(vals);
            if cnt > 0 {
                env_mu[c] = mu;
                env_sigma[c] = if sd > 0.0 { sd } else { 1.0 };
            }
        }
        let fix = |s: f64| if s > 0.0 { s } else { 1.0 };
        let stats = Self {
            wind_mu,
            wind_sigma: fix(wind_sigma),
            pres_mu,
            pres_sigma: fix(pres_sigma),
            coord_sigma: fix(coord_sigma),
            env_mu,
            env_sigma,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [self.wind_sigma, self.pres_sigma, self.coord_sigma];
        if sigmas.iter().chain(&self.env_sigma).any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("normalization sigma must be positive and finite".into()));
        }
        if self.env_mu.len() != self.env_sigma.len() {
            return Err(Error::Config("env mean/sigma channel counts differ".into()));
        }
        Ok(())
    }

    pub fn normalize_obs(&self, o: &TCObservation, origin: (f64, f64)) -> [f64; ATTRS] {
        [
            (o.lat - origin.0) / self.coord_sigma,
            wrap_lon_delta(o.lon - origin.1) / self.coord_sigma,
            (o.wind - self.wind_mu) / self.wind_sigma,
            (o.pressure - self.pres_mu) / self.pres_sigma,
        ]
    }

    /// `(lat, lon, wind, pressure)` in physical units.
    pub fn denormalize_row(&self, row: &[f64], origin: (f64, f64)) -> [f64; ATTRS] {
        [
            origin.0 + row[0] * self.coord_sigma,
            wrap_lon(origin.1 + row[1] * self.coord_sigma),
            self.wind_mu + row[2] * self.wind_sigma,
            self.pres_mu + row[3] * self.pres_sigma,
        ]
    }

    /// Unwrapped longitude (may leave [-180, 180]); used for averaging.
    pub fn denormalize_row_unwrapped(&self, row: &[f64], origin: (f64, f64)) -> [f64; ATTRS] {
        let mut r = self.denormalize_row(row, origin);
        r[1] = origin.1 + row[1] * self.coord_sigma;
        r
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowKey {
    pub track_id: String,
    pub origin_time: i64,
}

/// A window in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct NormWindow {
    pub key: WindowKey,
    pub origin: (f64, f64),
    pub hist: Tensor,
    pub fut: Tensor,
    pub hist_times: Vec<i64>,
    pub fut_times: Vec<i64>,
    /// `(M+N)` z-scored fields of `C·H·W` values each, history first.
    pub env: Option<Vec<f64>>,
    pub env_dims: (usize, usize, usize),
}

impl NormWindow {
    pub fn m(&self) -> usize {
        self.hist.rows()
    }

    pub fn n(&self) -> usize {
        self.fut.rows()
    }

    pub fn field(&self, i: usize) -> Option<&[f64]> {
        let (c, h, w) = self.env_dims;
        let sz = c * h * w;
        self.env.as_ref().map(|e| &e[i * sz..(i + 1) * sz])
    }
}

pub fn normalize(w: &TrackWindow, stats: &NormStats) -> Result<NormWindow> {
    stats.validate()?;
    let last = w.history.last().ok_or_else(|| Error::Contract("window without history".into()))?;
    let origin = (last.lat, last.lon);
    let to_mat = |obs: &[TCObservation]| {
        let data = obs.iter().flat_map(|o| stats.normalize_obs(o, origin)).collect();
        Tensor::matrix(obs.len(), ATTRS, data)
    };
    let (env, env_dims) = if w.has_env() {
        let dims = w.env_hist[0].dims();
        let (c, h, wd) = dims;
        if c != stats.env_mu.len() {
            return Err(Error::Dimension(format!(
                "env fields have {c} channels, stats have {}",
                stats.env_mu.len()
            )));
        }
        let plane = h * wd;
        let mut out = Vec::with_capacity((w.env_hist.len() + w.env_fut.len()) * c * plane);
        for f in w.env_hist.iter().chain(&w.env_fut) {
            if f.dims() != dims {
                return Err(Error::Dimension("env fields differ in shape within a window".into()));
            }
            for ch in 0..c {
                let (mu, sd) = (stats.env_mu[ch], stats.env_sigma[ch]);
                out.extend(f.data[ch * plane..(ch + 1) * plane].iter().map(|&v| (v as f64 - mu) / sd));
            }
        }
        (Some(out), dims)
    } else {
        (None, (stats.env_mu.len(), 0, 0))
    };
    Ok(NormWindow {
        key: WindowKey { track_id: w.track_id.clone(), origin_time: last.time },
        origin,
        hist: to_mat(&w.history),
        fut: to_mat(&w.future),
        hist_times: w.history.iter().map(|o| o.time).collect(),
        fut_times: w.future.iter().map(|o| o.time).collect(),
        env,
        env_dims,
    })
}

/// Inverse of [`normalize`] for the attribute rows.
pub fn denormalize(nw: &NormWindow, stats: &NormStats) -> (Vec<TCObservation>, Vec<TCObservation>) {
    let conv = |m: &Tensor, times: &[i64]| {
        (0..m.rows())
            .map(|i| {
                let [lat, lon, wind, pressure] = stats.denormalize_row(m.row(i), nw.origin);
                TCObservation { lat, lon, wind, pressure, time: times[i] }
            })
            .collect()
    };
    (conv(&nw.hist, &nw.hist_times), conv(&nw.fut, &nw.fut_times))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats() -> NormStats {
        NormStats {
            wind_mu: 25.0,
            wind_sigma: 10.0,
            pres_mu: 985.0,
            pres_sigma: 15.0,
            coord_sigma: 0.5,
            env_mu: vec![0.0],
            env_sigma: vec![1.0],
        }
    }

    #[test]
    fn origin_maps_to_zero_and_mean_wind_to_zero() {
        let o = TCObservation { lat: 20.0, lon: 150.0, wind: 25.0, pressure: 990.0, time: 0 };
        let r = stats().normalize_obs(&o, (20.0, 150.0));
        assert_eq!((r[0], r[1], r[2]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn dateline_is_unwrapped() {
        let o = TCObservation { lat: 20.0, lon: -179.5, wind: 25.0, pressure: 990.0, time: 0 };
        let r = stats().normalize_obs(&o, (20.0, 179.5));
        assert!((r[1] - 2.0).abs() < 1e-12);
        let back = stats().denormalize_row(&r, (20.0, 179.5));
        assert!((back[1] + 179.5).abs() < 1e-9);
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let mut s = stats();
        s.coord_sigma = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn wrap_delta_range() {
        assert_eq!(wrap_lon_delta(180.0), 180.0);
        assert_eq!(wrap_lon_delta(-180.0), 180.0);
        assert!((wrap_lon_delta(359.0) + 1.0).abs() < 1e-12);
        assert!((wrap_lon_delta(-270.0) - 90.0).abs() < 1e-12);
    }
}
