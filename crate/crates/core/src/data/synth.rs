//! Synthetic cyclone tracks with physically coupled attributes.
//!
//! Motion: a heading that turns steadily (recurvature) plus a Gaussian random
//! walk, with slowly accelerating speed. Intensity: a bell-shaped pressure
//! deficit lifecycle, and wind tied to pressure by
//! `wind = a·(p_env − p)^b + noise`. Each step carries an environment field
//! whose channel `c` holds a Gaussian blob displaced by `c·gain·u`, where `u`
//! is the displacement to the next fix; blob amplitude encodes the next
//! pressure tendency. Track `i` is drawn from its own ChaCha stream.

use serde::{Deserialize, Serialize};

use crate::data::norm::wrap_lon;
use crate::data::{EnvField, FieldKind, TCObservation, Track};
use crate::error::{Error, Result};
use crate::rng::{normal, stream, uniform, Prng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_tracks: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub channels: usize,
    pub grid: usize,
    /// Observation noise on positions, degrees.
    pub pos_noise: f64,
    /// Per-step heading random-walk std, radians.
    pub heading_walk: f64,
    pub pres_noise: f64,
    pub wind_noise: f64,
    pub field_noise: f64,
    pub p_env: f64,
    pub wind_a: f64,
    pub wind_b: f64,
    /// Blob displacement per channel, grid cells per degree of motion.
    pub blob_gain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tracks: 200,
            min_len: 20,
            max_len: 32,
            channels: 4,
            grid: 16,
            pos_noise: 0.02,
            heading_walk: 0.15,
            pres_noise: 1.0,
            wind_noise: 1.0,
            field_noise: 0.1,
            p_env: 1015.0,
            wind_a: 3.4,
            wind_b: 0.65,
            blob_gain: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_tracks == 0 {
            return bad("n_tracks must be positive");
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad("need 2 <= min_len <= max_len");
        }
        if self.channels == 0 || self.grid < 4 {
            return bad("need channels >= 1 and grid >= 4");
        }
        let noises = [self.pos_noise, self.heading_walk, self.pres_noise, self.wind_noise, self.field_noise];
        if noises.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("noise levels must be finite and non-negative");
        }
        if !(self.p_env > 900.0 && self.p_env < 1100.0) || !(self.wind_a > 0.0) || !(self.wind_b > 0.0) {
            return bad("wind-pressure constants out of range");
        }
        Ok(())
    }

    /// The noiseless wind-pressure relation used by the generator.
    pub fn wind_from_pressure(&self, p: f64) -> f64 {
        self.wind_a * (self.p_env - p).max(0.0).powf(self.wind_b)
    }
}

/// Generates `cfg.n_tracks` tracks with one env field per fix.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<Vec<Track>> {
    cfg.validate()?;
    Ok((0..cfg.n_tracks).map(|i| synth_track(cfg, seed, i)).collect())
}

fn synth_track(cfg: &SynthConfig, seed: u64, index: usize) -> Track {
    let mut rng = stream(seed, 0x5EED, index as u64);
    let len = cfg.min_len + (uniform(&mut rng, 0.0, 1.0) * (cfg.max_len - cfg.min_len + 1) as f64) as usize;
    let len = len.min(cfg.max_len);
    let year = 1980 + index as i32;
    // first fix somewhere in the first 200 days of the year, on a 6-h boundary
    let jan1 = chrono::NaiveDate::from_ymd_opt(year, 1, 1)
        .expect("valid year")
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc()
        .timestamp()
        / (6 * 3600);
    let t0 = jan1 + (uniform(&mut rng, 0.0, 800.0) as i64);

    // motion
    let mut lat = uniform(&mut rng, 8.0, 22.0);
    let mut lon = uniform(&mut rng, 120.0, 175.0);
    let mut heading = uniform(&mut rng, 150.0, 195.0).to_radians();
    let turn = uniform(&mut rng, 0.0, 0.1);
    let speed0 = uniform(&mut rng, 0.25, 0.6);
    let accel = uniform(&mut rng, 0.0, 0.03);
    let mut true_pos = Vec::with_capacity(len + 1);
    for t in 0..=len {
        true_pos.push((lat, lon));
        let s = speed0 * (1.0 + accel * t as f64);
        lat += s * heading.sin();
        lon += s * heading.cos();
        heading += -turn + cfg.heading_walk * normal(&mut rng);
    }

    // intensity lifecycle
    let peak_deficit = uniform(&mut rng, 25.0, 85.0);
    let peak_at = uniform(&mut rng, 0.35, 0.7);
    let width = uniform(&mut rng, 0.25, 0.4);
    let deficit = |t: usize| {
        let u = t as f64 / len as f64;
        5.0 + peak_deficit * (-((u - peak_at) / width).powi(2)).exp()
    };

    let mut obs = Vec::with_capacity(len);
    for (t, &(la, lo)) in true_pos.iter().take(len).enumerate() {
        let pressure = (cfg.p_env - deficit(t) + cfg.pres_noise * normal(&mut rng)).min(cfg.p_env - 0.5);
        let wind = (cfg.wind_from_pressure(pressure) + cfg.wind_noise * normal(&mut rng)).max(0.0);
        obs.push(TCObservation {
            lat: (la + cfg.pos_noise * normal(&mut rng)).clamp(-90.0, 90.0),
            lon: wrap_lon(lo + cfg.pos_noise * normal(&mut rng)),
            wind,
            pressure,
            time: t0 + t as i64,
        });
    }

    let env = (0..len)
        .map(|t| {
            let (a, b) = (true_pos[t], true_pos[t + 1]);
            let motion = (b.0 - a.0, b.1 - a.1);
            let tendency = deficit(t) - deficit(t + 1); // > 0 when filling
            env_field(cfg, &mut rng, t0 + t as i64, motion, tendency)
        })
        .collect();

    Track { id: format!("SYN{index:04}"), year, obs, env }
}

fn env_field(cfg: &SynthConfig, rng: &mut Prng, time: i64, motion: (f64, f64), tendency: f64) -> EnvField {
    let g = cfg.grid;
    let centre = (g as f64 - 1.0) / 2.0;
    let blob_sigma = g as f64 / 6.0;
    let amp = 1.0 + 0.1 * tendency;
    let mut data = Vec::with_capacity(cfg.channels * g * g);
    for c in 0..cfg.channels {
        let cy = centre + c as f64 * cfg.blob_gain * motion.0;
        let cx = centre + c as f64 * cfg.blob_gain * motion.1;
        for y in 0..g {
            for x in 0..g {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = amp * (-d2 / (2.0 * blob_sigma * blob_sigma)).exp() + cfg.field_noise * normal(rng);
                data.push(v as f32);
            }
        }
    }
    EnvField::new(FieldKind::Historical, time, cfg.channels, g, g, data)
}
