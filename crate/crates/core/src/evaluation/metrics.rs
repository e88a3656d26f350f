//! Great-circle error, per-lead MAE tables and their text/JSON/CSV forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Hours per lead step.
pub const STEP_HOURS: usize = 6;

/// Great-circle distance between `(lat, lon)` pairs in degrees, km.
pub fn haversine(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (i, (lat, lon)) in [a, b].into_iter().enumerate() {
        if !(-90.0..=90.0).contains(&lat) || !(-360.0..=360.0).contains(&lon) {
            return Err(Error::Validation { row: i, msg: format!("coordinate ({lat}, {lon}) out of range") });
        }
    }
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

/// One forecast (or truth) value at one lead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub track_id: String,
    /// Origin time in 6-h steps since the epoch.
    pub origin: i64,
    /// 1-based lead in steps.
    pub lead: usize,
    pub lat: f64,
    pub lon: f64,
    pub wind: f64,
    pub pressure: f64,
}

impl ForecastRecord {
    pub fn key(&self) -> (String, i64, usize) {
        (self.track_id.clone(), self.origin, self.lead)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadRow {
    pub tag: String,
    pub lead: usize,
    pub hours: usize,
    pub traj_km: f64,
    pub pres_hpa: f64,
    pub wind_ms: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub tag: String,
    pub rows: Vec<LeadRow>,
}

/// Per-sample absolute errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub track_id: String,
    pub origin: i64,
    pub lead: usize,
    pub traj_km: f64,
    pub pres_hpa: f64,
    pub wind_ms: f64,
}

fn key_str(k: &(String, i64, usize)) -> String {
    format!("{}@{}+{}", k.0, k.1, k.2)
}

/// Pairs forecasts with truths by `(track, origin, lead)` and returns the
/// per-sample errors in key order.
pub fn sample_errors(forecasts: &[ForecastRecord], truths: &[ForecastRecord]) -> Result<Vec<SampleError>> {
    let index = |rs: &[ForecastRecord], what: &str| -> Result<BTreeMap<(String, i64, usize), usize>> {
        let mut m = BTreeMap::new();
        for (i, r) in rs.iter().enumerate() {
            if m.insert(r.key(), i).is_some() {
                return Err(Error::Validation { row: i, msg: format!("duplicate {what} key {}", key_str(&r.key())) });
            }
        }
        Ok(m)
    };
    let f = index(forecasts, "forecast")?;
    let t = index(truths, "truth")?;
    let unmatched: Vec<String> = f
        .keys()
        .filter(|k| !t.contains_key(*k))
        .chain(t.keys().filter(|k| !f.contains_key(*k)))
        .map(key_str)
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::Misaligned(unmatched));
    }
    f.iter()
        .map(|(k, &i)| {
            let (p, o) = (&forecasts[i], &truths[t[k]]);
            Ok(SampleError {
                track_id: k.0.clone(),
                origin: k.1,
                lead: k.2,
                traj_km: haversine((p.lat, p.lon), (o.lat, o.lon))?,
                pres_hpa: (p.pressure - o.pressure).abs(),
                wind_ms: (p.wind - o.wind).abs(),
            })
        })
        .collect()
}

/// Mean errors per lead. Sums run in key order, so the result does not
/// depend on the order of the inputs.
pub fn evaluate(forecasts: &[ForecastRecord], truths: &[ForecastRecord], tag: &str) -> Result<MetricsTable> {
    Ok(table_from_errors(&sample_errors(forecasts, truths)?, tag))
}

pub fn table_from_errors(errors: &[SampleError], tag: &str) -> MetricsTable {
    let mut acc: BTreeMap<usize, (f64, f64, f64, usize)> = BTreeMap::new();
    for e in errors {
        let a = acc.entry(e.lead).or_default();
        a.0 += e.traj_km;
        a.1 += e.pres_hpa;
        a.2 += e.wind_ms;
        a.3 += 1;
    }
    let rows = acc
        .into_iter()
        .map(|(lead, (t, p, w, c))| {
            let n = c as f64;
            LeadRow {
                tag: tag.to_string(),
                lead,
                hours: lead * STEP_HOURS,
                traj_km: t / n,
                pres_hpa: p / n,
                wind_ms: w / n,
                count: c,
            }
        })
        .collect();
    MetricsTable { tag: tag.to_string(), rows }
}

impl MetricsTable {
    pub fn row(&self, lead: usize) -> Option<&LeadRow> {
        self.rows.iter().find(|r| r.lead == lead)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>5} {:>6} {:>12} {:>12} {:>11} {:>7}", "tag", "lead", "hours", "traj_km", "pres_hPa", "wind_m/s", "count");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>6} {:>12.3} {:>12.3} {:>11.3} {:>7}",
                r.tag, r.lead, r.hours, r.traj_km, r.pres_hpa, r.wind_ms, r.count
            );
        }
        s
    }
}

pub fn write_sample_errors_csv<W: Write>(errors: &[SampleError], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for e in errors {
        wr.serialize(e).map_err(|e| Error::Parse(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_forecasts_csv<W: Write>(records: &[ForecastRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_forecasts_csv<R: std::io::Read>(r: R) -> Result<Vec<ForecastRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::Validation { row: i + 1, msg: e.to_string() }))
        .collect()
}
