//! Best-track observations and the CSV exchange format.
//!
//! ```text
//! track_id,timestamp,lat,lon,wind_ms,pressure_hpa
//! SYN0000,1980-01-04T00:00,12.5,140.25,18.4,1002.1
//! ```
//!
//! `timestamp` is either ISO-8601 (`YYYY-MM-DDTHH:MM[:SS]`, UTC, on a 6-hour
//! boundary) or a bare integer 6-hour step index.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDateTime};

use crate::data::EnvField;
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 6] = ["track_id", "timestamp", "lat", "lon", "wind_ms", "pressure_hpa"];

/// One best-track fix. `time` counts 6-hour steps since 1970-01-01T00:00Z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TCObservation {
    pub lat: f64,
    pub lon: f64,
    pub wind: f64,
    pub pressure: f64,
    pub time: i64,
}

impl TCObservation {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite = [self.lat, self.lon, self.wind, self.pressure].iter().all(|v| v.is_finite());
        if !finite {
            return Err("non-finite field".into());
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(format!("lat {} outside [-90, 90]", self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(format!("lon {} outside [-180, 180]", self.lon));
        }
        if self.wind < 0.0 {
            return Err(format!("wind {} is negative", self.wind));
        }
        if !(self.pressure > 850.0 && self.pressure < 1100.0) {
            return Err(format!("pressure {} outside (850, 1100)", self.pressure));
        }
        Ok(())
    }

    pub fn year(&self) -> i32 {
        step_to_datetime(self.time).year()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: String,
    pub year: i32,
    pub obs: Vec<TCObservation>,
    /// One field per observation, or empty when no environment is available.
    pub env: Vec<EnvField>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

const STEP_SECONDS: i64 = 6 * 3600;

pub fn step_to_datetime(step: i64) -> NaiveDateTime {
    chrono::DateTime::from_timestamp(step * STEP_SECONDS, 0)
        .expect("timestamp in range")
        .naive_utc()
}

pub fn format_step(step: i64) -> String {
    step_to_datetime(step).format("%Y-%m-%dT%H:%M").to_string()
}

pub fn parse_timestamp(s: &str) -> std::result::Result<i64, String> {
    let s = s.trim();
    if let Ok(step) = s.parse::<i64>() {
        return Ok(step);
    }
    let dt = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .ok_or_else(|| format!("unrecognized timestamp {s:?}"))?;
    let secs = dt.and_utc().timestamp();
    if secs % STEP_SECONDS != 0 {
        return Err(format!("timestamp {s:?} is not on a 6-hour boundary"));
    }
    Ok(secs / STEP_SECONDS)
}

/// Parses best-track CSV into tracks, in order of first appearance.
pub fn parse_best_track(text: &str) -> Result<Vec<Track>> {
    read_best_track(text.as_bytes())
}

pub fn read_best_track<R: Read>(reader: R) -> Result<Vec<Track>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let mut col = [0usize; 6];
    for (k, name) in COLUMNS.iter().enumerate() {
        col[k] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::Parse(format!("missing column `{name}`")))?;
    }
    let mut tracks: Vec<Track> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("row {row}: {e}")))?;
        let field = |k: usize| rec.get(col[k]).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            field(k).parse::<f64>().map_err(|_| Error::Validation {
                row,
                msg: format!("column `{}` is not a number: {:?}", COLUMNS[k], field(k)),
            })
        };
        let time = parse_timestamp(field(1)).map_err(|msg| Error::Validation { row, msg })?;
        let obs = TCObservation { lat: num(2)?, lon: num(3)?, wind: num(4)?, pressure: num(5)?, time };
        obs.validate().map_err(|msg| Error::Validation { row, msg })?;
        let id = field(0).to_string();
        let idx = *by_id.entry(id.clone()).or_insert_with(|| {
            tracks.push(Track { id, year: obs.year(), obs: Vec::new(), env: Vec::new() });
            tracks.len() - 1
        });
        let track = &mut tracks[idx];
        if let Some(prev) = track.obs.last() {
            if obs.time <= prev.time {
                return Err(Error::Validation {
                    row,
                    msg: format!("time not strictly increasing within track {}", track.id),
                });
            }
        }
        track.obs.push(obs);
    }
    Ok(tracks)
}

pub fn write_best_track<W: Write>(tracks: &[Track], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let map = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(COLUMNS).map_err(map)?;
    for t in tracks {
        for o in &t.obs {
            w.write_record([
                t.id.clone(),
                format_step(o.time),
                format!("{}", o.lat),
                format!("{}", o.lon),
                format!("{}", o.wind),
                format!("{}", o.pressure),
            ])
            .map_err(map)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "track_id,timestamp,lat,lon,wind_ms,pressure_hpa\n";

    #[test]
    fn one_row_one_track() {
        let text = format!("{HEADER}A,2019-08-01T06:00,15.0,130.0,20.0,990.0\n");
        let tracks = parse_best_track(&text).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].len(), 1);
        assert_eq!(tracks[0].year, 2019);
    }

    #[test]
    fn out_of_range_pressure_cites_row() {
        let text = format!("{HEADER}A,2019-08-01T06:00,15.0,130.0,20.0,2000\n");
        match parse_best_track(&text) {
            Err(Error::Validation { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let text = "track_id,timestamp,lat,lon,wind_ms\nA,0,1,2,3\n";
        let err = parse_best_track(text).unwrap_err().to_string();
        assert!(err.contains("pressure_hpa"), "{err}");
    }

    #[test]
    fn two_tracks_keep_their_lengths() {
        let mut text = HEADER.to_string();
        for k in 0..3 {
            text += &format!("A,{},10.0,120.0,15.0,1000.0\n", 100 + k);
        }
        for k in 0..5 {
            text += &format!("B,{},11.0,121.0,16.0,1001.0\n", 100 + k);
        }
        let tracks = parse_best_track(&text).unwrap();
        let lens: Vec<usize> = tracks.iter().map(|t| t.len()).collect();
        assert_eq!(lens, vec![3, 5]);
    }

    #[test]
    fn non_increasing_time_is_rejected() {
        let text = format!("{HEADER}A,10,10,120,15,1000\nA,10,10,120,15,1000\n");
        assert!(matches!(parse_best_track(&text), Err(Error::Validation { row: 3, .. })));
    }

    #[test]
    fn off_grid_timestamp_is_rejected() {
        assert!(parse_timestamp("2019-08-01T05:00").is_err());
        assert_eq!(parse_timestamp("1970-01-01T06:00").unwrap(), 1);
        assert_eq!(format_step(1), "1970-01-01T06:00");
    }
}
