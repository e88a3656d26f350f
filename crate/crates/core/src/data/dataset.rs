//! On-disk dataset directory: `tracks.csv`, optional `env.pdef` and
//! `manifest.toml`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::envfile::{read_env_fields, write_env_fields};
use crate::data::{read_best_track, write_best_track, SynthConfig, Track};
use crate::error::{Error, Result};

pub const TRACKS_FILE: &str = "tracks.csv";
pub const ENV_FILE: &str = "env.pdef";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_tracks: usize,
    pub n_obs: usize,
    pub has_env: bool,
    pub seed: Option<u64>,
    pub synth: Option<SynthConfig>,
}

pub fn save_dataset(dir: &Path, tracks: &[Track], seed: Option<u64>, synth: Option<&SynthConfig>) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    write_best_track(tracks, BufWriter::new(File::create(dir.join(TRACKS_FILE))?))?;
    let has_env = !tracks.is_empty() && tracks.iter().all(|t| t.env.len() == t.obs.len());
    if has_env {
        let fields: Vec<_> = tracks.iter().flat_map(|t| t.env.iter()).collect();
        write_env_fields(&fields, BufWriter::new(File::create(dir.join(ENV_FILE))?))?;
    }
    let manifest = Manifest {
        n_tracks: tracks.len(),
        n_obs: tracks.iter().map(|t| t.obs.len()).sum(),
        has_env,
        seed,
        synth: synth.cloned(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Loads `tracks.csv` and, when present, `env.pdef` (fields in CSV row order).
/// `path` may be the directory or the CSV file itself.
pub fn load_dataset(path: &Path) -> Result<Vec<Track>> {
    let (csv, dir) = if path.is_dir() {
        (path.join(TRACKS_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let mut tracks = read_best_track(BufReader::new(File::open(&csv)?))?;
    let env_path = dir.join(ENV_FILE);
    if env_path.exists() {
        let times: Vec<i64> = tracks.iter().flat_map(|t| t.obs.iter().map(|o| o.time)).collect();
        let mut fields = read_env_fields(BufReader::new(File::open(env_path)?), &times)?.into_iter();
        for t in &mut tracks {
            t.env = fields.by_ref().take(t.obs.len()).collect();
        }
    }
    Ok(tracks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    #[test]
    fn save_load_round_trip() {
        let cfg = SynthConfig { n_tracks: 3, ..SynthConfig::default() };
        let tracks = synth_dataset(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(dir.path(), &tracks, Some(5), Some(&cfg)).unwrap();
        assert!(m.has_env);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in tracks.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.env, b.env);
            for (x, y) in a.obs.iter().zip(&b.obs) {
                assert!((x.lat - y.lat).abs() < 1e-6 && (x.pressure - y.pressure).abs() < 1e-6);
                assert_eq!(x.time, y.time);
            }
        }
    }
}
