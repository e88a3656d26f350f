//! Config resolution, data loading, run directories and error reporting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use physdiff::config::{Ablation, RunConfig};
use physdiff::data::{load_dataset, prepare, synth_dataset, NormStats, Prepared, Track};
use physdiff::error::Error;
use physdiff::model::PhysDiff;
use physdiff::training::{load_checkpoint, load_checkpoint_for};

use crate::{Common, Source};

pub const RUN_CONFIG: &str = "config/run.toml";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.pdck";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.pdck";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: String,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, kind: "usage".into(), msg: msg.into() }
    }

    pub fn runtime(kind: &str, msg: impl Into<String>) -> Self {
        Self { code: 1, kind: kind.into(), msg: msg.into() }
    }

    /// `error kind=<kind> code=<code> msg=<json string>` on one stderr line.
    pub fn report(&self) -> ExitCode {
        let msg = serde_json::to_string(&self.msg.replace('\n', " ")).unwrap_or_default();
        eprintln!("error kind={} code={} msg={}", self.kind, self.code, msg);
        ExitCode::from(self.code)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Self { code, kind: e.kind().into(), msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime("io", e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn set_path(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, value) = spec.split_once('=').ok_or_else(|| CliError::usage(format!("--set `{spec}`: expected KEY=VALUE")))?;
    let value: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        // bare words are strings, so `--set data.path=foo/bar` works unquoted
        Err(_) => toml::Value::String(value.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        cur = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("--set `{key}`: `{s}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// File (or defaults), then `--set`, then the dedicated flags.
pub fn resolve(common: &Common) -> CliResult<RunConfig> {
    let base = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_toml(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let mut cfg = base;
    if !common.set.is_empty() {
        let mut table: toml::Table = cfg.to_toml().parse().map_err(|e| CliError::usage(format!("{e}")))?;
        for s in &common.set {
            set_path(&mut table, s)?;
        }
        cfg = RunConfig::from_toml(&table.to_string()).map_err(|e| CliError::usage(format!("--set: {e}")))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(a) = &common.ablate {
        cfg.model.apply(Ablation::parse(a).map_err(|e| CliError::usage(e.to_string()))?);
    }
    if let Some(m) = common.members {
        cfg.eval.members = m;
    }
    if let Some(n) = common.leads {
        cfg.data.n = n;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(cfg)
}

pub fn load_tracks(cfg: &RunConfig) -> CliResult<Vec<Track>> {
    Ok(match &cfg.data.path {
        Some(p) => load_dataset(p)?,
        None => synth_dataset(&cfg.synth, cfg.seed)?,
    })
}

pub fn prepared(cfg: &RunConfig) -> CliResult<Prepared> {
    let p = prepare(load_tracks(cfg)?, cfg.data.m, cfg.data.n, cfg.data.train_frac, cfg.data.val_frac)?;
    if let Some(w) = p.train.iter().find(|w| w.env.is_some()) {
        let (c, h, wd) = w.env_dims;
        let want = (cfg.model.env_channels, cfg.model.env_grid, cfg.model.env_grid);
        if (c, h, wd) != want {
            return Err(CliError::usage(format!(
                "dataset env fields are {c}x{h}x{wd} but model expects {}x{}x{} (set model.env_channels / model.env_grid)",
                want.0, want.1, want.2
            )));
        }
    }
    Ok(p)
}

/// `<root>/<UTC timestamp>` with the four standard subdirectories.
pub fn make_run_dir(root: &Path) -> CliResult<PathBuf> {
    let stamp = chrono::DateTime::<chrono::Utc>::from(std::time::SystemTime::now()).format("%Y%m%dT%H%M%SZ").to_string();
    let mut dir = root.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{stamp}-{k}"));
        k += 1;
    }
    for sub in ["config", "checkpoints", "metrics", "forecasts"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    Ok(dir)
}

/// Model and config for `forecast`/`evaluate`/`export-features`.
pub struct Loaded {
    pub cfg: RunConfig,
    pub model: PhysDiff,
    /// Normalization stored with the checkpoint.
    pub stats: NormStats,
    pub prepared: Prepared,
    pub run_dir: Option<PathBuf>,
}

pub fn load_source(common: &Common, source: &Source) -> CliResult<Loaded> {
    let (mut cfg, ck, run_dir) = match (&source.run, &source.checkpoint) {
        (Some(_), Some(_)) => return Err(CliError::usage("give either --run or --checkpoint, not both")),
        (Some(run), None) => {
            let mut c = common.clone();
            if c.config.is_none() {
                c.config = Some(run.join(RUN_CONFIG));
            }
            let best = run.join(BEST_CHECKPOINT);
            let ck = if best.exists() { best } else { run.join(LAST_CHECKPOINT) };
            (resolve(&c)?, ck, Some(run.clone()))
        }
        (None, Some(ck)) => (resolve(common)?, ck.clone(), None),
        (None, None) => return Err(CliError::usage("need --run DIR or --checkpoint PATH")),
    };
    let (model, stats) = if common.config.is_some() || source.run.is_some() {
        load_checkpoint_for(&ck, &cfg.model, &cfg.diffusion, (cfg.data.m, cfg.data.n))?
    } else {
        // without a config, the checkpoint's own spec decides the model shape
        let (model, stats) = load_checkpoint(&ck)?;
        cfg.model = model.cfg.clone();
        cfg.diffusion = model.diffusion.clone();
        cfg.data.m = model.m;
        cfg.data.n = model.n;
        (model, stats)
    };
    if common.leads.is_some_and(|n| n != model.n) {
        return Err(CliError::usage(format!("--leads {} does not match the checkpoint horizon {}", cfg.data.n, model.n)));
    }
    let prepared = prepared(&cfg)?;
    Ok(Loaded { cfg, model, stats, prepared, run_dir })
}

/// `--out`, else the run's subdirectory, else the current directory.
pub fn output_dir(common: &Common, run_dir: Option<&Path>, sub: &str) -> CliResult<PathBuf> {
    let dir = match (&common.out, run_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(r)) => r.join(sub),
        (None, None) => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
