//! Subcommand bodies.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use physdiff::config::Ablation;
use physdiff::data::{save_dataset, synth_dataset};
use physdiff::evaluation::{
    ensemble_forecast, evaluate as score, read_forecasts_csv, run_ablation, sample_errors, table_from_errors,
    write_forecasts_csv, write_sample_errors_csv, AblationPlan, EvalSet, ForecastRecord, MetricsTable,
};
use physdiff::model::{Batch, Noise, PhysDiff};
use physdiff::piga::Task;
use physdiff::rng::stream;
use physdiff::training::{save_checkpoint, train as fit};

use crate::run::{
    load_source, make_run_dir, output_dir, prepared, resolve, CliError, CliResult, Loaded, BEST_CHECKPOINT,
    LAST_CHECKPOINT, RUN_CONFIG,
};
use crate::{Common, Source};

const GRADCHECK_KEY: u64 = 0x6C01;
const FEATURE_KEY: u64 = 0x6C02;

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn write_table(dir: &Path, table: &MetricsTable, stem: &str) -> CliResult<()> {
    write_text(&dir.join(format!("{stem}.json")), &table.to_json())?;
    write_text(&dir.join(format!("{stem}.txt")), &table.to_text())
}

pub fn synth_data(common: &Common, tracks: Option<usize>) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    if let Some(n) = tracks {
        cfg.synth.n_tracks = n;
        cfg.synth.validate().map_err(|e| CliError::usage(e.to_string()))?;
    }
    let out = common.out.clone().ok_or_else(|| CliError::usage("synth-data needs --out DIR"))?;
    let data = synth_dataset(&cfg.synth, cfg.seed)?;
    let manifest = save_dataset(&out, &data, Some(cfg.seed), Some(&cfg.synth))?;
    println!("wrote {} tracks ({} fixes) to {}", manifest.n_tracks, manifest.n_obs, out.display());
    Ok(())
}

pub fn train(common: &Common, epochs: Option<usize>, max_steps: Option<usize>) -> CliResult<()> {
    let mut cfg = resolve(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if max_steps.is_some() {
        cfg.train.max_steps = max_steps;
    }
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let data = prepared(&cfg)?;
    let dir = make_run_dir(common.out.as_deref().unwrap_or(Path::new("run")))?;
    write_text(&dir.join(RUN_CONFIG), &cfg.to_toml())?;
    let mut model = PhysDiff::new(&cfg.model, &cfg.diffusion, cfg.data.m, cfg.data.n, cfg.seed)?;
    let mut log = BufWriter::new(File::create(dir.join("metrics/train.jsonl"))?);
    let outcome = fit(&mut model, &data.train, &data.val, &cfg.train, Some(&mut log))?;
    log.flush()?;
    save_checkpoint(&model, &data.stats, &dir.join(LAST_CHECKPOINT))?;
    if let Some((epoch, values)) = &outcome.best {
        let mut best = PhysDiff::new(&cfg.model, &cfg.diffusion, cfg.data.m, cfg.data.n, cfg.seed)?;
        for (leaf, v) in best.ps.leaves_mut().iter_mut().zip(values) {
            leaf.value = v.clone();
        }
        save_checkpoint(&best, &data.stats, &dir.join(BEST_CHECKPOINT))?;
        println!("best validation loss at epoch {epoch}");
    }
    write_text(&dir.join("metrics/val_loss.json"), &serde_json::to_string(&outcome.val_losses).expect("floats"))?;
    let last = outcome.records.last();
    println!(
        "trained {} ({} steps, final loss {:.4})",
        cfg.model.ablation().tag(),
        outcome.records.len(),
        last.map_or(f64::NAN, |r| r.loss_total)
    );
    println!("{}", dir.display());
    Ok(())
}

fn test_set(l: &Loaded) -> CliResult<EvalSet> {
    let set = EvalSet::new(&l.prepared.split.test, &l.stats, l.model.m, l.model.n, l.cfg.eval.max_windows)?;
    if set.is_empty() {
        return Err(CliError::runtime("config", "test split has no complete windows"));
    }
    Ok(set)
}

fn sample(l: &Loaded, set: &EvalSet) -> CliResult<Vec<physdiff::evaluation::EnsembleForecast>> {
    Ok(ensemble_forecast(&l.model, &l.stats, &set.norm, l.cfg.eval.members, l.cfg.seed)?)
}

pub fn forecast(common: &Common, source: &Source, write_members: bool) -> CliResult<()> {
    let l = load_source(common, source)?;
    let set = test_set(&l)?;
    let fc = sample(&l, &set)?;
    let dir = output_dir(common, l.run_dir.as_deref(), "forecasts")?;
    let mean: Vec<ForecastRecord> = fc.iter().flat_map(|f| f.mean_records()).collect();
    let tag = l.model.cfg.ablation().tag();
    write_forecasts_csv(&mean, BufWriter::new(File::create(dir.join(format!("forecast-{tag}.csv")))?))?;
    if write_members {
        let mut w = csv_writer(&dir.join(format!("members-{tag}.csv")))?;
        let io = |e: csv::Error| CliError::runtime("io", e.to_string());
        w.write_record(["member", "track_id", "origin", "lead", "lat", "lon", "wind", "pressure"]).map_err(io)?;
        for f in &fc {
            for i in 0..f.members.len() {
                for r in f.member_records(i) {
                    let row = [
                        i.to_string(),
                        r.track_id,
                        r.origin.to_string(),
                        r.lead.to_string(),
                        r.lat.to_string(),
                        r.lon.to_string(),
                        r.wind.to_string(),
                        r.pressure.to_string(),
                    ];
                    w.write_record(&row).map_err(io)?;
                }
            }
        }
        w.flush()?;
    }
    println!("{} windows x {} members -> {}", set.len(), l.cfg.eval.members, dir.display());
    Ok(())
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::runtime("io", e.to_string()))
}

pub fn evaluate(
    common: &Common,
    source: &Source,
    forecasts: Option<&Path>,
    tag: Option<&str>,
    per_sample: bool,
) -> CliResult<()> {
    let (records, truths, persistence, tag, run_dir) = match forecasts {
        Some(path) => {
            let cfg = resolve(common)?;
            let data = prepared(&cfg)?;
            let set = EvalSet::new(&data.split.test, &data.stats, cfg.data.m, cfg.data.n, cfg.eval.max_windows)?;
            let records = read_forecasts_csv(File::open(path)?)?;
            (records, set.truths(), set.persistence(), tag.unwrap_or("forecast").to_string(), None)
        }
        None => {
            let l = load_source(common, source)?;
            let set = test_set(&l)?;
            let records = sample(&l, &set)?.iter().flat_map(|f| f.mean_records()).collect();
            let tag = tag.unwrap_or(l.model.cfg.ablation().tag()).to_string();
            (records, set.truths(), set.persistence(), tag, l.run_dir)
        }
    };
    let errors = sample_errors(&records, &truths)?;
    let table = table_from_errors(&errors, &tag);
    let base = score(&persistence, &truths, "persistence")?;
    let dir = output_dir(common, run_dir.as_deref(), "metrics")?;
    write_table(&dir, &table, &format!("metrics-{tag}"))?;
    write_table(&dir, &base, "metrics-persistence")?;
    if per_sample {
        write_sample_errors_csv(&errors, BufWriter::new(File::create(dir.join(format!("errors-{tag}.csv")))?))?;
    }
    print!("{}", table.to_text());
    print!("{}", base.to_text().lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    Ok(())
}

pub fn ablate(common: &Common) -> CliResult<()> {
    let cfg = resolve(common)?;
    let data = prepared(&cfg)?;
    let set = EvalSet::new(&data.split.test, &data.stats, cfg.data.m, cfg.data.n, cfg.eval.max_windows)?;
    let plan = AblationPlan {
        model: cfg.model.clone(),
        diffusion: cfg.diffusion.clone(),
        train: cfg.train.clone(),
        members: cfg.eval.members,
        init_seed: cfg.seed,
    };
    let dir = make_run_dir(common.out.as_deref().unwrap_or(Path::new("run")))?;
    write_text(&dir.join(RUN_CONFIG), &cfg.to_toml())?;
    let cells = run_ablation(&data, &set, &plan, &Ablation::ALL)?;
    let base = score(&set.persistence(), &set.truths(), "persistence")?;
    let mut all = Vec::new();
    for c in &cells {
        save_checkpoint(&c.model, &data.stats, &dir.join(format!("checkpoints/{}.pdck", c.ablation.tag())))?;
        write_table(&dir.join("metrics"), &c.table, &format!("metrics-{}", c.ablation.tag()))?;
        all.push(c.table.clone());
    }
    write_table(&dir.join("metrics"), &base, "metrics-persistence")?;
    all.push(base);
    write_text(&dir.join("metrics/ablation.json"), &serde_json::to_string_pretty(&all).expect("tables"))?;
    for (i, t) in all.iter().enumerate() {
        let text = t.to_text();
        print!("{}", if i == 0 { text } else { text.lines().skip(1).map(|l| format!("{l}\n")).collect() });
    }
    println!("{}", dir.display());
    Ok(())
}

pub fn grad_check(common: &Common, samples: usize, batch: usize, tol: f64) -> CliResult<()> {
    if samples == 0 || batch == 0 {
        return Err(CliError::usage("--samples and --batch must be positive"));
    }
    let cfg = resolve(common)?;
    let data = prepared(&cfg)?;
    let mut model = PhysDiff::new(&cfg.model, &cfg.diffusion, cfg.data.m, cfg.data.n, cfg.seed)?;
    let windows: Vec<_> = data.train.iter().take(batch).collect();
    let b = windows.len();
    let batch = Batch::new(windows)?;
    let mut rng = stream(cfg.seed, GRADCHECK_KEY, 0);
    let noise = Noise::draw(&mut rng, b, model.n, model.cfg.d_embedding, model.sched.t_max);
    let rep = model.check_gradients(&batch, &noise, samples, &mut rng)?;
    let worst = rep.worst.as_ref().map_or(String::new(), |w| {
        format!(" worst={}[{}] analytic={:.6e} numeric={:.6e}", w.name, w.index, w.analytic, w.numeric)
    });
    println!("grad-check checked={} max_rel_err={:.3e} tol={tol:.1e}{worst}", rep.checked, rep.max_rel_err);
    if rep.max_rel_err > tol || !rep.max_rel_err.is_finite() {
        return Err(CliError::runtime("grad-check", format!("max relative error {:.3e} exceeds {tol:.1e}", rep.max_rel_err)));
    }
    Ok(())
}

pub fn export_features(common: &Common, source: &Source, step: usize) -> CliResult<()> {
    let l = load_source(common, source)?;
    if step == 0 || step > l.model.sched.t_max {
        return Err(CliError::usage(format!("--step must lie in 1..={}", l.model.sched.t_max)));
    }
    if !l.model.cfg.piga_enabled {
        return Err(CliError::usage("this checkpoint has no PIGA module (ablation no-piga/no-both)"));
    }
    let set = test_set(&l)?;
    let dir = output_dir(common, l.run_dir.as_deref(), "forecasts")?;
    let path = dir.join(format!("features-t{step}.csv"));
    let mut w = BufWriter::new(File::create(&path)?);
    let d = l.model.cfg.d_sub();
    write!(w, "track_id,origin,stream")?;
    for k in 0..d {
        write!(w, ",f{k}")?;
    }
    writeln!(w)?;
    let mut rng = stream(l.cfg.seed, FEATURE_KEY, step as u64);
    for chunk in set.norm.chunks(64) {
        let refs: Vec<_> = chunk.iter().collect();
        let feats = l.model.stream_features(&refs, step, &mut rng)?.expect("PIGA enabled");
        for (nw, f) in chunk.iter().zip(feats) {
            for task in Task::ALL {
                write!(w, "{},{},{}", nw.key.track_id, nw.key.origin_time, task.name())?;
                for v in &f[task as usize] {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
    }
    w.flush()?;
    println!("{} windows x 3 streams x {d} features -> {}", set.len(), path.display());
    Ok(())
}
