//! Loss curves, comparison tables and success-rate tables from run
//! directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use care_core::checkpoint::Checkpoint;
use care_core::error::{CareError, Result};
use care_core::evalharness::{bar_chart, compare_runs, line_chart, MetricsReport, LP_MSE, ROLLOUT_SUCCESS, SPCFC};
use care_core::finetune::FINETUNE_METRICS_FILE;
use care_core::pretrain::{PretrainConfig, FINAL_DIR, METRICS_FILE};
use serde_json::Value;

const MAX_POINTS: usize = 400;

struct Run {
    name: String,
    dir: PathBuf,
    /// Report file stem → report.
    reports: BTreeMap<String, MetricsReport>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Report JSON files directly in `dir` or one level below it.
fn find_reports(dir: &Path) -> Result<BTreeMap<String, MetricsReport>> {
    let mut out = BTreeMap::new();
    let mut dirs = vec![dir.to_path_buf()];
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            dirs.push(p);
        }
    }
    dirs.sort();
    for d in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&d)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        files.sort();
        for f in files {
            if f.extension().is_some_and(|e| e == "json") {
                if let Ok(r) = MetricsReport::load(&f) {
                    let stem = f.file_stem().expect("file").to_string_lossy().into_owned();
                    out.entry(stem).or_insert(r);
                }
            }
        }
    }
    Ok(out)
}

fn read_series(path: &Path, keys: &[&str]) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Value> = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
    let stride = rows.len().div_ceil(MAX_POINTS).max(1);
    Ok(keys
        .iter()
        .map(|k| {
            let pts = rows
                .iter()
                .enumerate()
                .filter(|(i, _)| i % stride == 0 || *i + 1 == rows.len())
                .filter_map(|(_, r)| Some((r.get("step")?.as_f64()?, r.get(*k)?.as_f64()?)))
                .collect();
            (k.to_string(), pts)
        })
        .filter(|(_, p): &(String, Vec<(f64, f64)>)| !p.is_empty())
        .collect())
}

/// Mean of the last `n` logged values of `key`.
fn tail_mean(path: &Path, key: &str, n: usize) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    let vals: Vec<f64> = text
        .lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok()?.get(key)?.as_f64())
        .collect();
    let tail = &vals[vals.len().saturating_sub(n)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

fn objective(dir: &Path) -> Option<String> {
    let ck = Checkpoint::load(&dir.join(FINAL_DIR)).ok()?;
    let cfg: PretrainConfig = ck.config().ok()?;
    let ctx = serde_json::to_value(cfg.model.frame_context).ok()?;
    Some(match ctx.as_str() {
        Some("current") | None => cfg.objective.name().to_string(),
        Some(c) => format!("{}+{c}", cfg.objective.name()),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

fn write(out: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let p = out.join(name);
    let tmp = out.join(format!(".{name}.tmp"));
    fs::write(&tmp, text)?;
    fs::rename(&tmp, &p)?;
    written.push(p);
    Ok(())
}

pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(CareError::Input("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for d in run_dirs {
        if !d.is_dir() {
            return Err(CareError::Input(format!("{}: not a directory", d.display())));
        }
        runs.push(Run { name: run_name(d), dir: d.clone(), reports: find_reports(d)? });
    }
    runs.sort_by(|a, b| (&a.name, &a.dir).cmp(&(&b.name, &b.dir)));
    fs::create_dir_all(out)?;
    let mut written = Vec::new();

    for r in &runs {
        let log = r.dir.join(METRICS_FILE);
        if log.exists() {
            let s = read_series(&log, &["L", "L_f", "L_p"])?;
            write(out, &format!("{}_loss.svg", r.name), &line_chart(&format!("{} pretraining loss", r.name), &s), &mut written)?;
        }
        let log = r.dir.join(FINETUNE_METRICS_FILE);
        if log.exists() {
            let s = read_series(&log, &["L1"])?;
            write(out, &format!("{}_finetune_loss.svg", r.name), &line_chart(&format!("{} fine-tuning L1", r.name), &s), &mut written)?;
        }
    }

    let mut stems: Vec<&String> = runs.iter().flat_map(|r| r.reports.keys()).collect();
    stems.sort();
    stems.dedup();
    for stem in stems {
        let reports: Vec<MetricsReport> = runs
            .iter()
            .filter_map(|r| r.reports.get(stem).map(|m| m.clone().with_run(r.name.clone())))
            .collect();
        if reports.len() >= 2 {
            let (csv, svg) = compare_runs(&reports)?;
            write(out, &format!("compare_{stem}.csv"), &csv, &mut written)?;
            write(out, &format!("compare_{stem}.svg"), &svg, &mut written)?;
        }
    }

    // objective ablation: latent loss, probe error and success per run
    let mut t = String::from("run,objective,latent_loss,lp_mse,spcfc,success_rate,std_error\n");
    let mut any = false;
    for r in &runs {
        let latent_loss = tail_mean(&r.dir.join(METRICS_FILE), "L", 50);
        let sr = r.reports.get(ROLLOUT_SUCCESS);
        if latent_loss.is_none() && r.reports.is_empty() {
            continue;
        }
        any = true;
        writeln!(
            t,
            "{},{},{},{},{},{},{}",
            r.name,
            objective(&r.dir).unwrap_or_default(),
            fmt_opt(latent_loss),
            fmt_opt(r.reports.get(LP_MSE).map(|m| m.value)),
            fmt_opt(r.reports.get(SPCFC).map(|m| m.value)),
            fmt_opt(sr.map(|m| m.value)),
            fmt_opt(sr.and_then(|m| m.std_error)),
        )
        .expect("string write");
    }
    if any {
        write(out, "table_runs.csv", &t, &mut written)?;
    }

    let semantic: Vec<(&Run, &String, &MetricsReport)> = runs
        .iter()
        .flat_map(|r| r.reports.iter().filter(|(k, _)| k.starts_with("semantic_accuracy")).map(move |(k, m)| (r, k, m)))
        .collect();
    if !semantic.is_empty() {
        let mut t = String::from("run,input,accuracy,n\n");
        for (r, k, m) in &semantic {
            let variant = k.split_once('.').map_or("", |(_, v)| v);
            writeln!(t, "{},{},{},{}", r.name, variant, m.value, m.n_samples).expect("string write");
        }
        write(out, "table_semantic.csv", &t, &mut written)?;
    }

    let rows: Vec<(String, f64, Option<f64>)> = runs
        .iter()
        .filter_map(|r| r.reports.get(ROLLOUT_SUCCESS).map(|m| (r.name.clone(), m.value, m.std_error)))
        .collect();
    if !rows.is_empty() {
        let mut t = String::from("run,success_rate,std_error,n\n");
        for r in &runs {
            if let Some(m) = r.reports.get(ROLLOUT_SUCCESS) {
                writeln!(t, "{},{},{},{}", r.name, m.value, fmt_opt(m.std_error), m.n_samples).expect("string write");
            }
        }
        write(out, "success_rates.csv", &t, &mut written)?;
        write(out, "success_rates.svg", &bar_chart("rollout success (± std-error)", &rows), &mut written)?;
    }

    if written.is_empty() {
        return Err(CareError::Input("no metrics logs or reports found in the given runs".into()));
    }
    Ok(written)
}
