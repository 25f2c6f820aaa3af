use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use skiptune::bench::RunReport;

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub run: String,
    pub lskip: bool,
    pub cskip: bool,
    pub base: f64,
    pub new: f64,
    pub h: f64,
    pub step_macs: f64,
    pub relative_macs: Option<f64>,
    pub peak_elements: u64,
    pub time_s: Option<f64>,
}

#[derive(Deserialize)]
struct Timing {
    elapsed_seconds: f64,
}

fn dedupe(runs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in runs {
        let key = r
            .canonicalize()
            .with_context(|| format!("run directory {}", r.display()))?;
        if seen.insert(key) {
            out.push(r.clone());
        } else {
            eprintln!("warning: skipping duplicate run directory {}", r.display());
        }
    }
    Ok(out)
}

pub fn rows(runs: &[PathBuf]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for dir in dedupe(runs)? {
        let rep = RunReport::read(&dir).with_context(|| format!("reading report in {}", dir.display()))?;
        let time_s = std::fs::read_to_string(dir.join("timing.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<Timing>(&t).ok())
            .map(|t| t.elapsed_seconds);
        rows.push(AblationRow {
            run: dir.display().to_string(),
            lskip: rep.config.lskip,
            cskip: rep.config.cskip,
            base: rep.tuned.base,
            new: rep.tuned.new,
            h: rep.tuned.h,
            step_macs: rep.mean_step_macs,
            relative_macs: None,
            peak_elements: rep
                .epochs
                .iter()
                .map(|e| e.counters.peak_live_elements)
                .max()
                .unwrap_or(0),
            time_s,
        });
    }
    if let Some(ft) = rows.iter().find(|r| !r.lskip && !r.cskip).map(|r| r.step_macs) {
        for r in &mut rows {
            r.relative_macs = Some(r.step_macs / ft);
        }
    }
    Ok(rows)
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

pub fn table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<6}{:<6}{:>8}{:>8}{:>8}{:>12}{:>8}{:>10}{:>9}\n",
        "LSkip", "CSkip", "Base", "New", "H", "MACs/step", "rel", "Mem", "Time(s)"
    );
    for r in rows {
        s += &format!(
            "{:<6}{:<6}{:>8.2}{:>8.2}{:>8.2}{:>12.3e}{:>8}{:>10}{:>9}\n",
            mark(r.lskip),
            mark(r.cskip),
            r.base,
            r.new,
            r.h,
            r.step_macs,
            r.relative_macs.map(|x| format!("{x:.3}")).unwrap_or_default(),
            r.peak_elements,
            r.time_s.map(|x| format!("{x:.1}")).unwrap_or_default(),
        );
    }
    s
}

pub fn run(out: &Path, runs: &[PathBuf]) -> Result<()> {
    let rows = rows(runs)?;
    print!("{}", table(&rows));
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
