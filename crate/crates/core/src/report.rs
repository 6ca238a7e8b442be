//! Run comparison tables, ablation sweeps and the promotion diagnostic.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::dataset::{generate, SynthConfig};
use crate::eval::{EvalReport, Metrics};
use crate::trainer::history::{self, RefreshRecord};
use crate::trainer::{self, TrainConfig, CONFIG_FILE, EVAL_FILE};
use crate::{Error, Result};

pub const REPORT_FILE: &str = "report.md";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const PROMOTION_FILE: &str = "promotion.csv";

/// Artifacts of one finished training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub dir: PathBuf,
    pub test: Metrics,
    pub config: Option<TrainConfig>,
    pub refreshes: Vec<RefreshRecord>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let eval_path = dir.join(EVAL_FILE);
        let test = if eval_path.exists() {
            let report: EvalReport = serde_json::from_str(&binfmt::read_string(&eval_path)?)?;
            report.metrics()
        } else {
            history::read_metrics(dir)?
                .iter()
                .rev()
                .find(|r| r.split == "test")
                .and_then(|r| r.metrics())
                .ok_or_else(|| {
                    Error::malformed("run directory", format!("{} has no test metrics", dir.display()))
                })?
        };
        let config_path = dir.join(CONFIG_FILE);
        let config = if config_path.exists() {
            Some(TrainConfig::load(&config_path)?)
        } else {
            None
        };
        let refresh_path = dir.join(history::REFRESH_FILE);
        let refreshes = if refresh_path.exists() {
            history::parse_refresh_jsonl(&binfmt::read_string(&refresh_path)?)?
        } else {
            Vec::new()
        };
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            name,
            dir: dir.to_path_buf(),
            test,
            config,
            refreshes,
        })
    }
}

/// Pooled fraction of previously mined pairs found at rank 1 at the following
/// refresh, over all refreshes of a run.
pub fn promotion_rate(refreshes: &[RefreshRecord]) -> Option<f64> {
    let prev: usize = refreshes.iter().map(|r| r.n_prev_mined).sum();
    let promoted: usize = refreshes.iter().map(|r| r.n_promoted).sum();
    (prev > 0).then(|| promoted as f64 / prev as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow<'a> {
    pub name: &'a str,
    pub metrics: Metrics,
    /// This run minus the first run.
    pub delta: Metrics,
}

fn diff(a: Metrics, b: Metrics) -> Metrics {
    Metrics {
        r1: a.r1 - b.r1,
        r5: a.r5 - b.r5,
        r10: a.r10 - b.r10,
        map: a.map - b.map,
    }
}

pub fn comparison(runs: &[RunSummary]) -> Vec<ComparisonRow<'_>> {
    let Some(base) = runs.first() else {
        return Vec::new();
    };
    runs.iter()
        .map(|r| ComparisonRow {
            name: &r.name,
            metrics: r.test,
            delta: diff(r.test, base.test),
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow<'_>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run", "r1", "r5", "r10", "map", "d_r1", "d_r5", "d_r10", "d_map"])?;
    for r in rows {
        let m = r.metrics;
        let d = r.delta;
        w.write_record(
            std::iter::once(r.name.to_string()).chain(
                [m.r1, m.r5, m.r10, m.map, d.r1, d.r5, d.r10, d.map]
                    .iter()
                    .map(f64::to_string),
            ),
        )?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::malformed("csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn signed_pct(v: f64) -> String {
    format!("{:+.2}", 100.0 * v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationAxis {
    #[serde(rename = "k")]
    K,
    #[serde(rename = "exp_alpha")]
    ExpAlpha,
    #[serde(rename = "refresh_period")]
    RefreshPeriod,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::K => "k",
            AblationAxis::ExpAlpha => "exp_alpha",
            AblationAxis::RefreshPeriod => "refresh_period",
        }
    }

    fn check_value(self, v: f64) -> Result<()> {
        let ok = match self {
            AblationAxis::K => v.fract() == 0.0 && v >= 2.0,
            AblationAxis::RefreshPeriod => v.fract() == 0.0 && v >= 1.0,
            AblationAxis::ExpAlpha => v.is_finite() && v > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid {} value {v}", self.name())))
        }
    }

    /// `base` with this axis set to `value`; boosting is switched on.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        self.check_value(value)?;
        let mut cfg = base.clone();
        cfg.boost.enabled = true;
        match self {
            AblationAxis::K => cfg.boost.k = value as usize,
            AblationAxis::ExpAlpha => cfg.boost.exp_alpha = value,
            AblationAxis::RefreshPeriod => cfg.boost.refresh_period = value as usize,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(AblationAxis::K),
            "exp_alpha" => Ok(AblationAxis::ExpAlpha),
            "refresh_period" => Ok(AblationAxis::RefreshPeriod),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation axis `{other}` (expected k, exp_alpha, refresh_period)"
            ))),
        }
    }
}

/// One sweep: every value of one boosting hyperparameter, for every seed.
/// Each seed regenerates the synthetic corpus and reseeds training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
    pub data: SynthConfig,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidConfig(
                "ablation needs at least one value and one seed".into(),
            ));
        }
        for &v in &self.values {
            self.axis.check_value(v)?;
        }
        self.data.validate()
    }
}

/// One line of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: f64,
    pub seed: u64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub n_boosted: usize,
}

impl AblationRow {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            r1: self.r1,
            r5: self.r5,
            r10: self.r10,
            map: self.map,
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["axis", "value", "seed", "r1", "r5", "r10", "map", "n_boosted"])?;
    }
    finish_csv(w)
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<AblationRow>, _>>()?;
    Ok(rows)
}

fn run_dir_name(axis: AblationAxis, value: f64, seed: u64) -> String {
    format!("{axis}={value}/seed{seed}")
}

/// Runs every (value, seed) cell in order. With `out_dir`, each run writes
/// its own subdirectory and the rows go to `ablation.csv`.
pub fn run_ablation(spec: &AblationSpec, out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len() * spec.seeds.len());
    for &seed in &spec.seeds {
        let corpus = generate(&SynthConfig {
            seed,
            ..spec.data.clone()
        })?;
        for &value in &spec.values {
            let mut cfg = spec.axis.apply(&spec.base, value)?;
            cfg.seed = seed;
            let dir = out_dir.map(|d| d.join(run_dir_name(spec.axis, value, seed)));
            let out = trainer::run(&cfg, &corpus, dir.as_deref())?;
            rows.push(AblationRow {
                axis: spec.axis,
                value,
                seed,
                r1: out.test.r1,
                r5: out.test.r5,
                r10: out.test.r10,
                map: out.test.map,
                n_boosted: out.state.weights.n_boosted(),
            });
        }
    }
    if let Some(dir) = out_dir {
        binfmt::create_dir(dir)?;
        binfmt::write_file(&dir.join(ABLATION_FILE), ablation_csv(&rows)?)?;
    }
    Ok(rows)
}

/// Mean and sample standard deviation (n - 1); the deviation is 0 for a
/// single observation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub value: f64,
    pub n_seeds: usize,
    pub r1_mean: f64,
    pub r1_std: f64,
    pub r5_mean: f64,
    pub r5_std: f64,
    pub r10_mean: f64,
    pub r10_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
}

fn value_key(v: f64) -> u64 {
    v.to_bits()
}

/// Mean-over-seeds series for one axis, ordered by axis value.
pub fn series(rows: &[AblationRow], axis: AblationAxis) -> Vec<SeriesPoint> {
    let mut cells: BTreeMap<u64, (f64, Vec<Metrics>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.axis == axis) {
        cells
            .entry(value_key(r.value))
            .or_insert_with(|| (r.value, Vec::new()))
            .1
            .push(r.metrics());
    }
    let mut points: Vec<SeriesPoint> = cells
        .into_values()
        .map(|(value, ms)| {
            let col = |f: fn(&Metrics) -> f64| mean_std(&ms.iter().map(f).collect::<Vec<_>>());
            let (r1_mean, r1_std) = col(|m| m.r1);
            let (r5_mean, r5_std) = col(|m| m.r5);
            let (r10_mean, r10_std) = col(|m| m.r10);
            let (map_mean, map_std) = col(|m| m.map);
            SeriesPoint {
                value,
                n_seeds: ms.len(),
                r1_mean,
                r1_std,
                r5_mean,
                r5_std,
                r10_mean,
                r10_std,
                map_mean,
                map_std,
            }
        })
        .collect();
    points.sort_by(|a, b| a.value.total_cmp(&b.value));
    points
}

pub fn series_csv(points: &[SeriesPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p)?;
    }
    finish_csv(w)
}

/// Whether the seed's best R@1 at any `k > 2` falls below its R@1 at `k = 2`.
/// `None` when the seed lacks a `k = 2` cell or any larger `k`.
pub fn k_drop_by_seed(rows: &[AblationRow]) -> BTreeMap<u64, Option<bool>> {
    let mut by_seed: BTreeMap<u64, Vec<&AblationRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.axis == AblationAxis::K) {
        by_seed.entry(r.seed).or_default().push(r);
    }
    by_seed
        .into_iter()
        .map(|(seed, rs)| {
            let at2 = rs.iter().find(|r| r.value == 2.0).map(|r| r.r1);
            let beyond = rs
                .iter()
                .filter(|r| r.value > 2.0)
                .map(|r| r.r1)
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
            (seed, at2.zip(beyond).map(|(a, b)| b < a))
        })
        .collect()
}

/// Whether every (value, seed) cell of the sweep is present.
pub fn missing_cells(
    rows: &[AblationRow],
    axis: AblationAxis,
    values: &[f64],
    seeds: &[u64],
) -> Vec<(f64, u64)> {
    let mut missing = Vec::new();
    for &v in values {
        for &s in seeds {
            if !rows.iter().any(|r| r.axis == axis && r.value == v && r.seed == s) {
                missing.push((v, s));
            }
        }
    }
    missing
}

pub fn promotion_csv(runs: &[RunSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run",
        "epoch",
        "k",
        "n_mined",
        "n_rank1",
        "n_boosted",
        "n_prev_mined",
        "n_promoted",
        "promoted_fraction",
    ])?;
    for run in runs {
        for r in &run.refreshes {
            w.write_record([
                run.name.clone(),
                r.epoch.to_string(),
                r.k.to_string(),
                r.n_mined.to_string(),
                r.n_rank1.to_string(),
                r.n_boosted.to_string(),
                r.n_prev_mined.to_string(),
                r.n_promoted.to_string(),
                r.promoted_fraction().map(|f| f.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    finish_csv(w)
}

/// Markdown body of `report.md`.
pub fn render_markdown(runs: &[RunSummary], ablation: &[AblationRow]) -> String {
    let mut md = String::from("# Retrieval report\n");
    if !runs.is_empty() {
        md.push_str("\n## Comparison\n\nDeltas are against the first run. Values in percent.\n\n");
        md.push_str("| run | R1 | R5 | R10 | mAP | dR1 | dR5 | dR10 | dmAP |\n");
        md.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in comparison(runs) {
            let (m, d) = (r.metrics, r.delta);
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                r.name,
                pct(m.r1),
                pct(m.r5),
                pct(m.r10),
                pct(m.map),
                signed_pct(d.r1),
                signed_pct(d.r5),
                signed_pct(d.r10),
                signed_pct(d.map)
            );
        }
        if runs.iter().any(|r| !r.refreshes.is_empty()) {
            md.push_str("\n## Promotion\n\nFor each refresh: size of the mined set and the share of pairs mined at the previous refresh whose own image is now ranked first.\n\n");
            md.push_str("| run | epoch | mined | prev mined | promoted | fraction |\n");
            md.push_str("|---|---|---|---|---|---|\n");
            for run in runs {
                for r in &run.refreshes {
                    let frac = r
                        .promoted_fraction()
                        .map(|f| format!("{f:.4}"))
                        .unwrap_or_else(|| "-".into());
                    let _ = writeln!(
                        md,
                        "| {} | {} | {} | {} | {} | {} |",
                        run.name, r.epoch, r.n_mined, r.n_prev_mined, r.n_promoted, frac
                    );
                }
            }
        }
    }
    let axes: Vec<AblationAxis> = {
        let mut a: Vec<_> = ablation.iter().map(|r| r.axis).collect();
        a.sort();
        a.dedup();
        a
    };
    for axis in axes {
        let _ = write!(
            md,
            "\n## Ablation over {axis}\n\nMean and sample standard deviation over seeds, in percent.\n\n| {axis} | seeds | R1 | R5 | R10 | mAP |\n|---|---|---|---|---|---|\n"
        );
        for p in series(ablation, axis) {
            let cell = |m: f64, s: f64| format!("{} ± {}", pct(m), pct(s));
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} |",
                p.value,
                p.n_seeds,
                cell(p.r1_mean, p.r1_std),
                cell(p.r5_mean, p.r5_std),
                cell(p.r10_mean, p.r10_std),
                cell(p.map_mean, p.map_std)
            );
        }
        if axis == AblationAxis::K {
            md.push_str("\nR@1 drop beyond k = 2, per seed:\n\n");
            for (seed, drop) in k_drop_by_seed(ablation) {
                let verdict = match drop {
                    Some(true) => "observed",
                    Some(false) => "not observed",
                    None => "undetermined",
                };
                let _ = writeln!(md, "- seed {seed}: {verdict}");
            }
        }
    }
    md
}

/// Writes `report.md`, `comparison.csv`, `promotion.csv` and one
/// `series_<axis>.csv` per swept axis into `out_dir`.
pub fn write_report(runs: &[RunSummary], ablation: &[AblationRow], out_dir: &Path) -> Result<()> {
    binfmt::create_dir(out_dir)?;
    binfmt::write_file(&out_dir.join(REPORT_FILE), render_markdown(runs, ablation))?;
    if !runs.is_empty() {
        binfmt::write_file(&out_dir.join(COMPARISON_FILE), comparison_csv(&comparison(runs))?)?;
        binfmt::write_file(&out_dir.join(PROMOTION_FILE), promotion_csv(runs)?)?;
    }
    if !ablation.is_empty() {
        binfmt::write_file(&out_dir.join(ABLATION_FILE), ablation_csv(ablation)?)?;
    }
    let mut axes: Vec<_> = ablation.iter().map(|r| r.axis).collect();
    axes.sort();
    axes.dedup();
    for axis in axes {
        binfmt::write_file(
            &out_dir.join(format!("series_{axis}.csv")),
            series_csv(&series(ablation, axis))?,
        )?;
    }
    Ok(())
}

/// Reads run directories and ablation directories (each holding
/// `ablation.csv`) and writes the report.
pub fn report(run_dirs: &[PathBuf], ablation_dirs: &[PathBuf], out_dir: &Path) -> Result<()> {
    let runs = run_dirs
        .iter()
        .map(|d| RunSummary::load(d))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for d in ablation_dirs {
        rows.extend(parse_ablation_csv(&binfmt::read_string(&d.join(ABLATION_FILE))?)?);
    }
    if runs.is_empty() && rows.is_empty() {
        return Err(Error::InvalidConfig("nothing to report".into()));
    }
    write_report(&runs, &rows, out_dir)
}
