use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Map, Value};

use super::config::{LossVariant, Method, Scope};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// The retrained model predicts one class for every test sample.
    Degenerate,
    Failed,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Degenerate => "degenerate",
            Status::Failed => "failed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Trial,
    Aggregate,
}

/// A value, or a mean with population std over trials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    pub fn single(v: f64) -> Self {
        Self { mean: v, std: None }
    }

    /// `None` for no values; `std` only when `with_std`.
    pub fn of(values: &[f64], with_std: bool) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = with_std.then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt());
        Some(Self { mean, std })
    }
}

/// One trial, or the aggregate of the trials sharing every other key.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRecord {
    pub kind: RecordKind,
    pub subset: Option<String>,
    pub method: Method,
    pub variant: LossVariant,
    pub scope: Scope,
    pub target_speedup: f64,
    pub trial: Option<usize>,
    pub seeds: Vec<u64>,
    pub status: Option<Status>,
    pub n_ok: usize,
    pub n_degenerate: usize,
    pub n_failed: usize,
    pub achieved_flops: Option<Stat>,
    pub achieved_speedup: Option<Stat>,
    /// `|achieved − target|` speedup.
    pub speedup_gap: Option<Stat>,
    pub params: Option<Stat>,
    pub accuracy: Option<Stat>,
    pub auc: Option<Stat>,
    pub group_auc: BTreeMap<String, Option<Stat>>,
    /// Against the unpruned model of the same seed.
    pub group_auc_delta: BTreeMap<String, Option<Stat>>,
    /// Loss used for retraining, `ce` or a PW variant name.
    pub retrain_loss: Option<String>,
    pub mask: Option<String>,
    pub reason: Option<String>,
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}

fn stat_cells(s: &Option<Stat>) -> [Value; 2] {
    match s {
        Some(s) => [num(s.mean), s.std.map(num).unwrap_or(Value::Null)],
        None => [Value::Null, Value::Null],
    }
}

fn opt_str(s: &Option<String>) -> Value {
    s.as_ref().map(|s| Value::String(s.clone())).unwrap_or(Value::Null)
}

const STAT_COLUMNS: [&str; 6] = ["flops_total", "achieved_speedup", "speedup_gap", "params_total", "accuracy", "auc"];

/// Frozen column order of `results.csv`; per-group columns follow the
/// sorted group names.
pub fn result_columns(groups: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = [
        "kind",
        "subset",
        "method",
        "variant",
        "scope",
        "target_speedup",
        "trial",
        "seed",
        "status",
        "n_ok",
        "n_degenerate",
        "n_failed",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for c in STAT_COLUMNS {
        cols.push(c.to_string());
        cols.push(format!("{c}_std"));
    }
    for g in groups {
        cols.push(format!("auc_{g}"));
        cols.push(format!("auc_{g}_std"));
        cols.push(format!("delta_auc_{g}"));
        cols.push(format!("delta_auc_{g}_std"));
    }
    cols.extend(["retrain_loss", "mask", "reason"].iter().map(|s| s.to_string()));
    cols
}

impl ExperimentRecord {
    pub fn cells(&self, groups: &[String]) -> Vec<Value> {
        let mut v = vec![
            json!(match self.kind {
                RecordKind::Trial => "trial",
                RecordKind::Aggregate => "aggregate",
            }),
            opt_str(&self.subset),
            json!(self.method.name()),
            json!(self.variant.name()),
            json!(self.scope.name()),
            num(self.target_speedup),
            self.trial.map(|t| json!(t)).unwrap_or(Value::Null),
            json!(self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")),
            self.status.map(|s| json!(s.name())).unwrap_or(Value::Null),
            json!(self.n_ok),
            json!(self.n_degenerate),
            json!(self.n_failed),
        ];
        for s in [
            &self.achieved_flops,
            &self.achieved_speedup,
            &self.speedup_gap,
            &self.params,
            &self.accuracy,
            &self.auc,
        ] {
            v.extend(stat_cells(s));
        }
        for g in groups {
            v.extend(stat_cells(self.group_auc.get(g).unwrap_or(&None)));
            v.extend(stat_cells(self.group_auc_delta.get(g).unwrap_or(&None)));
        }
        v.push(opt_str(&self.retrain_loss));
        v.push(opt_str(&self.mask));
        v.push(opt_str(&self.reason));
        v
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn write_table(path: &Path, columns: &[String], rows: &[Vec<Value>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(columns)?;
    for r in rows {
        w.write_record(r.iter().map(render))?;
    }
    w.flush()?;
    Ok(())
}

fn objects(columns: &[String], rows: &[Vec<Value>]) -> Vec<Value> {
    rows.iter()
        .map(|r| Value::Object(columns.iter().cloned().zip(r.iter().cloned()).collect::<Map<_, _>>()))
        .collect()
}

/// Unpruned model of one seed, evaluated on the test split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRow {
    pub subset: Option<String>,
    pub trial: usize,
    pub seed: u64,
    pub flops: u64,
    pub params: u64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub group_auc: BTreeMap<String, Option<f64>>,
    pub degenerate: bool,
    pub best_epoch: usize,
}

pub fn baseline_columns(groups: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = ["subset", "trial", "seed", "flops_total", "params_total", "accuracy", "auc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend(groups.iter().map(|g| format!("auc_{g}")));
    cols.push("degenerate".into());
    cols.push("best_epoch".into());
    cols
}

impl BaselineRow {
    pub fn cells(&self, groups: &[String]) -> Vec<Value> {
        let mut v = vec![
            opt_str(&self.subset),
            json!(self.trial),
            json!(self.seed),
            json!(self.flops),
            json!(self.params),
            num(self.accuracy),
            self.auc.map(num).unwrap_or(Value::Null),
        ];
        v.extend(groups.iter().map(|g| self.group_auc.get(g).copied().flatten().map(num).unwrap_or(Value::Null)));
        v.push(json!(self.degenerate));
        v.push(json!(self.best_epoch));
        v
    }
}

pub fn write_baseline(dir: &Path, rows: &[BaselineRow], groups: &[String]) -> Result<()> {
    let cols = baseline_columns(groups);
    let cells: Vec<Vec<Value>> = rows.iter().map(|r| r.cells(groups)).collect();
    write_table(&dir.join("baseline.csv"), &cols, &cells)
}

/// Everything a sweep produced.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub records: Vec<ExperimentRecord>,
    pub baseline: Vec<BaselineRow>,
    pub groups: Vec<String>,
    pub metadata: BTreeMap<String, String>,
    /// `(label, seconds)`, kept out of the deterministic files.
    pub timings: Vec<(String, f64)>,
}

impl RunSummary {
    pub fn trials(&self) -> impl Iterator<Item = &ExperimentRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Trial)
    }

    pub fn aggregates(&self) -> impl Iterator<Item = &ExperimentRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Aggregate)
    }

    pub fn failed(&self) -> usize {
        self.trials().filter(|r| r.status == Some(Status::Failed)).count()
    }
}

/// Writes `results.csv`, `results.json`, `baseline.csv`, `timings.csv` and
/// `plotdata/`. Plot series are keyed by scope too when `scope_in_series`.
pub fn write_outputs(dir: &Path, summary: &RunSummary, config: &impl Serialize, scope_in_series: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let groups = &summary.groups;
    let cols = result_columns(groups);
    let rows: Vec<Vec<Value>> = summary.records.iter().map(|r| r.cells(groups)).collect();
    write_table(&dir.join("results.csv"), &cols, &rows)?;

    let bcols = baseline_columns(groups);
    let brows: Vec<Vec<Value>> = summary.baseline.iter().map(|r| r.cells(groups)).collect();
    write_table(&dir.join("baseline.csv"), &bcols, &brows)?;

    let doc = json!({
        "config": config,
        "metadata": summary.metadata,
        "columns": cols,
        "records": objects(&cols, &rows),
        "baseline": objects(&bcols, &brows),
    });
    fs::write(dir.join("results.json"), serde_json::to_string_pretty(&doc)?)?;

    let mut w = csv::Writer::from_path(dir.join("timings.csv"))?;
    w.write_record(["label", "seconds"])?;
    for (label, s) in &summary.timings {
        w.write_record([label.clone(), format!("{s:.3}")])?;
    }
    w.flush()?;

    write_plotdata(&dir.join("plotdata"), summary, scope_in_series)
}

/// One delta-AUC-vs-speedup series per (subset, method, variant[, scope],
/// group).
fn write_plotdata(dir: &Path, summary: &RunSummary, scope_in_series: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut series: BTreeMap<String, Vec<Vec<Value>>> = BTreeMap::new();
    for r in summary.aggregates() {
        for g in &summary.groups {
            let mut name = String::new();
            if let Some(s) = &r.subset {
                name.push_str(s);
                name.push('_');
            }
            name.push_str(r.method.name());
            name.push('_');
            name.push_str(r.variant.name());
            if scope_in_series {
                name.push('_');
                name.push_str(r.scope.name());
            }
            name.push('_');
            name.push_str(g);
            let d = stat_cells(r.group_auc_delta.get(g).unwrap_or(&None));
            let a = stat_cells(&r.achieved_speedup);
            series.entry(name).or_default().push(vec![
                num(r.target_speedup),
                a[0].clone(),
                d[0].clone(),
                d[1].clone(),
                json!(r.n_ok),
            ]);
        }
    }
    let cols: Vec<String> = ["target_speedup", "achieved_speedup", "delta_auc", "delta_auc_std", "n_ok"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (name, rows) in series {
        write_table(&dir.join(format!("{name}.csv")), &cols, &rows)?;
    }
    Ok(())
}
