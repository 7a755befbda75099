//! Experiment orchestration: original training, the
//! prune → structural rebuild → retrain pipeline, sweeps and result files.

mod config;
mod datasets;
mod output;

pub use config::*;
pub use datasets::{pool_cells, prepare, synthetic, PreparedData};
pub use output::*;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::data::fnv1a;
use crate::error::{Error, Result};
use crate::fair_loss::{annotate, Annotations, BaseTarget, LossProvider, Reduction};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ModelSpec, ModelState};
use crate::prune::{count_flops, speedup, structural_prune, DependencyGraph, FlopsReport};
use crate::pruners::{autobot_prune, random_prune, taylor_prune, write_prune_log, PruneOutcome};
use crate::train::train;

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads for independent trials.
    pub jobs: usize,
}

/// Applies `f` to every item on up to `jobs` threads; results keep the
/// input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}

/// A trained unpruned model and its reference measurements.
#[derive(Clone, Debug)]
pub struct OriginalModel {
    pub trial: usize,
    pub seed: u64,
    pub state: ModelState,
    pub graph: DependencyGraph,
    pub flops: FlopsReport,
    pub eval: EvalReport,
    pub best_epoch: usize,
}

fn model_spec(config: &ExperimentConfig, data: &PreparedData) -> Result<ModelSpec> {
    ModelSpec::preset(&config.model, data.dataset.image_shape(), data.dataset.classes())
}

/// Hash of everything the original model of `seed` depends on.
fn original_key(config: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<String> {
    let tag = serde_json::to_string(&(
        data.dataset.provenance(),
        data.dataset.splits(),
        &config.model,
        &config.original,
        config.pw.reduction,
        seed,
    ))?;
    Ok(format!("{:016x}", fnv1a(tag.as_bytes())))
}

/// Trains (or loads from `cache_dir`) the plain cross-entropy model of one
/// trial seed.
pub fn train_original(
    config: &ExperimentConfig,
    data: &PreparedData,
    trial: usize,
    seed: u64,
    cache_dir: Option<&Path>,
) -> Result<OriginalModel> {
    let spec = model_spec(config, data)?;
    let ds = &data.dataset;
    let cache = match cache_dir {
        Some(d) => Some(d.join(format!("original_{}.json", original_key(config, data, seed)?))),
        None => None,
    };
    let cached = cache
        .as_ref()
        .filter(|p| p.exists())
        .map(|p| -> Result<(ModelState, usize)> {
            let text = fs::read_to_string(p)?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let state = ModelState::from_json(&v["state"].to_string())?;
            let best = v["best_epoch"].as_u64().unwrap_or(0) as usize;
            Ok((state, best))
        })
        .transpose()?;
    let (state, best_epoch) = match cached {
        Some(c) => c,
        None => {
            let init = ModelState::build(&spec, seed)?;
            let loss = LossProvider::cross_entropy(ds, config.pw.reduction)?;
            let out = train(&init, ds, data.train(), data.val(), &loss, &config.original, seed)?;
            if let Some(p) = &cache {
                fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
                let state: serde_json::Value = serde_json::from_str(&out.state.to_json()?)?;
                let doc = serde_json::json!({ "state": state, "best_epoch": out.best_epoch, "log": out.log });
                fs::write(p, serde_json::to_string(&doc)?)?;
            }
            (out.state, out.best_epoch)
        }
    };
    let graph = DependencyGraph::build(state.spec())?;
    let flops = count_flops(state.spec(), None)?;
    let eval = evaluate(&state, ds, data.test())?;
    Ok(OriginalModel {
        trial,
        seed,
        state,
        graph,
        flops,
        eval,
        best_epoch,
    })
}

/// One cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSpec {
    pub subset: Option<String>,
    pub method: Method,
    pub variant: LossVariant,
    pub scope: Scope,
    pub target_speedup: f64,
    pub trial: usize,
    pub seed: u64,
}

impl TrialSpec {
    fn tag(&self) -> String {
        let mut s = String::new();
        if let Some(sub) = &self.subset {
            s.push_str(sub);
            s.push('_');
        }
        format!(
            "{s}{}_{}_{}_x{}_t{}",
            self.method.name(),
            self.variant.name(),
            self.scope.name(),
            self.target_speedup,
            self.trial
        )
    }
}

/// Trained originals and frozen annotations of one dataset.
#[derive(Debug)]
pub struct Context {
    pub subset: Option<String>,
    pub data: PreparedData,
    pub originals: Vec<OriginalModel>,
    annotations: BTreeMap<(usize, u64, u64), Annotations>,
}

impl Context {
    /// Trains one original per trial and annotates the dataset with each for
    /// every θ/γ any method needs. Annotation audits go to
    /// `out/annotations/`.
    pub fn prepare(
        config: &ExperimentConfig,
        data: PreparedData,
        subset: Option<&str>,
        opts: &RunOptions,
        timings: &mut Vec<(String, f64)>,
    ) -> Result<Self> {
        let prefix = subset.map(|s| format!("{s}_")).unwrap_or_default();
        let models_dir = opts.out_dir.join("models");
        let trials: Vec<usize> = (0..config.trials).collect();
        let started = Instant::now();
        let originals = par_map(&trials, opts.jobs, |&t| {
            let seed = config.seed.wrapping_add(t as u64);
            train_original(config, &data, t, seed, Some(&models_dir))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        timings.push((format!("{prefix}originals"), started.elapsed().as_secs_f64()));

        let ann_dir = opts.out_dir.join("annotations");
        fs::create_dir_all(&ann_dir)?;
        let mut annotations = BTreeMap::new();
        for o in &originals {
            for m in [Method::Autobot, Method::Taylor, Method::Random] {
                let tg = config.pw.for_method(m);
                let key = (o.trial, tg.theta.to_bits(), tg.gamma.to_bits());
                if annotations.contains_key(&key) {
                    continue;
                }
                let a = annotate(&o.state, &data.dataset, tg.theta, tg.gamma)?;
                a.export_csv(ann_dir.join(format!(
                    "{prefix}seed{}_theta{}_gamma{}.csv",
                    o.seed, tg.theta, tg.gamma
                )))?;
                annotations.insert(key, a);
            }
        }
        Ok(Self {
            subset: subset.map(str::to_string),
            data,
            originals,
            annotations,
        })
    }

    pub fn annotations(&self, config: &ExperimentConfig, trial: usize, method: Method) -> &Annotations {
        let tg = config.pw.for_method(method);
        &self.annotations[&(trial, tg.theta.to_bits(), tg.gamma.to_bits())]
    }

    pub fn baseline(&self) -> Vec<BaselineRow> {
        self.originals
            .iter()
            .map(|o| BaselineRow {
                subset: self.subset.clone(),
                trial: o.trial,
                seed: o.seed,
                flops: o.flops.total,
                params: o.flops.params,
                accuracy: o.eval.accuracy,
                auc: o.eval.auc,
                group_auc: o.eval.groups.iter().map(|(g, r)| (g.clone(), r.auc)).collect(),
                degenerate: o.eval.degenerate,
                best_epoch: o.best_epoch,
            })
            .collect()
    }
}

/// Loss a pruner minimizes. The gate method matches the original outputs
/// with a max-normalized weighted mean; the Taylor method scores against
/// the true labels.
pub fn pruning_loss(config: &ExperimentConfig, ann: &Annotations, method: Method, variant: LossVariant) -> LossProvider {
    let (base, reduction) = match method {
        Method::Autobot => (BaseTarget::OriginalOutputs, Reduction::WeightedMean),
        _ => (BaseTarget::TrueLabels, config.pw.reduction),
    };
    LossProvider {
        annotations: ann.clone(),
        variant: variant.loss_variant(),
        base,
        reduction,
    }
}

/// Loss for retraining: the PW variant iff the scope covers retraining,
/// else plain cross-entropy. Returns the loss and its name.
pub fn retraining_loss(config: &ExperimentConfig, ann: &Annotations, variant: LossVariant, scope: Scope) -> (LossProvider, LossVariant) {
    let used = if scope == Scope::PruningAndRetraining {
        variant
    } else {
        LossVariant::Ce
    };
    let loss = LossProvider {
        annotations: ann.clone(),
        variant: used.loss_variant(),
        base: BaseTarget::TrueLabels,
        reduction: config.pw.reduction,
    };
    (loss, used)
}

struct TrialResult {
    status: Status,
    reason: Option<String>,
    flops: u64,
    params: u64,
    achieved: f64,
    eval: Option<EvalReport>,
    retrain_loss: Option<LossVariant>,
    mask: Option<String>,
}

fn run_trial(config: &ExperimentConfig, ctx: &Context, spec: &TrialSpec, logs: &Path) -> Result<TrialResult> {
    let orig = &ctx.originals[spec.trial];
    let ds = &ctx.data.dataset;
    let ann = ctx.annotations(config, spec.trial, spec.method);
    let target = (orig.flops.total as f64 / spec.target_speedup).floor() as u64;
    let loss = pruning_loss(config, ann, spec.method, spec.variant);
    let outcome: PruneOutcome = match spec.method {
        Method::Random => random_prune(&orig.graph, target, spec.seed)?,
        Method::Autobot => autobot_prune(
            &orig.state,
            &orig.graph,
            ds,
            ctx.data.train(),
            &loss,
            &config.autobot,
            target,
            spec.seed,
        )?,
        Method::Taylor => taylor_prune(
            &orig.state,
            &orig.graph,
            ds,
            ctx.data.train(),
            &loss,
            &config.taylor.config,
            target,
            spec.seed,
        )?,
    };
    outcome.mask.validate(&orig.graph)?;
    write_prune_log(&outcome.log, logs.join(format!("{}.csv", spec.tag())))?;

    let start = match (&outcome.state, spec.method) {
        (Some(s), Method::Taylor) if config.taylor.keep_prune_time_training => s,
        _ => &orig.state,
    };
    let rebuilt = structural_prune(start, &orig.graph, &outcome.mask)?;
    let (rloss, used) = retraining_loss(config, ann, spec.variant, spec.scope);
    let retrained = train(&rebuilt, ds, ctx.data.train(), ctx.data.val(), &rloss, &config.retrain, spec.seed)?;
    let flops = count_flops(retrained.state.spec(), None)?;
    let achieved = speedup(&orig.flops, &flops)?;
    let eval = evaluate(&retrained.state, ds, ctx.data.test())?;
    Ok(TrialResult {
        status: if eval.degenerate { Status::Degenerate } else { Status::Ok },
        reason: None,
        flops: flops.total,
        params: flops.params,
        achieved,
        eval: Some(eval),
        retrain_loss: Some(used),
        mask: Some(outcome.mask.fingerprint(&orig.graph)),
    })
}

/// Runs one trial; any error (e.g. an unreachable target) yields a
/// `failed` record carrying the reason.
pub fn run_pipeline(config: &ExperimentConfig, ctx: &Context, spec: &TrialSpec, logs: &Path) -> ExperimentRecord {
    let res = run_trial(config, ctx, spec, logs).unwrap_or_else(|e| {
        log::warn!("trial {} failed: {e}", spec.tag());
        TrialResult {
            status: Status::Failed,
            reason: Some(e.to_string()),
            flops: 0,
            params: 0,
            achieved: f64::NAN,
            eval: None,
            retrain_loss: None,
            mask: None,
        }
    });
    let orig = &ctx.originals[spec.trial];
    let mut group_auc = BTreeMap::new();
    let mut group_auc_delta = BTreeMap::new();
    if let Some(e) = &res.eval {
        for (g, r) in &e.groups {
            group_auc.insert(g.clone(), r.auc.map(Stat::single));
            let base = orig.eval.groups.get(g).and_then(|b| b.auc);
            group_auc_delta.insert(g.clone(), r.auc.zip(base).map(|(a, b)| Stat::single(a - b)));
        }
    }
    let measured = res.eval.is_some();
    ExperimentRecord {
        kind: RecordKind::Trial,
        subset: spec.subset.clone(),
        method: spec.method,
        variant: spec.variant,
        scope: spec.scope,
        target_speedup: spec.target_speedup,
        trial: Some(spec.trial),
        seeds: vec![spec.seed],
        status: Some(res.status),
        n_ok: (res.status == Status::Ok) as usize,
        n_degenerate: (res.status == Status::Degenerate) as usize,
        n_failed: (res.status == Status::Failed) as usize,
        achieved_flops: measured.then(|| Stat::single(res.flops as f64)),
        achieved_speedup: measured.then(|| Stat::single(res.achieved)),
        speedup_gap: measured.then(|| Stat::single((res.achieved - spec.target_speedup).abs())),
        params: measured.then(|| Stat::single(res.params as f64)),
        accuracy: res.eval.as_ref().map(|e| Stat::single(e.accuracy)),
        auc: res.eval.as_ref().and_then(|e| e.auc).map(Stat::single),
        group_auc,
        group_auc_delta,
        retrain_loss: res.retrain_loss.map(|v| v.name().to_string()),
        mask: res.mask,
        reason: res.reason,
    }
}

/// Mean ± std over the `ok` trials of each cell; degenerate and failed
/// trials are only counted.
pub fn aggregate(trials: &[ExperimentRecord], with_std: bool) -> Vec<ExperimentRecord> {
    let mut cells: Vec<(ExperimentRecord, Vec<&ExperimentRecord>)> = vec![];
    for t in trials {
        let same = |a: &ExperimentRecord| {
            a.subset == t.subset
                && a.method == t.method
                && a.variant == t.variant
                && a.scope == t.scope
                && a.target_speedup == t.target_speedup
        };
        match cells.iter_mut().find(|(k, _)| same(k)) {
            Some((_, v)) => v.push(t),
            None => cells.push((t.clone(), vec![t])),
        }
    }
    cells
        .into_iter()
        .map(|(key, members)| {
            let ok: Vec<&ExperimentRecord> = members.iter().copied().filter(|r| r.status == Some(Status::Ok)).collect();
            let field = |f: &dyn Fn(&ExperimentRecord) -> Option<Stat>| {
                let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).map(|s| s.mean).collect();
                Stat::of(&vals, with_std)
            };
            let groups: Vec<String> = members.iter().flat_map(|r| r.group_auc.keys().cloned()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            let group_auc = groups
                .iter()
                .map(|g| (g.clone(), field(&|r| r.group_auc.get(g).copied().flatten())))
                .collect();
            let group_auc_delta = groups
                .iter()
                .map(|g| (g.clone(), field(&|r| r.group_auc_delta.get(g).copied().flatten())))
                .collect();
            let count = |s: Status| members.iter().filter(|r| r.status == Some(s)).count();
            let losses: std::collections::BTreeSet<&String> = ok.iter().filter_map(|r| r.retrain_loss.as_ref()).collect();
            ExperimentRecord {
                kind: RecordKind::Aggregate,
                subset: key.subset.clone(),
                method: key.method,
                variant: key.variant,
                scope: key.scope,
                target_speedup: key.target_speedup,
                trial: None,
                seeds: members.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
                status: None,
                n_ok: count(Status::Ok),
                n_degenerate: count(Status::Degenerate),
                n_failed: count(Status::Failed),
                achieved_flops: field(&|r| r.achieved_flops),
                achieved_speedup: field(&|r| r.achieved_speedup),
                speedup_gap: field(&|r| r.speedup_gap),
                params: field(&|r| r.params),
                accuracy: field(&|r| r.accuracy),
                auc: field(&|r| r.auc),
                group_auc,
                group_auc_delta,
                retrain_loss: (losses.len() == 1).then(|| losses.into_iter().next().expect("one").clone()),
                mask: None,
                reason: None,
            }
        })
        .collect()
}

fn execute(
    config: &ExperimentConfig,
    contexts: &[Context],
    specs: Vec<(usize, TrialSpec)>,
    opts: &RunOptions,
    mut timings: Vec<(String, f64)>,
    scope_in_series: bool,
) -> Result<RunSummary> {
    let logs = opts.out_dir.join("logs");
    fs::create_dir_all(&logs)?;
    let results = par_map(&specs, opts.jobs, |(ci, spec)| {
        let started = Instant::now();
        let r = run_pipeline(config, &contexts[*ci], spec, &logs);
        (r, spec.tag(), started.elapsed().as_secs_f64())
    });
    let mut trials = vec![];
    for (r, tag, secs) in results {
        log::info!("{tag}: {} ({secs:.1}s)", r.status.map(Status::name).unwrap_or("?"));
        timings.push((tag, secs));
        trials.push(r);
    }
    let mut records = aggregate(&trials, config.trials > 1);
    trials.append(&mut records);

    let mut metadata = BTreeMap::new();
    let mut groups = std::collections::BTreeSet::new();
    let mut baseline = vec![];
    for c in contexts {
        let prefix = c.subset.as_ref().map(|s| format!("{s}.")).unwrap_or_default();
        for (k, v) in &c.data.metadata {
            metadata.insert(format!("{prefix}{k}"), v.clone());
        }
        groups.extend(c.data.dataset.group_names().iter().cloned());
        baseline.extend(c.baseline());
    }
    let summary = RunSummary {
        records: trials,
        baseline,
        groups: groups.into_iter().collect(),
        metadata,
        timings,
    };
    write_outputs(&opts.out_dir, &summary, config, scope_in_series)?;
    Ok(summary)
}

fn cross(
    config: &ExperimentConfig,
    ctx: usize,
    subset: Option<&str>,
    methods: &[Method],
    variants: &[LossVariant],
    scopes: &[Scope],
) -> Vec<(usize, TrialSpec)> {
    let mut out = vec![];
    for &method in methods {
        for &variant in variants {
            for &scope in scopes {
                for &target_speedup in &config.speedups {
                    for trial in 0..config.trials {
                        out.push((
                            ctx,
                            TrialSpec {
                                subset: subset.map(str::to_string),
                                method,
                                variant,
                                scope,
                                target_speedup,
                                trial,
                                seed: config.seed.wrapping_add(trial as u64),
                            },
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Trains the originals of every trial seed and writes `baseline.csv`.
pub fn train_originals(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<BaselineRow>> {
    config.validate()?;
    let data = prepare(&config.data)?;
    let mut timings = vec![];
    let ctx = Context::prepare(config, data, None, opts, &mut timings)?;
    let rows = ctx.baseline();
    write_baseline(&opts.out_dir, &rows, ctx.data.dataset.group_names())?;
    Ok(rows)
}

/// methods × variants × speedups × trials, with PW applied per
/// `apply_pw_to`.
pub fn run_matrix(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let data = prepare(&config.data)?;
    let mut timings = vec![];
    let ctx = Context::prepare(config, data, None, opts, &mut timings)?;
    let specs = cross(config, 0, None, &config.methods, &config.variants, &[config.apply_pw_to]);
    execute(config, &[ctx], specs, opts, timings, false)
}

pub const SUBSETS: [(&str, SynthPreset); 3] = [
    ("balanced", SynthPreset::Balanced),
    ("group_imbalanced", SynthPreset::GroupImbalanced),
    ("class_imbalanced", SynthPreset::ClassImbalanced),
];

/// The matrix on each of the three composition presets, records tagged by
/// subset.
pub fn run_subset_study(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let DataSource::Synthetic(s) = &config.data else {
        return Err(Error::Config("the subset study needs a synthetic data source".into()));
    };
    let mut timings = vec![];
    let mut contexts = vec![];
    let mut specs = vec![];
    for (i, (name, preset)) in SUBSETS.iter().enumerate() {
        let data = synthetic(s, *preset)?;
        contexts.push(Context::prepare(config, data, Some(name), opts, &mut timings)?);
        specs.extend(cross(config, i, Some(name), &config.methods, &config.variants, &[config.apply_pw_to]));
    }
    execute(config, &contexts, specs, opts, timings, false)
}

/// Component variants × application scopes for one method.
pub fn run_ablation(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let data = prepare(&config.data)?;
    let mut timings = vec![];
    let ctx = Context::prepare(config, data, None, opts, &mut timings)?;
    let a = &config.ablation;
    let specs = cross(config, 0, None, &[a.method], &a.variants, &a.scopes);
    execute(config, &[ctx], specs, opts, timings, true)
}
