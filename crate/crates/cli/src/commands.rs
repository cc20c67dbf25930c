use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use tsa::data::{encode_raw, gen_blobs, gen_spirals_with_turns, load_path, save_csv, Dataset};
use tsa::snapshot::{load_snapshot, save_snapshot};
use tsa::trainer::{evaluate, evaluate_network, metrics_jsonl, summary_csv, train, EpochMetrics, TrainConfig};
use tsa::tree::{EnsembleMode, Method, TreeNetwork};

use crate::config::{RawConfig, RunConfig};
use crate::CliError;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| tsa::Error::io(path, e).into())
}

fn load_config(path: &Path, overrides: &[String]) -> Result<(RawConfig, RunConfig), CliError> {
    let mut raw = RawConfig::load(path)?;
    for o in overrides {
        raw.set(o)?;
    }
    let cfg = RunConfig::from_raw(&raw)?;
    Ok((raw, cfg))
}

/// Trains the configured tree and writes `metrics.jsonl`, `summary.csv`,
/// `model.tsam` and the effective `config.cfg` to the output directory.
pub fn cmd_train(config: &Path, overrides: &[String], quiet: bool) -> Result<PathBuf, CliError> {
    let (raw, cfg) = load_config(config, overrides)?;
    let (train_set, test_set) = cfg.data.load()?;
    let base = cfg.base_spec(&train_set)?;
    let spec = cfg.tree_spec(&base)?;
    let mut net = TreeNetwork::instantiate(spec, cfg.train.seed);
    if !quiet {
        eprintln!(
            "training {} branches, {} parameters ({} at deployment), {} epochs on {} samples",
            net.leaf_count(),
            net.param_count(),
            base.param_count(),
            cfg.train.epochs,
            train_set.len()
        );
    }
    let history = train(&mut net, &train_set, &test_set, &cfg.train)?;
    if !quiet {
        for m in &history {
            eprintln!(
                "epoch {:>3} lr {:.4} ce {:.4} distill {:.4} kl {:.5} branch mean {:.4} ensemble {:.4}",
                m.epoch,
                m.lr,
                m.train_ce,
                m.train_distill,
                m.mean_pairwise_kl,
                m.mean_branch_acc(),
                m.ensemble_acc
            );
        }
    }
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| tsa::Error::io(dir, e))?;
    write(&dir.join("metrics.jsonl"), metrics_jsonl(&history))?;
    let summary = summary_csv(&history);
    write(&dir.join("summary.csv"), &summary)?;
    write(&dir.join("config.cfg"), raw.render())?;
    save_snapshot(&net, &dir.join("model.tsam"))?;
    print!("{summary}");
    Ok(dir.clone())
}

/// What `cmd_eval` reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    /// 1-based branch index in canonical leaf order, evaluated as the pruned
    /// standalone network.
    Branch(usize),
    Ensemble(EnsembleMode),
    All,
}

pub fn cmd_eval(snapshot: &Path, data: &Path, classes: Option<usize>, target: EvalTarget) -> Result<String, CliError> {
    let net = load_snapshot(snapshot)?;
    let data = load_path(data, classes.or(Some(net.spec().base().classes())))?;
    let branches = net.spec().branches();
    let mut out = String::new();
    match target {
        EvalTarget::Branch(k) => {
            let branch = k
                .checked_sub(1)
                .and_then(|i| branches.get(i))
                .ok_or_else(|| CliError::Usage(format!("--branch {k}: the tree has {} branches", branches.len())))?;
            let acc = evaluate_network(&net.prune_to_branch(branch)?, &data)?;
            let _ = writeln!(out, "branch {k} ({branch}) accuracy {acc}");
        }
        EvalTarget::Ensemble(mode) => {
            let acc = evaluate(&net, &data, mode)?.ensemble_acc;
            let _ = writeln!(out, "ensemble ({mode}) accuracy {acc}");
        }
        EvalTarget::All => {
            let eval = evaluate(&net, &data, EnsembleMode::Probabilities)?;
            for (i, (b, acc)) in branches.iter().zip(&eval.branch_acc).enumerate() {
                let _ = writeln!(out, "branch {} ({b}) accuracy {acc}", i + 1);
            }
            let _ = writeln!(out, "ensemble (probs) accuracy {}", eval.ensemble_acc);
        }
    }
    Ok(out)
}

/// Per method, per seed, the epoch history.
pub type CompareHistories = Vec<Vec<Vec<EpochMetrics>>>;

/// One compare row.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: Method,
    pub branches: usize,
    pub params: usize,
    pub seeds: Vec<u64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_ensemble_acc: f64,
    pub std_ensemble_acc: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Config used for one method in a comparison. A single-branch network has
/// no peers, so it trains on plain cross-entropy.
pub fn method_config(method: Method, base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    if method == Method::Baseline {
        cfg.distill.alpha = 0.0;
    }
    cfg
}

/// Trains every `method x seed` pair, `threads` at a time, and reports one
/// row per method in the order given. Seeds are `train.seed + i`.
pub fn run_compare(
    cfg: &RunConfig,
    methods: &[Method],
    seeds: usize,
    threads: usize,
) -> Result<(Vec<CompareRow>, CompareHistories), CliError> {
    if seeds == 0 || methods.is_empty() {
        return Err(CliError::Usage("compare needs at least one method and one seed".into()));
    }
    let (train_set, test_set) = cfg.data.load()?;
    let base = cfg.base_spec(&train_set)?;
    let specs = methods.iter().map(|m| m.build(&base)).collect::<tsa::Result<Vec<_>>>()?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.train.seed + i).collect();
    let jobs: Vec<(usize, usize)> = (0..methods.len()).flat_map(|m| (0..seeds).map(move |s| (m, s))).collect();
    let results: Mutex<Vec<Option<tsa::Result<Vec<EpochMetrics>>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run_job = |(m, s): (usize, usize)| -> tsa::Result<Vec<EpochMetrics>> {
        let seed = seed_list[s];
        let mut net = TreeNetwork::instantiate(specs[m].clone(), seed);
        train(&mut net, &train_set, &test_set, &method_config(methods[m], &cfg.train, seed))
    };
    thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&job) = jobs.get(j) else { break };
                let r = run_job(job);
                results.lock().unwrap()[j] = Some(r);
            });
        }
    });
    let mut histories: CompareHistories = vec![Vec::with_capacity(seeds); methods.len()];
    for ((m, _), r) in jobs.iter().zip(results.into_inner().unwrap()) {
        histories[*m].push(r.expect("every job ran")?);
    }
    let rows = methods
        .iter()
        .zip(&specs)
        .zip(&histories)
        .map(|((&method, spec), runs)| {
            let finals: Vec<&EpochMetrics> = runs.iter().filter_map(|h| h.last()).collect();
            let (mean_acc, std_acc) = mean_std(&finals.iter().map(|m| m.mean_branch_acc()).collect::<Vec<_>>());
            let (mean_ens, std_ens) = mean_std(&finals.iter().map(|m| m.ensemble_acc).collect::<Vec<_>>());
            CompareRow {
                method,
                branches: spec.leaf_count(),
                params: spec.param_count(),
                seeds: seed_list.clone(),
                mean_acc,
                std_acc,
                mean_ensemble_acc: mean_ens,
                std_ensemble_acc: std_ens,
            }
        })
        .collect();
    Ok((rows, histories))
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("method,branches,params,seeds,mean_acc,std_acc,mean_ensemble_acc,std_ensemble_acc\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.branches,
            r.params,
            seeds.join(" "),
            r.mean_acc,
            r.std_acc,
            r.mean_ensemble_acc,
            r.std_ensemble_acc
        );
    }
    out
}

pub fn cmd_compare(
    config: &Path,
    overrides: &[String],
    methods: &[Method],
    seeds: usize,
    threads: usize,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let (_, cfg) = load_config(config, overrides)?;
    let (rows, _) = run_compare(&cfg, methods, seeds, threads)?;
    let csv = compare_csv(&rows);
    if let Some(path) = out {
        write(path, &csv)?;
    }
    Ok(csv)
}

/// Training-time parameter counts of every method, plus the configured tree.
pub fn cmd_params(config: &Path, overrides: &[String]) -> Result<String, CliError> {
    let (_, cfg) = load_config(config, overrides)?;
    let (train_set, _) = cfg.data.load()?;
    let base = cfg.base_spec(&train_set)?;
    let mut out = String::from("method,branches,nodes,params,relative\n");
    let deployed = base.param_count() as f64;
    let mut row = |name: &str, spec: &tsa::tree::TreeSpec| {
        let _ = writeln!(
            out,
            "{name},{},{},{},{:.3}",
            spec.leaf_count(),
            spec.node_count(),
            spec.param_count(),
            spec.param_count() as f64 / deployed
        );
    };
    for m in Method::ALL {
        row(m.name(), &m.build(&base)?);
    }
    let configured = cfg.tree_spec(&base)?;
    row(&format!("config {}", configured.topology_string()), &configured);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Spirals,
    Blobs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataArgs {
    pub kind: DataKind,
    pub n_per_class: usize,
    pub classes: usize,
    pub noise: f64,
    pub turns: f64,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

pub fn generate(args: &GenDataArgs) -> Result<Dataset, CliError> {
    Ok(match args.kind {
        DataKind::Spirals => gen_spirals_with_turns(args.n_per_class, args.classes, args.noise, args.turns, args.seed)?,
        DataKind::Blobs => gen_blobs(args.n_per_class, args.classes, args.dim, args.separation, args.seed)?,
    })
}

/// Writes CSV for a `.csv` path, the raw format otherwise.
pub fn cmd_gen_data(args: &GenDataArgs, out: &Path) -> Result<usize, CliError> {
    let data = generate(args)?;
    if out.extension().is_some_and(|e| e == "csv") {
        save_csv(&data, out)?;
    } else {
        write(out, encode_raw(&data))?;
    }
    Ok(data.len())
}
