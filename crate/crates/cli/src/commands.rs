use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use pathprune::cost_model::make_buckets;
use pathprune::evo_search::{pareto_sweep, sweep_csv, EvoConfig};
use pathprune::path_filter::{pair_accuracy, read_dataset, train, weak_detection_metrics, write_dataset, ScoredPath};
use pathprune::supernet_sim::{
    baseline_coupled, baseline_uniform, run_algorithm1, run_with_prune, stage_seed, BucketEval, Phase, Pipeline,
    StageArtifact, StageSink, TrainRunLog,
};
use pathprune::{ExperimentConfig, Mode, PathFilter, PruneState, SimError, SpaceView, Strategy, SyntheticOracle, ToySupernet, TrainConfig};
use serde::Serialize;

use crate::error::CliError;
use crate::manifest::{check_inputs, config_hash, sidecar, Lock, RunManifest};
use crate::{MethodArg, SourceArg, StrategyArg};

fn read_config(path: &Path) -> Result<(ExperimentConfig, String), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    let h = config_hash(&cfg);
    Ok((cfg, h))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn load_filter(path: &Path) -> Result<PathFilter, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(PathFilter::load(BufReader::new(f))?.0)
}

fn load_dataset(path: &Path) -> Result<Vec<ScoredPath>, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_dataset(BufReader::new(f)).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn save_filter(filter: &PathFilter, path: &Path, extra: serde_json::Value) -> Result<(), CliError> {
    let mut w = create(path)?;
    filter.save(&mut w, extra)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn seeds(manifest: &mut RunManifest, master: u64, stages: &[&str]) {
    manifest.seeds.insert("master".into(), master);
    for s in stages {
        manifest.seeds.insert((*s).into(), stage_seed(master, s));
    }
}

pub fn gen_data(config: &Path, source: SourceArg, m: usize, supernet: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let (mut cfg, h) = read_config(config)?;
    if m < 2 {
        return Err(CliError::Usage("--m must be at least 2".into()));
    }
    let mut inputs = Vec::new();
    if let Some(s) = supernet {
        inputs.push(s);
    }
    check_inputs(&inputs, Some(&h))?;
    let _lock = Lock::for_file(out)?;
    cfg.finetune_paths = m * cfg.num_buckets;
    let p = Pipeline::new(cfg.clone())?;
    let mut manifest = RunManifest::new("gen-data", Some(h));
    let (data, sparse) = match source {
        SourceArg::Oracle => {
            seeds(&mut manifest, cfg.seed, &["dataset"]);
            p.validation_dataset(None)?
        }
        SourceArg::Supernet => {
            let net = match supernet {
                Some(path) => {
                    manifest.add_input("supernet", path)?;
                    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
                    ToySupernet::load(BufReader::new(f))?.0
                }
                None => {
                    seeds(&mut manifest, cfg.seed, &["supernet_init", "warmup"]);
                    let mut net = ToySupernet::new(&cfg.space, cfg.toy.clone(), stage_seed(cfg.seed, "supernet_init"))?;
                    let mut log = TrainRunLog::default();
                    p.train_phase(Some(&mut net), p.full_view(), None, Phase::Warmup, cfg.warmup_epochs, &mut log)?;
                    net
                }
            };
            seeds(&mut manifest, cfg.seed, &["dataset"]);
            p.validation_dataset(Some(&net))?
        }
    };
    for k in &sparse {
        log::warn!("bucket {k} has no paths");
    }
    let mut w = create(out)?;
    write_dataset(&mut w, &data).map_err(|e| CliError::io(out, e))?;
    w.flush().map_err(|e| CliError::io(out, e))?;
    drop(w);
    manifest.stages.insert("gen-data".into(), true);
    manifest.add_artifact("dataset", out)?;
    manifest.write(&sidecar(out))
}

pub fn train_filter(config: &Path, data: &Path, pretrained: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let (cfg, h) = read_config(config)?;
    let mut inputs = vec![data];
    if let Some(p) = pretrained {
        inputs.push(p);
    }
    check_inputs(&inputs, Some(&h))?;
    let _lock = Lock::for_file(out)?;
    let records = load_dataset(data)?;
    let p = Pipeline::new(cfg.clone())?;
    let mut manifest = RunManifest::new("train-filter", Some(h));
    manifest.add_input("dataset", data)?;
    let (filter, reports) = match pretrained {
        Some(path) => {
            manifest.add_input("pretrained", path)?;
            let mut f = load_filter(path)?;
            f.check_compatible(&cfg.space, p.buckets())?;
            let tc = TrainConfig { seed: stage_seed(cfg.seed, "filter_train"), ..cfg.filter_train.clone() };
            let r = train(&mut f, &records, &tc)?;
            (f, vec![r])
        }
        None => p.train_filter(&[], &records)?,
    };
    seeds(&mut manifest, cfg.seed, &["filter_init", "filter_train"]);
    save_filter(&filter, out, serde_json::json!({ "reports": reports }))?;
    manifest.stages.insert("train-filter".into(), true);
    manifest.add_artifact("filter", out)?;
    manifest.write(&sidecar(out))
}

#[derive(Serialize)]
struct FilterEval {
    records: usize,
    pair_accuracy: f64,
    ratio: f64,
    weak: pathprune::path_filter::WeakMetrics,
}

pub fn eval_filter(filter: &Path, data: &Path, ratio: f64, out: Option<&Path>) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CliError::Usage(format!("--ratio {ratio} must lie in [0, 1]")));
    }
    check_inputs(&[filter, data], None)?;
    let f = load_filter(filter)?;
    let records = load_dataset(data)?;
    let seqs = records.iter().map(|r| f.tokenize(&r.path, r.bucket)).collect::<Result<Vec<_>, _>>()?;
    let scores = f.score_sequences(&seqs)?;
    let result = FilterEval {
        records: records.len(),
        pair_accuracy: pair_accuracy(&scores, &records),
        ratio,
        weak: weak_detection_metrics(&scores, &records, ratio),
    };
    match out {
        None => {
            println!("{}", serde_json::to_string_pretty(&result).expect("metrics serialize"));
            Ok(())
        }
        Some(out) => {
            let _lock = Lock::for_file(out)?;
            write_json(out, &result)?;
            let mut manifest = RunManifest::new("eval-filter", None);
            manifest.add_input("filter", filter)?;
            manifest.add_input("dataset", data)?;
            manifest.stages.insert("eval-filter".into(), true);
            manifest.add_artifact("metrics", out)?;
            manifest.write(&sidecar(out))
        }
    }
}

pub struct PruneOverrides {
    pub strategy: Option<StrategyArg>,
    pub r_op: Option<f64>,
    pub r_op1: Option<f64>,
    pub r_op2: Option<f64>,
    pub r_path: Option<f64>,
}

pub fn prune(filter: &Path, config: &Path, o: PruneOverrides, out: &Path) -> Result<(), CliError> {
    let (mut cfg, h) = read_config(config)?;
    check_inputs(&[filter], Some(&h))?;
    let _lock = Lock::for_file(out)?;
    if let Some(s) = o.strategy {
        cfg.strategy = match s {
            StrategyArg::FlopsUniform => Strategy::FlopsUniform,
            StrategyArg::FlopsScorePerBucket => Strategy::FlopsScorePerBucket,
            StrategyArg::FlopsScoreAll => Strategy::FlopsScoreAll,
        };
    }
    let r = &mut cfg.ratios;
    for (dst, src) in [(&mut r.r_op, o.r_op), (&mut r.r_op1, o.r_op1), (&mut r.r_op2, o.r_op2), (&mut r.r_path, o.r_path)] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    let f = load_filter(filter)?;
    let p = Pipeline::new(cfg.clone())?;
    let (state, _view, candidates) = p.prune(&f)?;
    let cand_path = out.with_extension("candidates.json");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_json(out, &state)?;
    write_json(&cand_path, &candidates)?;
    let mut manifest = RunManifest::new("prune", Some(h));
    manifest.add_input("filter", filter)?;
    seeds(&mut manifest, cfg.seed, &["op_scores", "prune", "thresholds"]);
    manifest.stages.insert("prune".into(), true);
    manifest.add_artifact("prune", out)?;
    manifest.add_artifact("candidates", &cand_path)?;
    manifest.write(&sidecar(out))
}

/// Writes stage artifacts of one method into a run directory.
struct DirSink<'a> {
    dir: &'a Path,
    method: &'static str,
    manifest: &'a mut RunManifest,
}

impl DirSink<'_> {
    fn put(&mut self, artifact: StageArtifact<'_>) -> Result<(), CliError> {
        let m = self.method;
        let (name, file) = match &artifact {
            StageArtifact::Supernet { stage, .. } => (format!("{m}_supernet_{stage}"), format!("{m}_supernet_{stage}.ckpt")),
            StageArtifact::Dataset { name, .. } => (format!("{m}_dataset_{name}"), format!("{m}_dataset_{name}.jsonl")),
            StageArtifact::Filter { .. } => (format!("{m}_filter"), format!("{m}_filter.ckpt")),
            StageArtifact::Candidates(_) => (format!("{m}_candidates"), format!("{m}_candidates.json")),
            StageArtifact::Prune(_) => (format!("{m}_prune"), format!("{m}_prune.json")),
            StageArtifact::Log(_) => (format!("log_{m}"), format!("log_{m}.jsonl")),
            StageArtifact::Eval { .. } => (format!("eval_{m}"), format!("eval_{m}.json")),
        };
        let path = self.dir.join(file);
        match artifact {
            StageArtifact::Supernet { net, .. } => {
                let mut w = create(&path)?;
                net.save(&mut w, serde_json::Value::Null)?;
                w.flush().map_err(|e| CliError::io(&path, e))?;
            }
            StageArtifact::Dataset { records, .. } => {
                let mut w = create(&path)?;
                write_dataset(&mut w, records).map_err(|e| CliError::io(&path, e))?;
                w.flush().map_err(|e| CliError::io(&path, e))?;
            }
            StageArtifact::Filter { filter, reports } => save_filter(filter, &path, serde_json::json!({ "reports": reports }))?,
            StageArtifact::Candidates(c) => write_json(&path, c)?,
            StageArtifact::Prune(s) => write_json(&path, s)?,
            StageArtifact::Log(l) => fs::write(&path, l.to_jsonl()).map_err(|e| CliError::io(&path, e))?,
            StageArtifact::Eval { results, .. } => write_json(&path, results)?,
        }
        self.manifest.add_artifact(&name, &path)
    }
}

impl StageSink for DirSink<'_> {
    fn record(&mut self, artifact: StageArtifact<'_>) -> Result<(), SimError> {
        self.put(artifact).map_err(|e| SimError::Sink(e.to_string()))
    }
}

const PIPELINE_STAGES: &[&str] = &[
    "supernet_init",
    "warmup",
    "main",
    "dataset",
    "pretrain_data",
    "filter_init",
    "pretrain",
    "filter_train",
    "op_scores",
    "prune",
    "thresholds",
    "eval",
];

pub fn train_supernet(
    config: &Path,
    prune: Option<&Path>,
    filter: Option<&Path>,
    epochs: Option<usize>,
    method: MethodArg,
    out: &Path,
) -> Result<(), CliError> {
    let (mut cfg, h) = read_config(config)?;
    if prune.is_some() != filter.is_some() {
        return Err(CliError::Usage("--prune and --filter go together".into()));
    }
    if prune.is_some() && method != MethodArg::Ours {
        return Err(CliError::Usage("--prune only applies to --method ours".into()));
    }
    let inputs: Vec<&Path> = prune.iter().chain(filter.iter()).copied().collect();
    check_inputs(&inputs, Some(&h))?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let _lock = Lock::acquire(out.join(".lock"))?;

    let manifest_path = out.join("manifest.json");
    let mut manifest = if manifest_path.exists() {
        let m = RunManifest::read(&manifest_path)?;
        if m.config_hash.as_deref() != Some(h.as_str()) {
            return Err(CliError::Mismatch(format!(
                "{} belongs to config {}, not {h}",
                out.display(),
                m.config_hash.unwrap_or_default()
            )));
        }
        m.verify(&manifest_path)?;
        m
    } else {
        RunManifest::new("train-supernet", Some(h))
    };
    let cfg_copy = out.join("config.json");
    write_json(&cfg_copy, &cfg)?;
    manifest.add_artifact("config", &cfg_copy)?;
    if let Some(e) = epochs {
        cfg.finetune_epochs = e;
        manifest.seeds.insert("main_epochs".into(), e as u64);
    }
    seeds(&mut manifest, cfg.seed, PIPELINE_STAGES);
    for p in &inputs {
        manifest.inputs.retain(|i| i.path != p.display().to_string());
        manifest.add_input("input", p)?;
    }

    let methods: &[(MethodArg, &'static str)] = match method {
        MethodArg::Ours => &[(MethodArg::Ours, "ours")],
        MethodArg::Uniform => &[(MethodArg::Uniform, "uniform")],
        MethodArg::Coupled => &[(MethodArg::Coupled, "coupled")],
        MethodArg::All => &[(MethodArg::Ours, "ours"), (MethodArg::Uniform, "uniform"), (MethodArg::Coupled, "coupled")],
    };
    for &(m, name) in methods {
        manifest.stages.insert(name.into(), false);
        let mut sink = DirSink { dir: out, method: name, manifest: &mut manifest };
        match (m, prune, filter) {
            (MethodArg::Ours, Some(pp), Some(fp)) => {
                let state: PruneState = read_json(pp)?;
                run_with_prune(&cfg, load_filter(fp)?, state, &mut sink)?;
            }
            (MethodArg::Ours, _, _) => {
                run_algorithm1(&cfg, &mut sink)?;
            }
            (MethodArg::Uniform, _, _) => {
                baseline_uniform(&cfg, &mut sink)?;
            }
            _ => {
                baseline_coupled(&cfg, &mut sink)?;
            }
        }
        manifest.stages.insert(name.into(), true);
        manifest.write(&manifest_path)?;
    }
    manifest.write(&manifest_path)
}

#[derive(Serialize)]
struct SearchOutput<'a> {
    master_seed: u64,
    evo: &'a EvoConfig,
    rows: &'a [pathprune::evo_search::SweepRow],
}

pub fn search(filter: &Path, prune: &Path, budget: f64, sweep: &[f64], config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = config.map(read_config).transpose()?;
    check_inputs(&[filter, prune], cfg.as_ref().map(|c| c.1.as_str()))?;
    let _lock = Lock::for_file(out)?;
    let f = load_filter(filter)?;
    let state: PruneState = read_json(prune)?;
    if let Some((c, _)) = &cfg {
        f.check_compatible(&c.space, &make_buckets(&c.space, c.num_buckets)?)?;
    }
    let view = state.apply(&SpaceView::full(f.space())?)?;
    let master = cfg.as_ref().map(|c| c.0.seed).unwrap_or(state.seed);
    let base = cfg.as_ref().map(|c| c.0.search.clone()).unwrap_or_default();
    let evo = EvoConfig { seed: stage_seed(master, "search"), ..base };
    let mut budgets = vec![budget];
    budgets.extend_from_slice(sweep);
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    let mut rows = pareto_sweep(&f, &view, &budgets, &evo)?;
    if let Some((c, _)) = cfg.as_ref().filter(|c| c.0.mode == Mode::Oracle) {
        let o = SyntheticOracle::new(&c.space, c.oracle.clone());
        for r in &mut rows {
            r.oracle_loss = Some(o.eval(&r.result.best));
        }
    }
    let json_path = out.with_extension("json");
    if json_path == out {
        return Err(CliError::Usage("--out must not end in .json; the JSON results are written next to it".into()));
    }
    let mut w = create(out)?;
    w.write_all(sweep_csv(&rows).as_bytes()).map_err(|e| CliError::io(out, e))?;
    w.flush().map_err(|e| CliError::io(out, e))?;
    write_json(&json_path, &SearchOutput { master_seed: master, evo: &evo, rows: &rows })?;
    let mut manifest = RunManifest::new("search", cfg.map(|c| c.1));
    manifest.add_input("filter", filter)?;
    manifest.add_input("prune", prune)?;
    seeds(&mut manifest, master, &["search"]);
    manifest.stages.insert("search".into(), true);
    manifest.add_artifact("search_csv", out)?;
    manifest.add_artifact("search_json", &json_path)?;
    manifest.write(&sidecar(out))
}

pub fn report(run: &Path, out: &Path) -> Result<(), CliError> {
    let manifest_path = run.join("manifest.json");
    if !manifest_path.exists() {
        return Err(CliError::Missing(manifest_path.display().to_string()));
    }
    let m = RunManifest::read(&manifest_path)?;
    m.verify(&manifest_path)?;
    let cfg: ExperimentConfig = read_json(&run.join("config.json"))?;
    let buckets = make_buckets(&cfg.space, cfg.num_buckets)?;
    let _lock = Lock::for_file(out)?;
    let mut csv = String::from("method,bucket,flops_lo,flops_hi,paths,mean_loss\n");
    let mut methods = 0;
    for a in m.artifacts.iter().filter(|a| a.name.starts_with("eval_")) {
        let method = &a.name["eval_".len()..];
        let evals: Vec<BucketEval> = read_json(&run.join(&a.path))?;
        for e in &evals {
            let lo = buckets.edges[e.bucket];
            let hi = buckets.edges[e.bucket + 1];
            writeln!(csv, "{method},{},{lo:.6},{hi:.6},{},{:.8}", e.bucket, e.paths, e.mean_loss).expect("write to string");
        }
        methods += 1;
    }
    if methods == 0 {
        return Err(CliError::Missing(format!("no evaluation results in {}", run.display())));
    }
    let mut w = create(out)?;
    w.write_all(csv.as_bytes()).map_err(|e| CliError::io(out, e))?;
    w.flush().map_err(|e| CliError::io(out, e))?;
    let mut manifest = RunManifest::new("report", m.config_hash.clone());
    manifest.add_input("run_manifest", &manifest_path)?;
    manifest.stages.insert("report".into(), true);
    manifest.add_artifact("report", out)?;
    manifest.write(&sidecar(out))
}
