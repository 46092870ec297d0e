//! Subcommand implementations.
//!
//! Every invocation writes into its own run directory
//! `<out>/<command>-<hash>-seed<seed>`, where `hash` covers the command, its
//! arguments, the resolved configuration and the content of every input
//! file. The directory holds `config.toml` (resolved), `run.json` (seeds and
//! input hashes) and the command's outputs. Its path is printed on stdout
//! as `run_dir=<path>`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ma2t::attacks::{universal_noise, AttackConfig, AttackMethod};
use ma2t::eval::{
    emit_report, evaluate_blackbox, evaluate_corruption, evaluate_whitebox, image_attacks, validate_bundle, EvalMatrix, InputHash,
    ReportBundle, Surrogate,
};
use ma2t::sim::{compare_defenses, run_closed_loop, write_comparison_csv, PipelineDriver, SimAttack};
use ma2t::task::dataset::Dataset;
use ma2t::trainer::{train_with_recovery, write_run, Checkpoint, TrainMethod};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};
use crate::{Cli, Command, Failure};

const TRAIN_SPLIT: &str = "train.ds";
const VAL_SPLIT: &str = "val.ds";

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    args: &'a [String],
    seed: u64,
    attack_seeds: Vec<u64>,
    inputs: &'a [InputHash],
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    inputs: Vec<InputHash>,
}

impl Run {
    fn seeds(&self) -> Vec<u64> {
        self.cfg.eval.seeds(self.cfg.seed)
    }

    fn bundle(&self, matrices: Vec<EvalMatrix>) -> Result<ReportBundle, Failure> {
        let configs = serde_json::to_value(&self.cfg).map_err(|e| Failure::Runtime(e.to_string()))?;
        Ok(ReportBundle::new(matrices, configs, self.seeds(), self.inputs.clone()))
    }

    fn emit(&self, matrices: Vec<EvalMatrix>) -> Result<(), Failure> {
        emit_report(&self.dir, &self.bundle(matrices)?)?;
        Ok(())
    }
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Failure::Config(ConfigError { key: None, reason: format!("cannot read {}: {e}", p.display()) }))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::resolve(&text, cli.seed).map_err(Failure::Config)?;
    if let Command::Attack { method, norm, objective, eps, steps, restarts, .. } = &cli.command {
        let a = &mut cfg.attack;
        if let Some(m) = method {
            a.method = *m;
        }
        if let Some(n) = norm {
            a.norm = *n;
        }
        if let Some(o) = objective {
            a.objective = *o;
        }
        if let Some(e) = eps {
            a.eps = *e;
            a.module_wise = false;
        }
        if let Some(s) = steps {
            a.steps = *s;
        }
        if let Some(r) = restarts {
            a.restarts = *r;
        }
        cfg.validate().map_err(|e| Failure::Config(ConfigError::from_core(e)))?;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let (inputs, args) = input_files(&cli.command)?;
    let run = open_run(cli, cfg, inputs, args)?;
    match &cli.command {
        Command::GenData => gen_data(&run),
        Command::Pretrain { data } => train(&run, TrainMethod::Clean, data, None),
        Command::Finetune { method, data, pretrained } => train(&run, *method, data, Some(pretrained)),
        Command::Attack { checkpoint, data, .. } => {
            let victim = Checkpoint::load(checkpoint)?;
            let val = eval_split(&run, data)?;
            let attack = run.cfg.attack.to_attack(0);
            let mut m = evaluate_whitebox(&victim, &val, &[attack], &run.seeds())?;
            m.name = "attack".into();
            run.emit(vec![m])
        }
        Command::EvalWhitebox { checkpoint, data } => {
            let victim = Checkpoint::load(checkpoint)?;
            let val = eval_split(&run, data)?;
            run.emit(vec![evaluate_whitebox(&victim, &val, &whitebox_attacks(&run.cfg), &run.seeds())?])
        }
        Command::EvalBlackbox { checkpoint, data, surrogates } => {
            let victim = Checkpoint::load(checkpoint)?;
            let val = eval_split(&run, data)?;
            let loaded = named_checkpoints(surrogates)?;
            let s: Vec<Surrogate> = loaded.iter().map(|(n, c)| Surrogate { name: n, checkpoint: c }).collect();
            run.emit(vec![evaluate_blackbox(&victim, &s, &val, &transfer_attacks(&run.cfg), &run.seeds())?])
        }
        Command::EvalCorruption { checkpoint, data } => {
            let victim = Checkpoint::load(checkpoint)?;
            let val = eval_split(&run, data)?;
            run.emit(vec![evaluate_corruption(&victim, &val, &run.seeds())?])
        }
        Command::Simulate { checkpoints, data } => simulate(&run, checkpoints, data),
        Command::Report { runs } => report(&run, runs),
    }?;
    println!("run_dir={}", run.dir.display());
    Ok(())
}

/// Input files of a command and the canonical argument list hashed into the run name.
fn input_files(cmd: &Command) -> Result<(Vec<(String, PathBuf)>, Vec<String>), Failure> {
    let split = |d: &Path| vec![("train".to_string(), d.join(TRAIN_SPLIT)), ("val".to_string(), d.join(VAL_SPLIT))];
    let mut inputs = Vec::new();
    let mut args = Vec::new();
    match cmd {
        Command::GenData => {}
        Command::Pretrain { data } => inputs.extend(split(data)),
        Command::Finetune { method, data, pretrained } => {
            args.push(method.name().to_string());
            inputs.extend(split(data));
            inputs.push(("pretrained".into(), pretrained.clone()));
        }
        Command::Attack { checkpoint, data, .. } | Command::EvalWhitebox { checkpoint, data } | Command::EvalCorruption { checkpoint, data } => {
            inputs.extend(split(data));
            inputs.push(("victim".into(), checkpoint.clone()));
        }
        Command::EvalBlackbox { checkpoint, data, surrogates } => {
            inputs.extend(split(data));
            inputs.push(("victim".into(), checkpoint.clone()));
            for s in surrogates {
                let (n, p) = split_named(s)?;
                args.push(n.clone());
                inputs.push((format!("surrogate:{n}"), p));
            }
        }
        Command::Simulate { checkpoints, data } => {
            inputs.extend(split(data));
            for c in checkpoints {
                let (n, p) = split_named(c)?;
                args.push(n.clone());
                inputs.push((format!("checkpoint:{n}"), p));
            }
        }
        Command::Report { runs } => {
            for (i, r) in runs.iter().enumerate() {
                inputs.push((format!("report:{i}"), r.join("report.json")));
            }
        }
    }
    Ok((inputs, args))
}

fn open_run(cli: &Cli, cfg: RunConfig, files: Vec<(String, PathBuf)>, args: Vec<String>) -> Result<Run, Failure> {
    let mut inputs = Vec::with_capacity(files.len());
    for (name, path) in &files {
        inputs.push(
            InputHash::of_file(name.clone(), path).map_err(|e| Failure::Runtime(format!("input {}: {e}", path.display())))?,
        );
    }
    let resolved = cfg.to_toml();
    let mut h = Sha256::new();
    h.update(cli.command.name().as_bytes());
    for a in &args {
        h.update(b"\0");
        h.update(a.as_bytes());
    }
    h.update(b"\0");
    h.update(resolved.as_bytes());
    for i in &inputs {
        h.update(i.name.as_bytes());
        h.update(i.hash.as_bytes());
    }
    let hash = hex::encode(h.finalize());
    let dir = cli.out.join(format!("{}-{}-seed{}", cli.command.name(), &hash[..16], cfg.seed));
    if dir.exists() {
        if !cli.force {
            return Err(Failure::Runtime(format!("run directory {} exists; pass --force to overwrite", dir.display())));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), &resolved)?;
    let record = RunRecord { command: cli.command.name(), args: &args, seed: cfg.seed, attack_seeds: cfg.eval.seeds(cfg.seed), inputs: &inputs };
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record).expect("record serializes") + "\n")?;
    Ok(Run { cfg, dir, inputs })
}

fn split_named(s: &str) -> Result<(String, PathBuf), Failure> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(Failure::Usage(format!("expected name=path, got `{s}`"))),
    }
}

fn named_checkpoints(list: &[String]) -> Result<Vec<(String, Checkpoint)>, Failure> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in list {
        let (n, p) = split_named(s)?;
        if !seen.insert(n.clone()) {
            return Err(Failure::Usage(format!("duplicate checkpoint name `{n}`")));
        }
        out.push((n, Checkpoint::load(&p)?));
    }
    Ok(out)
}

fn eval_split(run: &Run, data: &Path) -> Result<Dataset, Failure> {
    Ok(Dataset::load(&data.join(VAL_SPLIT))?.head(run.cfg.eval.samples))
}

fn with_budget_settings(mut a: AttackConfig, cfg: &RunConfig) -> AttackConfig {
    if a.method != AttackMethod::Fgsm {
        a.steps = cfg.attack.steps;
    }
    a.restarts = cfg.attack.restarts;
    a.momentum = cfg.attack.momentum;
    a
}

fn transfer_attacks(cfg: &RunConfig) -> Vec<AttackConfig> {
    image_attacks(cfg.attack.eps).into_iter().map(|a| with_budget_settings(a, cfg)).collect()
}

fn whitebox_attacks(cfg: &RunConfig) -> Vec<AttackConfig> {
    let mut list = transfer_attacks(cfg);
    let module_wise = crate::config::AttackSection { module_wise: true, ..cfg.attack.clone() };
    list.push(module_wise.to_attack(0));
    list
}

fn gen_data(run: &Run) -> Result<(), Failure> {
    let splits = Dataset::generate(&run.cfg.dataset)?;
    splits.train.save(&run.dir.join(TRAIN_SPLIT))?;
    splits.val.save(&run.dir.join(VAL_SPLIT))?;
    Ok(())
}

fn train(run: &Run, method: TrainMethod, data: &Path, pretrained: Option<&PathBuf>) -> Result<(), Failure> {
    let train = Dataset::load(&data.join(TRAIN_SPLIT))?;
    let start = pretrained.map(|p| Checkpoint::load(p)).transpose()?;
    let cfg = run.cfg.train_config(method, run.cfg.seed);
    let result = train_with_recovery(start.as_ref(), &train, &cfg, &run.dir)?;
    write_run(&result, &cfg, &run.dir)?;
    Ok(())
}

fn simulate(run: &Run, checkpoints: &[String], data: &Path) -> Result<(), Failure> {
    let models = named_checkpoints(checkpoints)?;
    let train = Dataset::load(&data.join(TRAIN_SPLIT))?;
    let cfg = run.cfg.sim_config();
    let noise = universal_noise(&models[0].1.pipeline, &train, &run.cfg.universal_config())?;
    let attack = SimAttack { delta: noise.delta.clone(), eps: noise.eps };
    let refs: Vec<(&str, &ma2t::pipeline::Pipeline)> = models.iter().map(|(n, c)| (n.as_str(), &c.pipeline)).collect();
    let rows = compare_defenses(&refs, &cfg, &attack)?;
    write_comparison_csv(&run.dir.join("closed_loop.csv"), &rows)?;
    for (name, p) in &refs {
        for attacked in [false, true] {
            let r = run_closed_loop(&PipelineDriver(p), &cfg, attacked.then_some(&attack))?;
            let cond = if attacked { "attacked" } else { "clean" };
            r.write_trace_csv(&run.dir.join(format!("trace-{name}-{cond}.csv")))?;
        }
    }
    let json = serde_json::json!({
        "universal": { "eps": noise.eps, "epoch_losses": noise.epoch_losses },
        "rows": rows,
    });
    std::fs::write(run.dir.join("closed_loop.json"), serde_json::to_string_pretty(&json).expect("serializes") + "\n")?;
    Ok(())
}

fn report(run: &Run, runs: &[PathBuf]) -> Result<(), Failure> {
    let mut matrices = Vec::new();
    let mut seeds = BTreeSet::new();
    let mut configs = serde_json::Map::new();
    let mut names = BTreeSet::new();
    for (i, dir) in runs.iter().enumerate() {
        let text = std::fs::read_to_string(dir.join("report.json"))?;
        let b = validate_bundle(&text)?;
        seeds.extend(b.seeds.iter().copied());
        configs.insert(format!("report:{i}"), b.configs);
        for mut m in b.matrices {
            if !names.insert(m.name.clone()) {
                m.name = format!("{}-{i}", m.name);
                names.insert(m.name.clone());
            }
            matrices.push(m);
        }
    }
    let mut bundle = run.bundle(matrices)?;
    bundle.seeds = seeds.into_iter().collect();
    bundle.configs = serde_json::json!({ "run": bundle.configs, "merged": configs });
    emit_report(&run.dir, &bundle)?;
    Ok(())
}
