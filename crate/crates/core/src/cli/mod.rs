//! Operator commands: train (and adapt), eval and export.

mod spec;

pub use spec::{Diagnostic, EvalSettings, ExperimentSpec, Preset, RosterEvent, SCHEMA_VERSION};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::env::Task;
use crate::nets::checkpoint::Checkpoint;
use crate::nets::{Critic, Head, NetworkBundle};
use crate::roster::{AgentId, AgentKind, Roster};
use crate::trainer::{
    episodes_to_threshold, evaluate, evaluate_random, gap_threshold, write_csv, EvalPoint, JoinMode, TrainError, Trainer,
};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: exit status 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running: exit status 2.
    #[error(transparent)]
    Runtime(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    ExperimentSpec::parse(&text).map_err(|d| CliError::Validation(format!("{}: {d}", path.display())))
}

/// Per-stage results: one stage per stretch of constant roster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub start_episode: usize,
    pub roster: String,
    pub joined: Vec<AgentId>,
    pub dropped: Vec<AgentId>,
    /// Scalars updated in this stage's first phase.
    pub trainable_scalars: usize,
    /// Mean per-agent evaluation reward of the last three evaluations.
    pub plateau: Option<f64>,
    pub random_baseline: f64,
    pub threshold: Option<f64>,
    /// Episodes after the roster change until evaluation reached `threshold`.
    pub episodes_to_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub task: Task,
    pub mode: JoinMode,
    pub episodes: usize,
    pub original_agents: Vec<AgentId>,
    pub parameter_count: usize,
    pub critic_rounds: usize,
    pub actor_rounds: usize,
    pub stages: Vec<StageSummary>,
}

fn plateau(evals: &[EvalPoint]) -> Option<f64> {
    let tail = &evals[evals.len().saturating_sub(3)..];
    (!tail.is_empty()).then(|| tail.iter().map(|e| e.per_agent_reward).sum::<f64>() / tail.len() as f64)
}

pub fn write_evals_csv<W: Write>(out: W, evals: &[EvalPoint]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "roster", "mean_reward", "per_agent_reward", "mean_touches"])?;
    for e in evals {
        w.write_record([
            e.episode.to_string(),
            e.roster.to_string(),
            e.mean_reward.to_string(),
            e.per_agent_reward.to_string(),
            e.mean_touches.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Runs one seed of `spec`, writing artifacts under `dir`.
pub fn run_seed(spec: &ExperimentSpec, seed: u64, episodes: usize, dir: &Path) -> Result<RunSummary, CliError> {
    let train = spec.train_config().map_err(CliError::Validation)?;
    let env = spec.env_config().map_err(CliError::Validation)?;
    let net = spec.net_config().map_err(CliError::Validation)?;
    let roster = spec.initial_roster();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut trainer = Trainer::new(train, spec.task, env.clone(), net, roster.clone(), seed)?;
    let all_scalars = |t: &Trainer| {
        let names: std::collections::BTreeSet<String> = t.bundle().params().names().cloned().collect();
        t.bundle().params().scalar_count(&names)
    };
    let ev = &spec.eval;
    let baseline = |r: &Roster| -> Result<f64, CliError> {
        Ok(evaluate_random(spec.task, &env, r, ev.episodes, ev.seed)?.per_agent_reward)
    };
    let mut stages = vec![StageSummary {
        start_episode: 0,
        roster: roster.tag().to_string(),
        joined: Vec::new(),
        dropped: Vec::new(),
        trainable_scalars: all_scalars(&trainer),
        plateau: None,
        random_baseline: baseline(&roster)?,
        threshold: None,
        episodes_to_threshold: None,
    }];
    let mut bounds: Vec<usize> = spec.events.iter().map(|e| e.episode.min(episodes)).collect();
    bounds.push(episodes);
    let mut evals_all: Vec<EvalPoint> = Vec::new();
    for (k, &end) in bounds.iter().enumerate() {
        let start = trainer.episodes_run();
        let evals = trainer.train_with_evals(end.saturating_sub(start), ev.every, ev.episodes, ev.seed, None)?;
        let stage = stages.last_mut().expect("one stage");
        stage.plateau = plateau(&evals);
        if let Some(t) = stage.threshold {
            stage.episodes_to_threshold = episodes_to_threshold(&evals, t).map(|e| e - start);
        }
        evals_all.extend(evals);
        let Some(event) = spec.events.get(k) else { break };
        if event.episode > episodes {
            break;
        }
        trainer
            .checkpoint()?
            .save(dir.join(format!("checkpoint-{end}.ckpt")))
            .map_err(TrainError::from)?;
        let previous = stage.plateau;
        let joiners = ExperimentSpec::joiners(trainer.bundle().roster(), event);
        if !event.drop.is_empty() {
            trainer.handle_drop(&event.drop)?;
        }
        let mut scalars = 0;
        if !joiners.is_empty() {
            scalars = trainer.join(&joiners, spec.mode)?;
        }
        let random_baseline = baseline(trainer.roster())?;
        stages.push(StageSummary {
            start_episode: end,
            roster: trainer.roster().tag().to_string(),
            joined: joiners.iter().map(|j| j.0).collect(),
            dropped: event.drop.clone(),
            trainable_scalars: scalars,
            plateau: None,
            random_baseline,
            threshold: previous.map(|p| gap_threshold(random_baseline, p, ev.threshold)),
            episodes_to_threshold: None,
        });
    }
    let mut csv_bytes = Vec::new();
    write_csv(&mut csv_bytes, &trainer.metrics().episodes)?;
    write_file(&dir.join("metrics.csv"), &csv_bytes)?;
    let mut eval_bytes = Vec::new();
    write_evals_csv(&mut eval_bytes, &evals_all)?;
    write_file(&dir.join("evals.csv"), &eval_bytes)?;
    trainer
        .checkpoint()?
        .save(dir.join("final.ckpt"))
        .map_err(TrainError::from)?;
    let summary = RunSummary {
        seed,
        task: spec.task,
        mode: spec.mode,
        episodes: trainer.episodes_run(),
        original_agents: roster.live_ids(),
        parameter_count: all_scalars(&trainer),
        critic_rounds: trainer.critic_rounds(),
        actor_rounds: trainer.actor_rounds(),
        stages,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), json.as_bytes())?;
    Ok(summary)
}

pub struct TrainArgs {
    pub spec: PathBuf,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub episodes: Option<usize>,
    /// `adapt` requires at least one join event.
    pub require_join: bool,
}

pub fn cmd_train(args: &TrainArgs) -> Result<Vec<RunSummary>, CliError> {
    let spec = load_spec(&args.spec)?;
    if args.require_join && spec.events.iter().all(|e| e.join.is_empty()) {
        return Err(CliError::Validation("adapt needs a spec with at least one join event".into()));
    }
    let out = args.out.clone().unwrap_or_else(|| spec.out.clone());
    let seeds = if args.seeds.is_empty() { spec.seeds.clone() } else { args.seeds.clone() };
    let episodes = args.episodes.unwrap_or(spec.episodes);
    write_file(&out.join("spec.toml"), spec.to_toml().as_bytes())?;
    seeds
        .iter()
        .map(|&s| run_seed(&spec, s, episodes, &out.join(format!("seed-{s}"))))
        .collect()
}

pub struct EvalArgs {
    /// `label=path` or a bare path (label "0", "1", ...).
    pub checkpoints: Vec<String>,
    /// `predator_label,prey_label` pairs (Predator-Prey only).
    pub pairings: Vec<String>,
    pub episodes: usize,
    pub runs: usize,
    pub seed: u64,
    pub out: PathBuf,
}

struct Loaded {
    task: Task,
    env: crate::env::EnvConfig,
    bundle: NetworkBundle,
}

fn parse_checkpoints(specs: &[String]) -> Result<BTreeMap<String, Loaded>, CliError> {
    let mut out = BTreeMap::new();
    for (i, s) in specs.iter().enumerate() {
        let (label, path) = match s.split_once('=') {
            Some((l, p)) => (l.to_string(), p),
            None => (i.to_string(), s.as_str()),
        };
        let ck = Checkpoint::load(path).map_err(|e| CliError::Validation(format!("{path}: {e}")))?;
        let (task, env, bundle) = Trainer::bundle_from_checkpoint(&ck).map_err(|e| CliError::Validation(format!("{path}: {e}")))?;
        if out.insert(label.clone(), Loaded { task, env, bundle }).is_some() {
            return Err(CliError::Validation(format!("checkpoint label {label} given twice")));
        }
    }
    Ok(out)
}

fn live_roster(bundle: &NetworkBundle) -> Roster {
    let mut r = Roster::new();
    for e in bundle.roster().live() {
        r.add(e.id, e.kind).expect("unique ids");
    }
    r
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ckpts = parse_checkpoints(&args.checkpoints)?;
    let Some(first) = ckpts.values().next() else {
        return Err(CliError::Validation("at least one --checkpoint is required".into()));
    };
    let task = first.task;
    if ckpts.values().any(|c| c.task != task) {
        return Err(CliError::Validation("checkpoints come from different tasks".into()));
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    for p in &args.pairings {
        let (a, b) = p
            .split_once(',')
            .ok_or_else(|| CliError::Validation(format!("pairing {p:?} is not PREDATOR,PREY")))?;
        for l in [a, b] {
            if !ckpts.contains_key(l) {
                return Err(CliError::Validation(format!("pairing {p:?} names unknown checkpoint {l:?}")));
            }
        }
        pairs.push((a.to_string(), b.to_string()));
    }
    if !pairs.is_empty() && task != Task::PredatorPrey {
        return Err(CliError::Validation("--pairing applies to predator_prey checkpoints only".into()));
    }
    if pairs.is_empty() {
        pairs = ckpts.keys().map(|l| (l.clone(), l.clone())).collect();
    }
    let touches = task == Task::PredatorPrey;
    let mut header = vec!["pairing", "policy", "opponent", "run", "seed", "episodes", "mean_reward", "per_agent_reward"];
    if touches {
        header.push("mean_touches");
    }
    let mut rows = csv::Writer::from_writer(Vec::new());
    rows.write_record(&header)?;
    let mut table = csv::Writer::from_writer(Vec::new());
    let mut table_header = vec!["pairing", "policy", "opponent", "runs", "mean_reward"];
    if touches {
        table_header.push("mean_touches");
    }
    table.write_record(&table_header)?;
    for (a, b) in &pairs {
        let (pa, pb) = (&ckpts[a], &ckpts[b]);
        let roster = live_roster(&pa.bundle);
        for e in roster.live() {
            let source = if task == Task::PredatorPrey && e.kind == AgentKind::Prey { pb } else { pa };
            if !source.bundle.roster().is_live(e.id) {
                return Err(CliError::Validation(format!(
                    "checkpoint for {} agents has no live agent {}",
                    e.kind, e.id
                )));
            }
        }
        let label = format!("{a},{b}");
        let (mut sum_r, mut sum_t) = (0.0, 0.0);
        for run in 0..args.runs {
            let seed = args.seed + run as u64;
            let report = evaluate(task, &pa.env, &roster, args.episodes, seed, &|k| {
                if k == AgentKind::Prey {
                    &pb.bundle
                } else {
                    &pa.bundle
                }
            })?;
            sum_r += report.mean_reward;
            sum_t += report.mean_touches;
            if args.episodes == 0 {
                continue;
            }
            let mut rec = vec![
                label.clone(),
                a.clone(),
                b.clone(),
                run.to_string(),
                seed.to_string(),
                args.episodes.to_string(),
                report.mean_reward.to_string(),
                report.per_agent_reward.to_string(),
            ];
            if touches {
                rec.push(report.mean_touches.to_string());
            }
            rows.write_record(&rec)?;
        }
        if args.episodes == 0 || args.runs == 0 {
            continue;
        }
        let n = args.runs as f64;
        let mut rec = vec![label, a.clone(), b.clone(), args.runs.to_string(), (sum_r / n).to_string()];
        if touches {
            rec.push((sum_t / n).to_string());
        }
        table.write_record(&rec)?;
    }
    let finish = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| CliError::Validation(e.to_string()));
    write_file(&args.out.join("eval.csv"), &finish(rows)?)?;
    let name = if touches { "touches.csv" } else { "table.csv" };
    write_file(&args.out.join(name), &finish(table)?)?;
    Ok(())
}

pub struct ExportArgs {
    pub run: PathBuf,
    pub out: Option<PathBuf>,
    /// Trailing moving-average window for reward curves.
    pub smooth: usize,
    pub svg: bool,
}

fn seed_dirs(run: &Path) -> Result<Vec<(u64, PathBuf)>, CliError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(run).map_err(io_err(run))? {
        let entry = entry.map_err(io_err(run))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse().ok()) {
            dirs.push((seed, entry.path()));
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Validation(format!("{}: no seed-* directories", run.display())));
    }
    Ok(dirs)
}

/// Trailing moving average.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Mean and two-sided 95% Student-t interval; a single sample has zero width.
pub fn confidence_band(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, mean, mean);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("dof positive").inverse_cdf(0.975);
    let half = t * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

fn read_curve(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "mean_reward")
        .ok_or_else(|| CliError::Validation(format!("{}: no mean_reward column", path.display())))?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec[col]
                .parse()
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn cmd_export(args: &ExportArgs) -> Result<(), CliError> {
    let out = args.out.clone().unwrap_or_else(|| args.run.join("export"));
    let dirs = seed_dirs(&args.run)?;

    let mut sel = csv::Writer::from_writer(Vec::new());
    let mut curves = Vec::new();
    let mut header_done = false;
    for (seed, dir) in &dirs {
        let ck_path = dir.join("final.ckpt");
        let ck = Checkpoint::load(&ck_path).map_err(|e| CliError::Validation(format!("{}: {e}", ck_path.display())))?;
        let (_, _, bundle) = Trainer::bundle_from_checkpoint(&ck)?;
        let summary_path = dir.join("summary.json");
        let text = fs::read_to_string(&summary_path).map_err(io_err(&summary_path))?;
        let summary: RunSummary =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", summary_path.display())))?;
        let k = bundle.config().blocks;
        if !header_done {
            let mut h = vec!["seed".to_string(), "agent".into(), "kind".into(), "original".into(), "live".into(), "head".into()];
            h.extend((0..k).map(|i| format!("w{i}")));
            sel.write_record(&h)?;
            header_done = true;
        }
        for e in bundle.roster().all() {
            for head in [Head::Policy, Head::Value(Critic::First), Head::Value(Critic::Second)] {
                let w = bundle.mixing_weights(head, e.id).map_err(TrainError::from)?;
                let mut rec = vec![
                    seed.to_string(),
                    e.id.to_string(),
                    e.kind.to_string(),
                    summary.original_agents.contains(&e.id).to_string(),
                    e.live.to_string(),
                    head.prefix().to_string(),
                ];
                rec.extend(w.iter().map(|v| v.to_string()));
                sel.write_record(&rec)?;
            }
        }
        curves.push(smooth(&read_curve(&dir.join("metrics.csv"))?, args.smooth));
    }
    let sel = sel.into_inner().map_err(|e| CliError::Validation(e.to_string()))?;
    write_file(&out.join("selectors.csv"), &sel)?;

    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    let mut band = Vec::with_capacity(len);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["episode", "seeds", "mean", "ci_low", "ci_high"])?;
    for ep in 0..len {
        let samples: Vec<f64> = curves.iter().filter_map(|c| c.get(ep).copied()).collect();
        let (m, lo, hi) = confidence_band(&samples);
        band.push((m, lo, hi));
        w.write_record([ep.to_string(), samples.len().to_string(), m.to_string(), lo.to_string(), hi.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Validation(e.to_string()))?;
    write_file(&out.join("reward_curve.csv"), &bytes)?;
    if args.svg {
        write_file(&out.join("reward_curve.svg"), render_svg(&band).as_bytes())?;
    }
    Ok(())
}

/// Line plot of the mean curve over a shaded confidence band.
fn render_svg(band: &[(f64, f64, f64)]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let lo = band.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
    let hi = band.iter().map(|b| b.2).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = band.len().max(2) as f64 - 1.0;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / span;
    let mut area: Vec<String> = band.iter().enumerate().map(|(i, b)| format!("{:.1},{:.1}", x(i), y(b.2))).collect();
    area.extend(band.iter().enumerate().rev().map(|(i, b)| format!("{:.1},{:.1}", x(i), y(b.1))));
    let line: Vec<String> = band.iter().enumerate().map(|(i, b)| format!("{:.1},{:.1}", x(i), y(b.0))).collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <polygon points=\"{}\" fill=\"#9ecae1\" opacity=\"0.5\"/>\n\
         <polyline points=\"{}\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"1.5\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"12\">mean episode reward ({lo:.2} to {hi:.2})</text>\n</svg>\n",
        area.join(" "),
        line.join(" ")
    )
}
