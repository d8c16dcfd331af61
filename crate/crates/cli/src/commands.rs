use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use log::{debug, info};

use mematch_core::embednet::StatsAccess;
use mematch_core::episodes::{sample_episode, Dataset};
use mematch_core::numcore::{Fault, Tape};
use mematch_core::rng::substream;
use mematch_core::trainer::{
    episode_graph, evaluate, load_checkpoint, save_checkpoint, Checkpoint, EvalReport, EvalSettings, Matcher, Model,
    TrainSession,
};
use mematch_core::verify::{run_battery, VerifyOptions, VerifyReport};

use crate::config::RunConfig;
use crate::Failure;

pub const METRICS_HEADER: &str = "step,loss,lr,val_acc";
pub const EVAL_HEADER: &str = "ways,shots,episodes,queries,mean_acc,ci95";

/// Flags shared by the subcommands; `None` keeps the config value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub ways: Option<usize>,
    pub shots: Option<usize>,
    pub queries: Option<usize>,
    pub episodes: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = &self.checkpoint {
            cfg.output.checkpoint = p.clone();
        }
        self.apply_eval(&mut cfg.eval);
        Ok(cfg)
    }

    fn apply_eval(&self, eval: &mut EvalSettings) {
        eval.ways = self.ways.unwrap_or(eval.ways);
        eval.shots = self.shots.unwrap_or(eval.shots);
        eval.queries = self.queries.unwrap_or(eval.queries);
        eval.episodes = self.episodes.unwrap_or(eval.episodes);
        eval.threads = self.threads.unwrap_or(eval.threads);
    }
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub start_step: u64,
    pub final_step: u64,
    pub last_loss: Option<f64>,
    pub best_val: Option<f64>,
}

pub fn train(ov: &Overrides, resume: bool, out: &mut dyn Write) -> Result<TrainSummary, Failure> {
    let cfg = ov.run_config()?;
    cfg.validate()?;
    let splits = cfg.data.load(cfg.seed)?;
    let settings = cfg.session_settings();
    let ckpt_path = cfg.output.checkpoint.clone();

    let mut session = if resume {
        let ck =
            load_checkpoint::<f32>(&ckpt_path).with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        if ck.params.config != cfg.model {
            return Err(anyhow!(
                "invalid configuration: model: checkpoint was trained with different model dimensions"
            )
            .into());
        }
        TrainSession::resume(ck, settings)?
    } else {
        TrainSession::new(&cfg.model, settings, cfg.seed)?
    };
    let start_step = session.step();
    let mut metrics = open_metrics(&cfg.output.metrics, resume.then_some(start_step))?;
    let mut best_val = if resume { best_logged_val(&cfg.output.metrics)? } else { None };
    let validate_on = splits.val.as_ref().filter(|_| cfg.train.val_every > 0);
    let meta = cfg.to_toml();
    info!("training from step {start_step} to {}", cfg.train.steps);

    let started = Instant::now();
    let mut last_loss = None;
    while session.step() < cfg.train.steps {
        let outcome = session.advance(&splits.train)?;
        let step = session.step();
        last_loss = Some(outcome.loss);
        let val_acc = match validate_on {
            Some(val) if step % cfg.train.val_every == 0 => {
                let mut vs = cfg.eval;
                vs.episodes = cfg.train.val_episodes;
                Some(evaluate(&session.model(), val, &vs, cfg.seed)?.mean_accuracy)
            }
            _ => None,
        };
        writeln!(
            metrics,
            "{step},{},{},{}",
            outcome.loss,
            outcome.lr,
            val_acc.map(|v| v.to_string()).unwrap_or_default()
        )
        .context("writing metrics")?;
        if step % cfg.train.checkpoint_every == 0 || step == cfg.train.steps {
            metrics.flush().context("writing metrics")?;
            save_checkpoint(&session.checkpoint(meta.clone()), &ckpt_path)?;
            debug!("checkpoint at step {step}");
        }
        if let Some(acc) = val_acc {
            if best_val.is_none_or(|b| acc > b) {
                best_val = Some(acc);
                save_checkpoint(&session.checkpoint(meta.clone()), &cfg.output.best_checkpoint())?;
            }
        }
        if step % 100 == 0 {
            info!("step {step} loss {:.4} lr {} ({:.1}s)", outcome.loss, outcome.lr, started.elapsed().as_secs_f64());
        }
    }
    metrics.flush().context("writing metrics")?;
    if session.step() == start_step {
        save_checkpoint(&session.checkpoint(meta), &ckpt_path)?;
    }
    let final_step = session.step();
    writeln!(
        out,
        "trained {} steps (now at step {final_step}); checkpoint {}",
        final_step - start_step,
        ckpt_path.display()
    )
    .context("writing output")?;
    Ok(TrainSummary { start_step, final_step, last_loss, best_val })
}

/// Opens the metrics log for appending. A fresh run starts a new file; a
/// resumed run keeps only rows up to the checkpoint's step.
fn open_metrics(path: &Path, resume_from: Option<u64>) -> anyhow::Result<File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut kept = vec![METRICS_HEADER.to_string()];
    if let (Some(step), true) = (resume_from, path.exists()) {
        let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
        for line in BufReader::new(file).lines().skip(1) {
            let line = line?;
            let row_step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if row_step <= step {
                kept.push(line);
            }
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(OpenOptions::new().append(true).open(path)?)
}

fn best_logged_val(path: &Path) -> anyhow::Result<Option<f64>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(3).and_then(|v| v.parse::<f64>().ok()))
        .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v)))))
}

// ---------------------------------------------------------------------------
// eval

/// Reads a checkpoint and the run config it was trained with; an explicit
/// `--config` replaces the embedded one.
fn load_run(ov: &Overrides) -> anyhow::Result<(Checkpoint<f32>, RunConfig)> {
    let path = ov
        .checkpoint
        .clone()
        .or_else(|| ov.config.as_ref().and_then(|c| RunConfig::load(c).ok()).map(|c| c.output.checkpoint))
        .ok_or_else(|| anyhow!("no checkpoint given; pass --checkpoint PATH"))?;
    let ck = load_checkpoint::<f32>(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut cfg = match &ov.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse(&ck.meta).context("checkpoint metadata does not hold a run config; pass --config")?,
    };
    ov.apply_eval(&mut cfg.eval);
    if ck.params.config != cfg.model {
        bail!("invalid configuration: model: dimensions differ from the checkpoint's");
    }
    Ok((ck, cfg))
}

pub fn eval(ov: &Overrides, out: &mut dyn Write) -> Result<EvalReport, Failure> {
    let (ck, cfg) = load_run(ov)?;
    cfg.eval.validate()?;
    let splits = cfg.data.load(cfg.seed)?;
    let model = Model { params: ck.params, stats: ck.stats };
    let seed = ov.seed.unwrap_or(cfg.seed);
    let csv = ov.out.clone().or(cfg.output.eval_csv.clone());
    Ok(eval_with(&model, &splits.test, &cfg.eval, seed, csv.as_deref(), out)?)
}

/// Runs the protocol for any matcher, prints the summary and optionally
/// appends a CSV row.
pub fn eval_with<M: Matcher>(
    matcher: &M,
    test: &Dataset,
    settings: &EvalSettings,
    seed: u64,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> anyhow::Result<EvalReport> {
    let report = evaluate(matcher, test, settings, seed)?;
    writeln!(
        out,
        "{}-way {}-shot: {} ({} episodes, {} queries per class)",
        report.ways,
        report.shots,
        report.summary(),
        report.episodes,
        report.queries_per_class
    )?;
    info!("evaluation took {:.1}s", report.wall_time.as_secs_f64());
    if let Some(path) = csv {
        let fresh = !path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        if fresh {
            writeln!(f, "{EVAL_HEADER}")?;
        }
        writeln!(
            f,
            "{},{},{},{},{},{}",
            report.ways, report.shots, report.episodes, report.queries_per_class, report.mean_accuracy, report.ci95
        )?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// verify

pub fn verify(seed: Option<u64>, fault: Option<Fault>, out: &mut dyn Write) -> Result<VerifyReport, Failure> {
    let opts = VerifyOptions { root_seed: seed.unwrap_or(0), fault, ..Default::default() };
    let report = run_battery(&opts);
    for s in &report.suites {
        let status = if s.passed() { "ok" } else { "FAILED" };
        writeln!(
            out,
            "{:<12} {status:<6} {} cases (minimum {}), {} failures, {:.1}s",
            s.name,
            s.cases,
            s.minimum,
            s.failures.len(),
            s.elapsed.as_secs_f64()
        )
        .map_err(anyhow::Error::from)?;
        for f in &s.failures {
            writeln!(out, "  {} seed {}: {}", f.case, f.seed, f.detail).map_err(anyhow::Error::from)?;
        }
    }
    writeln!(out, "total {} cases", report.total_cases()).map_err(anyhow::Error::from)?;
    if report.passed() {
        Ok(report)
    } else {
        let failed: Vec<String> =
            report.suites.iter().flat_map(|s| &s.failures).map(|f| format!("{} (seed {})", f.case, f.seed)).collect();
        let mut shown = failed.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
        if failed.len() > 5 {
            shown.push_str(&format!(" and {} more", failed.len() - 5));
        }
        Err(Failure::verification(anyhow!("verification failed: {shown}")))
    }
}

// ---------------------------------------------------------------------------
// export

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportMode {
    /// Support × query dot-product matrix of one episode.
    Similarity,
    /// Query embeddings with their labels.
    Embeddings,
}

pub fn export(ov: &Overrides, mode: ExportMode, out: &mut dyn Write) -> Result<PathBuf, Failure> {
    let (ck, cfg) = load_run(ov)?;
    let splits = cfg.data.load(cfg.seed)?;
    let seed = ov.seed.unwrap_or(cfg.seed);
    // similarity defaults to a square 5-way 5-shot layout, embeddings to the
    // evaluation episode shape
    let (default_shots, default_queries) = match mode {
        ExportMode::Similarity => (5, 5),
        ExportMode::Embeddings => (1, 15),
    };
    let ways = ov.ways.unwrap_or(5);
    let shots = ov.shots.unwrap_or(default_shots);
    let queries = ov.queries.unwrap_or(default_queries);
    let episode = sample_episode(&splits.test, ways, shots, queries, &mut substream(seed, "export", 0))?;
    let mut tape = Tape::<f32>::new();
    let (vars, _) = ck.params.bind(&mut tape);
    let graph = episode_graph(&mut tape, &ck.params.config, &vars, &episode, &mut StatsAccess::Eval(&ck.stats.layers))?;

    let mut text = String::new();
    let (q, n) = (episode.query.len(), episode.support.len());
    match mode {
        ExportMode::Similarity => {
            let logits = tape.data(graph.logits);
            for s in 0..n {
                let row: Vec<String> = (0..q).map(|j| logits[j * n + s].to_string()).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
        }
        ExportMode::Embeddings => {
            let f = tape.data(graph.query);
            let d = f.len() / q;
            for (j, item) in episode.query.iter().enumerate() {
                let mut row = vec![item.label.to_string()];
                row.extend(f[j * d..(j + 1) * d].iter().map(|v| v.to_string()));
                text.push_str(&row.join(","));
                text.push('\n');
            }
        }
    }
    let path = ov.out.clone().unwrap_or_else(|| match mode {
        ExportMode::Similarity => "similarity.csv".into(),
        ExportMode::Embeddings => "embeddings.csv".into(),
    });
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    writeln!(out, "wrote {}", path.display()).map_err(anyhow::Error::from)?;
    Ok(path)
}
