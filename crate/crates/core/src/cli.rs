//! Command-line surface. Each `cmd_*` function is usable on its own and
//! writes its artifacts (atomically) under the run's output directory.
//!
//! Exit codes: 0 success, 1 other failure (including a failed gradient
//! check), 2 configuration error, 3 data or checkpoint error, 4 numerical
//! divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backprop::{self, GradCheckReport};
use crate::checkpoint;
use crate::config::{self, DataSource, RunConfig};
use crate::data::{self, LabeledDataset, Tier};
use crate::error::{Error, Result};
use crate::inference::{self, SpecializationReport};
use crate::loss::{LossMode, ScoreMatrix};
use crate::network::Model;
use crate::rng::RngState;
use crate::trainer::{self, EpochMetrics, TrainState};

#[derive(Debug, Parser)]
#[command(name = "cldl", version, about = "Train and evaluate multi-head collaboratively supervised classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-identical runs.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.csv, timing.csv and the checkpoint.
    Train(Common),
    /// Score a split with a trained checkpoint; writes scores.csv and predictions.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the configured checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: EvalSplit,
        /// Number of ranked labels written per sample.
        #[arg(long, default_value_t = 1)]
        top_k: usize,
    },
    /// Compare analytic and finite-difference gradients on the initial model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// Training samples (from the start of the set) in the checked batch.
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train every loss mode on the same data and seeds; writes comparison.csv.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to the configured compare_seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Per-head win statistics of a trained checkpoint; writes specialization.csv.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: EvalSplit,
    },
    /// Export the configured synthetic data as IDX files.
    Synth(Common),
    /// Print the run-configuration JSON schema.
    Schema,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Build { .. } | Error::Placement(_) => 2,
        Error::Format { .. } | Error::Consistency(_) | Error::Dimension(_) | Error::Checkpoint(_) | Error::Io { .. } => 3,
        Error::Diverged { .. } | Error::NonFinite { .. } => 4,
    }
}

/// Loads the config and applies command-line overrides.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.trainer.threads = t;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Consistency(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Consistency(format!("csv: {e}")))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    data::write_atomic(path, &csv_bytes(header, rows)?)
}

fn per_head(prefix: &str, m: usize) -> impl Iterator<Item = String> + '_ {
    (1..=m).map(move |h| format!("{prefix}_h{h}"))
}

pub fn metrics_header(heads: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "total_loss".to_string()];
    h.extend(per_head("loss", heads));
    h.extend(per_head("acc_train", heads));
    h.extend(per_head("acc_val", heads));
    h.push("acc_val_combined".into());
    h.extend(per_head("meanT", heads));
    h.push("seconds".into());
    h
}

/// In bit-exact mode the seconds field is left empty so the file is
/// reproducible; wall-clock times then live in timing.csv only.
pub fn metrics_row(m: &EpochMetrics, with_seconds: bool) -> Vec<String> {
    let f = |v: &f64| v.to_string();
    let mut r = vec![m.epoch.to_string(), f(&m.total_loss)];
    r.extend(m.head_loss.iter().map(f));
    r.extend(m.train_accuracy.iter().map(f));
    r.extend(m.val_accuracy.iter().map(f));
    r.push(f(&m.val_combined_accuracy));
    r.extend(m.mean_modulation.iter().map(f));
    r.push(if with_seconds { f(&m.seconds) } else { String::new() });
    r
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
}

fn train_into(cfg: &RunConfig, out_dir: &Path, write_checkpoint: bool) -> Result<TrainOutcome> {
    let mut model = cfg.build_model()?;
    let (train, val) = cfg.load_data()?;
    let loss = cfg.loss.clone();
    let tc = cfg.train_config();
    let exact = tc.threads == 1;
    let heads = model.head_count();
    let metrics_path = out_dir.join("metrics.csv");
    let timing_path = out_dir.join("timing.csv");
    let ckpt_path = out_dir.join(&cfg.checkpoint);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    data::write_atomic(&out_dir.join("run-config.json"), cfg.to_json().as_bytes())?;

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    write_csv(&metrics_path, &metrics_header(heads), &rows)?;
    let mut state = TrainState::fresh(&model);
    let metrics = trainer::train(&mut model, &train, &val, &loss, &tc, &mut state, |m, model, st| {
        rows.push(metrics_row(m, !exact));
        timing.push(vec![m.epoch.to_string(), m.seconds.to_string()]);
        write_csv(&metrics_path, &metrics_header(heads), &rows)?;
        write_csv(&timing_path, &["epoch".into(), "seconds".into()], &timing)?;
        if write_checkpoint {
            checkpoint::save(&ckpt_path, model, cfg.seed, Some(st))?;
        }
        Ok(())
    })?;
    if write_checkpoint {
        checkpoint::save(&ckpt_path, &model, cfg.seed, Some(&state))?;
    }
    Ok(TrainOutcome { model, metrics })
}

/// Trains as configured and writes metrics.csv, timing.csv, run-config.json
/// and the checkpoint to the output directory. Rows are written after every
/// epoch, so a diverged run keeps the metrics it produced.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_into(cfg, &cfg.output_dir, true)
}

fn load_trained(cfg: &RunConfig, ckpt: Option<&Path>) -> Result<Model> {
    let mut model = cfg.build_model()?;
    let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path());
    checkpoint::load(&path, &mut model)?;
    Ok(model)
}

fn pick_split(cfg: &RunConfig, split: EvalSplit) -> Result<LabeledDataset> {
    let (train, val) = cfg.load_data()?;
    Ok(match split {
        EvalSplit::Train => train,
        EvalSplit::Val => val,
    })
}

pub fn scores_header(heads: usize, classes: usize) -> Vec<String> {
    let mut h = vec!["sample".to_string(), "label".to_string(), "tier".to_string()];
    for m in 1..=heads {
        for k in 1..=classes {
            h.push(format!("p_h{m}_c{k}"));
        }
    }
    h
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub scores: Vec<ScoreMatrix>,
    pub head_accuracy: Vec<f64>,
    pub combined_accuracy: f64,
}

/// Writes scores.csv (raw `M × K` scores per sample, row-major by head) and
/// predictions.csv (combined prediction, ranked labels, winning head and
/// head-assignment posterior).
pub fn cmd_eval(cfg: &RunConfig, ckpt: Option<&Path>, split: EvalSplit, top_k: usize) -> Result<EvalOutcome> {
    let model = load_trained(cfg, ckpt)?;
    let ds = pick_split(cfg, split)?;
    let scores = model.predict_scores(ds.samples(), 256)?;
    let (m, k) = (model.head_count(), model.classes());
    let tier = |i: usize| ds.tiers().map(|t| t[i].name().to_string()).unwrap_or_default();

    let mut score_rows = Vec::with_capacity(ds.len());
    let mut pred_rows = Vec::with_capacity(ds.len());
    for (i, s) in scores.iter().enumerate() {
        let mut row = vec![i.to_string(), ds.labels()[i].to_string(), tier(i)];
        row.extend(s.as_flat().iter().map(|v| v.to_string()));
        score_rows.push(row);

        let rec = inference::infer(s, &cfg.loss);
        let ranked = inference::top_k(s, &cfg.loss, top_k)?;
        let mut row = vec![
            i.to_string(),
            ds.labels()[i].to_string(),
            rec.label.to_string(),
            ranked.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "),
            (rec.winning_head + 1).to_string(),
        ];
        row.extend(rec.posterior.iter().map(|v| v.to_string()));
        pred_rows.push(row);
    }
    write_csv(&cfg.output_dir.join("scores.csv"), &scores_header(m, k), &score_rows)?;
    let mut ph: Vec<String> = ["sample", "label", "predicted", "top_k", "winning_head"].map(String::from).to_vec();
    ph.extend(per_head("posterior", m));
    write_csv(&cfg.output_dir.join("predictions.csv"), &ph, &pred_rows)?;

    let r = inference::report_from_scores(&scores, ds.labels(), ds.tiers(), &cfg.loss)?;
    Ok(EvalOutcome {
        scores,
        head_accuracy: r.head_accuracy,
        combined_accuracy: r.combined_accuracy,
    })
}

/// Finite-difference check of the initial model on the first `batch`
/// training samples; writes gradcheck.csv.
pub fn cmd_gradcheck(cfg: &RunConfig, trials: usize, delta: f64, batch: usize) -> Result<GradCheckReport> {
    let mut model = cfg.build_model()?;
    let (train, _) = cfg.load_data()?;
    let idx: Vec<usize> = (0..batch.min(train.len())).collect();
    let (x, y) = train.batch(&idx);
    let mut rng = RngState::new(cfg.seed).fork(7);
    let report = backprop::finite_diff_check(&mut model, &x, &y, &cfg.loss, delta, trials, &mut rng)?;
    let header: Vec<String> = ["tensor", "index", "analytic", "numeric", "rel_err", "raw_numeric", "raw_rel_err"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = report
        .coordinates
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                c.index.to_string(),
                c.analytic.to_string(),
                c.numeric.to_string(),
                c.rel_err.to_string(),
                c.raw_numeric.to_string(),
                c.raw_rel_err.to_string(),
            ]
        })
        .collect();
    write_csv(&cfg.output_dir.join("gradcheck.csv"), &header, &rows)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub mode: LossMode,
    pub seed: u64,
    /// Final validation accuracy per head slot `1..=M`; `None` where the mode
    /// has no head in that slot.
    pub head_accuracy: Vec<Option<f64>>,
    pub combined_accuracy: f64,
    pub final_loss: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains all four modes for every seed (same data, architecture and
/// optimizer) and writes comparison.csv: one row per (mode, seed), followed
/// by one `mean` row per mode. Each run's metrics go to
/// `compare/<mode>-seed<seed>/metrics.csv`.
pub fn cmd_compare(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<CompareRow>> {
    let seeds: Vec<u64> = if !seeds.is_empty() {
        seeds.to_vec()
    } else if !cfg.compare_seeds.is_empty() {
        cfg.compare_seeds.clone()
    } else {
        vec![cfg.seed]
    };
    let m = cfg.head_count();
    let mut rows = Vec::new();
    for &seed in &seeds {
        for mode in LossMode::ALL {
            let mut run = cfg.for_mode(mode);
            run.seed = seed;
            let dir = cfg.output_dir.join("compare").join(format!("{}-seed{seed}", mode.name()));
            let out = train_into(&run, &dir, false)?;
            let last = out.metrics.last();
            let mut head_accuracy = vec![None; m];
            let combined_accuracy;
            if let Some(last) = last {
                if mode == LossMode::Single {
                    head_accuracy[m - 1] = Some(last.val_accuracy[0]);
                } else {
                    for (slot, &a) in head_accuracy.iter_mut().zip(&last.val_accuracy) {
                        *slot = Some(a);
                    }
                }
                combined_accuracy = last.val_combined_accuracy;
            } else {
                let (_, val) = run.load_data()?;
                combined_accuracy = trainer::evaluate(&out.model, &val, &run.loss)?.1;
            }
            rows.push(CompareRow {
                mode,
                seed,
                head_accuracy,
                combined_accuracy,
                final_loss: last.map_or(f64::NAN, |l| l.total_loss),
            });
        }
    }

    let mut header = vec!["mode".to_string(), "seed".to_string()];
    header.extend(per_head("acc_val", m));
    header.push("acc_val_combined".into());
    header.push("final_loss".into());
    let mut out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.mode.name().to_string(), r.seed.to_string()];
            v.extend(r.head_accuracy.iter().map(|a| opt(*a)));
            v.push(r.combined_accuracy.to_string());
            v.push(r.final_loss.to_string());
            v
        })
        .collect();
    for mode in LossMode::ALL {
        let mine: Vec<&CompareRow> = rows.iter().filter(|r| r.mode == mode).collect();
        let n = mine.len() as f64;
        let mut v = vec![mode.name().to_string(), "mean".to_string()];
        for h in 0..m {
            let vals: Vec<f64> = mine.iter().filter_map(|r| r.head_accuracy[h]).collect();
            v.push(opt((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)));
        }
        v.push((mine.iter().map(|r| r.combined_accuracy).sum::<f64>() / n).to_string());
        v.push((mine.iter().map(|r| r.final_loss).sum::<f64>() / n).to_string());
        out.push(v);
    }
    write_csv(&cfg.output_dir.join("comparison.csv"), &header, &out)?;
    Ok(rows)
}

/// Specialization report on a split; writes specialization.csv with one row
/// per class and one per tier (`group,name,wins_h1..wins_hM`).
pub fn cmd_inspect(cfg: &RunConfig, ckpt: Option<&Path>, split: EvalSplit) -> Result<SpecializationReport> {
    let model = load_trained(cfg, ckpt)?;
    let ds = pick_split(cfg, split)?;
    let report = inference::specialization_report(&model, &ds, &cfg.loss)?;
    let m = report.heads;
    let mut header = vec!["group".to_string(), "name".to_string()];
    header.extend(per_head("wins", m));
    let mut rows = Vec::new();
    for (k, counts) in report.class_histogram.iter().enumerate() {
        let mut r = vec!["class".to_string(), (k + 1).to_string()];
        r.extend(counts.iter().map(|c| c.to_string()));
        rows.push(r);
    }
    for (tier, counts) in &report.tier_histogram {
        let mut r = vec!["tier".to_string(), tier.name().to_string()];
        r.extend(counts.iter().map(|c| c.to_string()));
        rows.push(r);
    }
    write_csv(&cfg.output_dir.join("specialization.csv"), &header, &rows)?;
    Ok(report)
}

/// Writes `{train,val}-{images,labels}.idx` (images as real-valued IDX) and
/// `{train,val}-tiers.csv`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    if !matches!(cfg.data, DataSource::Synthetic { .. }) {
        return Err(Error::Config("at `data`: synth needs a synthetic data source".into()));
    }
    let (train, val) = cfg.load_data()?;
    for (name, ds) in [("train", &train), ("val", &val)] {
        data::write_idx_f64(&cfg.output_dir.join(format!("{name}-images.idx")), ds.samples())?;
        data::write_idx_labels(&cfg.output_dir.join(format!("{name}-labels.idx")), ds.labels())?;
        let rows: Vec<Vec<String>> = ds
            .tiers()
            .unwrap_or_default()
            .iter()
            .enumerate()
            .map(|(i, t)| vec![i.to_string(), t.name().to_string()])
            .collect();
        write_csv(&cfg.output_dir.join(format!("{name}-tiers.csv")), &["sample".into(), "tier".into()], &rows)?;
    }
    Ok(())
}

fn print_report(r: &SpecializationReport) {
    let m = r.heads;
    for (tier, counts) in &r.tier_histogram {
        let total: usize = counts.iter().sum();
        println!("tier {} ({total} samples)", tier.name());
        for h in 0..m {
            let t = r.win_rate_test(*tier, &[h], 1.0 / m as f64).expect("tier present");
            let acc = r.tier_accuracy.iter().find(|(x, _)| x == tier).map_or(f64::NAN, |(_, a)| a[h]);
            println!(
                "  head {}: wins {} ({:.3}), p = {:.3e} vs 1/{m}; accuracy {acc:.4}",
                h + 1,
                t.wins,
                t.rate,
                t.p_value
            );
        }
    }
    for (h, a) in r.head_accuracy.iter().enumerate() {
        println!("head {} accuracy {a:.4}", h + 1);
    }
    println!("combined accuracy {:.4}", r.combined_accuracy);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            let out = cmd_train(&cfg)?;
            if let Some(last) = out.metrics.last() {
                println!(
                    "epoch {}: loss {:.5}, combined val accuracy {:.4}",
                    last.epoch, last.total_loss, last.val_combined_accuracy
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Eval { common, checkpoint, split, top_k } => {
            let cfg = resolve(&common)?;
            let out = cmd_eval(&cfg, checkpoint.as_deref(), split, top_k)?;
            for (h, a) in out.head_accuracy.iter().enumerate() {
                println!("head {} accuracy {a:.4}", h + 1);
            }
            println!("combined accuracy {:.4}", out.combined_accuracy);
        }
        Command::Gradcheck { common, trials, delta, batch, tolerance } => {
            let cfg = resolve(&common)?;
            let r = cmd_gradcheck(&cfg, trials, delta, batch)?;
            println!("max relative error {:.3e} (tolerance {tolerance:.1e})", r.max_rel_err);
            println!("against the un-detached objective: {:.3e}", r.raw_max_rel_err);
            if r.max_rel_err >= tolerance {
                eprintln!("gradient check failed");
                return Ok(1);
            }
        }
        Command::Compare { common, seeds } => {
            let cfg = resolve(&common)?;
            let rows = cmd_compare(&cfg, &seeds)?;
            for mode in LossMode::ALL {
                let accs: Vec<f64> = rows.iter().filter(|r| r.mode == mode).map(|r| r.combined_accuracy).collect();
                println!("{:<10} mean combined accuracy {:.4}", mode.name(), accs.iter().sum::<f64>() / accs.len() as f64);
            }
        }
        Command::Inspect { common, checkpoint, split } => {
            let cfg = resolve(&common)?;
            let r = cmd_inspect(&cfg, checkpoint.as_deref(), split)?;
            print_report(&r);
        }
        Command::Synth(c) => {
            let cfg = resolve(&c)?;
            cmd_synth(&cfg)?;
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&config::schema()).expect("schema"));
        }
    }
    Ok(0)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Recomputes per-tier win counts from a scores.csv dump.
pub fn tier_wins_from_scores_csv(path: &Path, heads: usize, classes: usize) -> Result<Vec<(Tier, Vec<usize>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out: Vec<(Tier, Vec<usize>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
        let bad = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.into() };
        let label: usize = rec[1].parse().map_err(|_| bad("label"))?;
        let tier = match &rec[2] {
            "linear" => Tier::Linear,
            "radial" => Tier::Radial,
            "xor-like" => Tier::XorLike,
            _ => continue,
        };
        let p = |m: usize| -> Result<f64> { rec[3 + m * classes + label - 1].parse().map_err(|_| bad("score")) };
        let mut best = (0, p(0)?);
        for m in 1..heads {
            let v = p(m)?;
            if v > best.1 {
                best = (m, v);
            }
        }
        match out.iter_mut().find(|(t, _)| *t == tier) {
            Some((_, c)) => c[best.0] += 1,
            None => {
                let mut c = vec![0; heads];
                c[best.0] += 1;
                out.push((tier, c));
            }
        }
    }
    Ok(out)
}
