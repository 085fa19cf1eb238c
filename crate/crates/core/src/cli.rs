//! Command-line front end. `run` takes argv and returns the process exit
//! code: 0 on success, 1 on runtime failure, 2 on usage or config errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint;
use crate::diagnostics::route_stats;
use crate::error::{Error, Result};
use crate::eval::{evaluate_predictions, MetricsReport};
use crate::moa::{run_batch, AgentsConfig, MoaRecord, PromptItem, RunStatus};
use crate::model::{Model, ModelConfig, TokenBatch};
use crate::numerics::SeededRng;
use crate::sft::{build_dataset, read_corpus_jsonl, read_jsonl, synth_corpus, write_jsonl, SftExample, SplitConfig};
use crate::train::{fit, mean_losses, TrainConfig};

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL corpus of `{"text", "label"}` lines. Without one, a synthetic
    /// corpus is generated.
    pub corpus: Option<PathBuf>,
    /// Default leaves 60 held-out examples, enough for the default test_count.
    pub synth_count: usize,
    pub synth_seed: u64,
    /// Directory holding `train.jsonl`, `validation.jsonl`, `test.jsonl`.
    pub dir: Option<PathBuf>,
    pub split: SplitConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: None,
            synth_count: 600,
            synth_seed: 42,
            dir: None,
            split: SplitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub agents: Option<AgentsConfig>,
}

impl CliConfig {
    /// Reads a config file. `model.moe.model_dim` and
    /// `model.moe.expert_hidden` default to `model.model_dim` and four
    /// times it when left out.
    pub fn load(path: Option<&Path>) -> Result<CliConfig> {
        let mut v: Value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if let Some(model) = v.get_mut("model").and_then(Value::as_object_mut) {
            let d = model
                .get("model_dim")
                .and_then(Value::as_u64)
                .unwrap_or(ModelConfig::default().model_dim as u64);
            if let Some(moe) = model
                .entry("moe")
                .or_insert_with(|| Value::Object(Default::default()))
                .as_object_mut()
            {
                moe.entry("model_dim").or_insert(d.into());
                moe.entry("expert_hidden").or_insert((4 * d).into());
            }
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// One seed for weight init, splitting and shuffling.
    pub fn apply_seed(&mut self, seed: u64) {
        self.model.init_seed = seed;
        self.data.split.seed = seed;
        self.train.shuffle_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.alpha != self.model.moe.alpha {
            return Err(Error::Config(format!(
                "train.alpha ({}) disagrees with model.moe.alpha ({})",
                self.train.alpha, self.model.moe.alpha
            )));
        }
        if let Some(a) = &self.agents {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "momoe", version, about = "MoE sentiment fine-tuning and mixture-of-agents toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, splits and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a corpus into train/validation/test splits.
    BuildDataset {
        /// JSONL corpus with `text` and `label` fields.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Size of the synthetic corpus used when no corpus is given.
        #[arg(long)]
        synth: Option<usize>,
        /// Examples moved from the held-out part into test.jsonl.
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Fine-tune the MoE layer; writes the loss log and checkpoints.
    Train {
        /// Directory produced by build-dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Balance-loss coefficient; sets both model.moe.alpha and train.alpha.
        #[arg(long)]
        alpha: Option<f64>,
        /// Also save checkpoints/step_NNNNNN.ckpt every N steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Score a checkpoint on a split file, or score MoA records.
    Eval {
        #[arg(long, requires = "dataset", conflicts_with = "moa_records")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// moa_records.jsonl from moa-run.
        #[arg(long)]
        moa_records: Option<PathBuf>,
    },
    /// Run the agent pipeline over a prompts file.
    MoaRun {
        /// JSONL with a `prompt` field and optional `label` per line.
        #[arg(long)]
        prompts: PathBuf,
        /// Agents JSON; overrides the config's `agents` section.
        #[arg(long)]
        agents: Option<PathBuf>,
        /// Prompts processed concurrently.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Expert utilization of a checkpoint over a split file.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Finite-difference check of the MoE gradients.
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        len: usize,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
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

fn require_file(field: &str, p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: {} does not exist", p.display())))
    }
}

fn need_out(out: Option<PathBuf>, cmd: &str) -> Result<PathBuf> {
    let out = out.ok_or_else(|| Error::Config(format!("{cmd} needs --out DIR")))?;
    fs::create_dir_all(&out)?;
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    match cli.command {
        Command::BuildDataset {
            corpus,
            synth,
            test_count,
        } => {
            if corpus.is_some() {
                cfg.data.corpus = corpus;
            }
            if let Some(n) = synth {
                cfg.data.synth_count = n;
            }
            if let Some(n) = test_count {
                cfg.data.split.test_count = n;
            }
            if let Some(p) = &cfg.data.corpus {
                require_file("data.corpus", p)?;
            }
            cfg.validate()?;
            let out = need_out(cli.out, "build-dataset")?;
            build_dataset_cmd(&cfg, &out)
        }
        Command::Train {
            data,
            steps,
            epochs,
            lr,
            batch_size,
            alpha,
            checkpoint_every,
        } => {
            if data.is_some() {
                cfg.data.dir = data;
            }
            if steps.is_some() {
                cfg.train.max_steps = steps;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = lr {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(a) = alpha {
                cfg.train.alpha = a;
                cfg.model.moe.alpha = a;
            }
            if checkpoint_every == Some(0) {
                return Err(Error::Config("--checkpoint-every must be >= 1".into()));
            }
            let dir = cfg
                .data
                .dir
                .clone()
                .ok_or_else(|| Error::Config("data.dir (or --data) is required for train".into()))?;
            require_file("data.dir", &dir.join("train.jsonl"))?;
            cfg.validate()?;
            let out = need_out(cli.out, "train")?;
            train_cmd(&cfg, &dir, &out, checkpoint_every)
        }
        Command::Eval {
            checkpoint,
            dataset,
            moa_records,
        } => {
            cfg.validate()?;
            let report = match (checkpoint, dataset, moa_records) {
                (Some(ck), Some(ds), None) => {
                    require_file("--checkpoint", &ck)?;
                    require_file("--dataset", &ds)?;
                    eval_checkpoint(&ck, &ds, cli.out.as_deref())?
                }
                (None, None, Some(recs)) => {
                    require_file("--moa-records", &recs)?;
                    eval_moa_records(&recs)?
                }
                _ => {
                    return Err(Error::Config(
                        "eval needs either --checkpoint with --dataset, or --moa-records".into(),
                    ))
                }
            };
            print!("{report}");
            if let Some(out) = cli.out {
                fs::create_dir_all(&out)?;
                write_json(&out.join("metrics.json"), &report)?;
                fs::write(out.join("metrics.txt"), report.to_string())?;
                write_json(&out.join("config.json"), &cfg)?;
            }
            Ok(0)
        }
        Command::MoaRun {
            prompts,
            agents,
            parallelism,
        } => {
            require_file("--prompts", &prompts)?;
            if let Some(p) = agents {
                require_file("--agents", &p)?;
                let text = fs::read_to_string(&p)?;
                cfg.agents = Some(
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                );
            }
            let agents = cfg
                .agents
                .as_mut()
                .ok_or_else(|| Error::Config("agents section (or --agents) is required for moa-run".into()))?;
            if let Some(n) = parallelism {
                agents.parallelism = n;
            }
            cfg.validate()?;
            let out = need_out(cli.out, "moa-run")?;
            moa_run_cmd(&cfg, &prompts, &out)
        }
        Command::RouteStats { checkpoint, dataset } => {
            require_file("--checkpoint", &checkpoint)?;
            require_file("--dataset", &dataset)?;
            let model = checkpoint::load(&checkpoint)?;
            let examples: Vec<SftExample> = read_jsonl(&dataset)?;
            let stats = route_stats(&model, &examples, cfg.train.batch_size)?;
            print!("{stats}");
            if let Some(out) = cli.out {
                fs::create_dir_all(&out)?;
                write_json(&out.join("route_stats.json"), &stats)?;
            }
            Ok(0)
        }
        Command::Gradcheck { eps, batch, len } => {
            let model_cfg = if cli.config.is_some() {
                cfg.model.clone()
            } else {
                gradcheck_config(cli.seed.unwrap_or(0))
            };
            cfg.model = model_cfg;
            cfg.validate()?;
            if batch == 0 || len < 2 || len > cfg.model.max_seq_len {
                return Err(Error::Config(format!(
                    "gradcheck needs --batch >= 1 and 2 <= --len <= model.max_seq_len ({})",
                    cfg.model.max_seq_len
                )));
            }
            if eps.is_nan() || eps <= 0.0 {
                return Err(Error::Config("--eps must be positive".into()));
            }
            let model = Model::build(cfg.model.clone())?;
            let batch = random_batch(&cfg.model, batch, len, cfg.model.init_seed)?;
            let report = model.gradient_check(&batch, cfg.train.alpha, eps)?;
            let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
            println!(
                "max relative error {:.3e} at {}[{}] over {} parameters: {}",
                report.max_rel_error,
                report.worst_tensor,
                report.worst_index,
                report.checked,
                if pass { "ok" } else { "FAILED" }
            );
            if let Some(out) = cli.out {
                fs::create_dir_all(&out)?;
                write_json(&out.join("gradcheck.json"), &report)?;
                write_json(&out.join("config.json"), &cfg)?;
            }
            Ok(if pass { 0 } else { 1 })
        }
    }
}

/// d=8, 2 heads, 2 layers, 4 experts, top-2, expert width 16, length 16.
pub fn gradcheck_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::small(8, 2, 2, 16);
    cfg.moe.expert_hidden = 16;
    cfg.init_seed = seed;
    cfg
}

/// Uniform random token ids with every position scored.
pub fn random_batch(cfg: &ModelConfig, batch: usize, len: usize, seed: u64) -> Result<TokenBatch> {
    let mut rng = SeededRng::new(seed ^ 0x5eed_ba7c);
    let ids = (0..batch)
        .map(|_| (0..len).map(|_| rng.below(cfg.vocab_size) as u32).collect())
        .collect();
    TokenBatch::new(ids, vec![vec![true; len]; batch])
}

fn build_dataset_cmd(cfg: &CliConfig, out: &Path) -> Result<i32> {
    let corpus = match &cfg.data.corpus {
        Some(p) => read_corpus_jsonl(p)?,
        None => synth_corpus(cfg.data.synth_count, cfg.data.synth_seed),
    };
    let splits = build_dataset(&corpus, &cfg.data.split)?;
    write_jsonl(&out.join("train.jsonl"), &splits.train)?;
    write_jsonl(&out.join("validation.jsonl"), &splits.validation)?;
    write_jsonl(&out.join("test.jsonl"), &splits.test)?;
    write_json(&out.join("config.json"), cfg)?;
    println!(
        "{} corpus items -> train {}, validation {}, test {} (split seed {})",
        corpus.len(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        splits.split_seed
    );
    Ok(0)
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    init_seed: u64,
    shuffle_seed: u64,
    first: Option<crate::train::StepLog>,
    last: Option<crate::train::StepLog>,
    validation: Option<crate::model::LossRecord>,
}

fn train_cmd(cfg: &CliConfig, dir: &Path, out: &Path, checkpoint_every: Option<usize>) -> Result<i32> {
    let train: Vec<SftExample> = read_jsonl(&dir.join("train.jsonl"))?;
    write_json(&out.join("config.json"), cfg)?;
    let mut model = Model::build(cfg.model.clone())?;
    let mut log = std::io::BufWriter::new(fs::File::create(out.join("loss_log.jsonl"))?);
    let ck_dir = out.join("checkpoints");
    if checkpoint_every.is_some() {
        fs::create_dir_all(&ck_dir)?;
    }
    let mut side_error: Option<Error> = None;
    let result = fit(&mut model, &train, &cfg.train, |s, m| {
        let line = serde_json::to_string(s).expect("step log serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            side_error.get_or_insert(e.into());
        }
        if checkpoint_every.is_some_and(|n| (s.step + 1) % n == 0) {
            if let Err(e) = checkpoint::save(m, &ck_dir.join(format!("step_{:06}.ckpt", s.step + 1))) {
                side_error.get_or_insert(e);
            }
        }
    });
    drop(log);
    let steps = result?;
    if let Some(e) = side_error {
        return Err(e);
    }
    checkpoint::save(&model, &out.join("model.ckpt"))?;

    let val_path = dir.join("validation.jsonl");
    let validation = if val_path.is_file() {
        let val: Vec<SftExample> = read_jsonl(&val_path)?;
        if val.is_empty() {
            None
        } else {
            Some(mean_losses(&model, &val, cfg.train.batch_size, cfg.train.alpha)?)
        }
    } else {
        None
    };
    let summary = TrainSummary {
        steps: steps.len(),
        init_seed: cfg.model.init_seed,
        shuffle_seed: cfg.train.shuffle_seed,
        first: steps.first().copied(),
        last: steps.last().copied(),
        validation,
    };
    write_json(&out.join("summary.json"), &summary)?;
    if let (Some(f), Some(l)) = (summary.first, summary.last) {
        println!(
            "{} steps: task loss {:.4} -> {:.4}, balance {:.4} -> {:.4}",
            summary.steps, f.task_loss, l.task_loss, f.balance_loss, l.balance_loss
        );
    }
    if let Some(v) = summary.validation {
        println!("validation task loss {:.4}", v.task_loss);
    }
    Ok(0)
}

#[derive(Serialize)]
struct Prediction {
    corpus_index: usize,
    gold: crate::sft::SentimentLabel,
    predicted: crate::sft::SentimentLabel,
    log_probs: [f64; 3],
}

fn eval_checkpoint(ck: &Path, dataset: &Path, out: Option<&Path>) -> Result<MetricsReport> {
    let model = checkpoint::load(ck)?;
    let examples: Vec<SftExample> = read_jsonl(dataset)?;
    let mut preds = Vec::with_capacity(examples.len());
    for e in &examples {
        let s = model.score_labels(&e.prompt)?;
        preds.push(Prediction {
            corpus_index: e.corpus_index,
            gold: e.label,
            predicted: s.label,
            log_probs: s.log_probs,
        });
    }
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_jsonl(&out.join("predictions.jsonl"), &preds)?;
    }
    let golds: Vec<_> = preds.iter().map(|p| p.gold).collect();
    let predicted: Vec<_> = preds.iter().map(|p| Some(p.predicted)).collect();
    evaluate_predictions(&golds, &predicted)
}

fn eval_moa_records(path: &Path) -> Result<MetricsReport> {
    let records: Vec<MoaRecord> = read_jsonl(path)?;
    let mut golds = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        golds.push(r.gold_label.ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            detail: "record has no gold_label".into(),
        })?);
    }
    let preds: Vec<_> = records.iter().map(|r| r.final_label).collect();
    evaluate_predictions(&golds, &preds)
}

fn moa_run_cmd(cfg: &CliConfig, prompts: &Path, out: &Path) -> Result<i32> {
    let agents = cfg.agents.as_ref().expect("checked by caller");
    let items: Vec<PromptItem> = read_jsonl(prompts)?;
    let (proposers, aggregator) = agents.bind()?;
    write_json(&out.join("config.json"), cfg)?;
    let records = run_batch(&items, &proposers, &aggregator, agents.parallelism)?;
    write_jsonl(&out.join("moa_records.jsonl"), &records)?;
    let failed = records.iter().filter(|r| r.status == RunStatus::Error).count();
    let unparsed = records
        .iter()
        .filter(|r| r.status == RunStatus::Ok && r.final_label.is_none())
        .count();
    let disagreements = records.iter().filter(|r| r.flags.disagreement).count();
    println!(
        "{} prompts: {} failed, {} unparsed, {} with proposer disagreement",
        records.len(),
        failed,
        unparsed,
        disagreements
    );
    if failed > 0 {
        for (i, r) in records.iter().enumerate().filter(|(_, r)| r.status == RunStatus::Error) {
            eprintln!("prompt {}: {}", i + 1, r.error.as_deref().unwrap_or("failed"));
        }
        return Ok(1);
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_fills_moe_width() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"model": {"model_dim": 8, "num_heads": 2}}"#).unwrap();
        let cfg = CliConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.model.moe.model_dim, 8);
        assert_eq!(cfg.model.moe.expert_hidden, 32);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_field_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"modle": {}}"#).unwrap();
        assert!(matches!(CliConfig::load(Some(&p)), Err(Error::Config(_))));
    }

    #[test]
    fn alpha_mismatch_named() {
        let mut cfg = CliConfig::default();
        cfg.train.alpha = 0.5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("train.alpha"));
    }

    #[test]
    fn usage_and_exit_codes() {
        assert_eq!(run(["momoe"]), 2);
        assert_eq!(run(["momoe", "no-such-command"]), 2);
        assert_eq!(run(["momoe", "train"]), 2);
        assert_eq!(run(["momoe", "--help"]), 0);
    }
}
