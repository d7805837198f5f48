//! `mtop` command-line tool.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use mtop::config::RunConfig;
use mtop::data::{
    build_nhc, generate_synthetic, load_datasets, read_news_records, write_datasets, write_nhc,
    Vocabulary,
};
use mtop::eval::{bench, bench_table, evaluate};
use mtop::init::{PoolerInit, PromptInit};
use mtop::model::{ModelVariant, MtopModel, TaskSpec};
use mtop::pipeline::{binary_tasks, build_model, prepare, run_experiment, Seeds};
use mtop::trainer::{aggregate_runs_median, TaskData, TrainConfig};
use mtop::transplant::{pre_finetune_single_task, SingleTaskArtifact};
use mtop::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mtop",
    version,
    about = "Multi-task prompt tuning with one forward pass for all tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the seven-task headline classification benchmark from a news
    /// category JSON-lines file.
    BuildNhc {
        /// News records, one JSON object per line with `category` and `headline`.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for the task directories and manifest.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate the synthetic keyword-detection tasks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        tasks: usize,
        /// Examples per task, split 80/20 into train and eval.
        #[arg(long, default_value_t = 1000)]
        examples: usize,
        /// Task 1 reuses task 0's keyword with inverted labels.
        #[arg(long)]
        conflict: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-finetune one prompt, pooler and head per task against the frozen
    /// backbone of each run's seed; writes `<artifacts>/seed<S>/<task>.st`.
    PretrainSingle {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Multi-task training, one directory per run plus a median summary.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on evaluation splits through the all-task path.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary file written next to the training runs.
        #[arg(long)]
        vocab: PathBuf,
        /// Dataset directory; the checkpoint's task names select the tasks.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 128)]
        max_len: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Print JSON lines instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Time all-task prediction for several variants on random inputs.
    Bench {
        /// Encoder dimensions come from this file; other keys are ignored.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "mtop,per_task_prompt")]
        variants: Vec<ModelVariant>,
        #[arg(long = "tasks", default_value_t = 8)]
        num_tasks: usize,
        /// Input tokens per example.
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 4)]
        batches: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override any config key, e.g. `--set encoder.num_layers=4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// Run settings. Flags override the config file, which overrides the
/// built-in defaults.
#[derive(Args)]
struct RunArgs {
    /// Key-value config file; `mtop train --print-config` shows every key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; run r uses seed + r. [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// mtop, mtop_no_sg, shared_pooler or per_task_prompt. [default: mtop]
    #[arg(long)]
    variant: Option<ModelVariant>,
    /// Independent repetitions. Up to MTOP_THREADS run concurrently.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated task names. [default: every task in the manifest]
    #[arg(long)]
    tasks: Option<String>,
    /// [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate. [default: 1e-5]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Prompt init: rd, tk or st. [default: rd]
    #[arg(long)]
    prompt_init: Option<String>,
    /// Pooler init: rd or st. [default: rd]
    #[arg(long)]
    pooler_init: Option<String>,
    /// Single-task artifact directory: written by pretrain-single, read by
    /// train. Without it, st init trains the single-task weights inside
    /// each run.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    /// Output root. [default: out]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run name under the output root. [default: run]
    #[arg(long)]
    run_name: Option<String>,
    /// Override any config key, e.g. `--set encoder.num_layers=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let path = |p: &Path| p.display().to_string();
        let flags: [(&str, Option<String>); 12] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("model.variant", self.variant.map(|v| v.to_string())),
            ("data.dir", self.data.as_deref().map(path)),
            ("data.tasks", self.tasks.clone()),
            ("train.epochs", self.epochs.map(|v| v.to_string())),
            ("train.peak_lr", self.lr.map(|v| v.to_string())),
            ("train.batch_size", self.batch_size.map(|v| v.to_string())),
            ("init.prompt", self.prompt_init.clone()),
            ("init.pooler", self.pooler_init.clone()),
            ("init.artifacts", self.artifacts.as_deref().map(path)),
            ("output.dir", self.out.as_deref().map(path)),
            ("output.run_name", self.run_name.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        if self.runs == 0 {
            return Err(Error::Config("--runs must be at least 1".into()));
        }
        Ok(cfg)
    }
}

/// Everything a run needs that does not depend on its seed.
struct Prepared {
    config: RunConfig,
    tasks: Vec<TaskSpec>,
    vocab: Vocabulary,
    data: Vec<TaskData>,
}

fn prepare_run(cfg: RunConfig) -> Result<Prepared> {
    let dir = cfg
        .data_dir()
        .ok_or_else(|| Error::Config("no dataset directory (data.dir or --data)".into()))?;
    let (_, datasets) = load_datasets(&dir, &cfg.tasks())?;
    let (vocab, data) = prepare(
        &datasets,
        cfg.parse("vocab.max_size")?,
        cfg.parse("data.max_len")?,
    );
    Ok(Prepared {
        tasks: binary_tasks(&datasets),
        config: cfg,
        vocab,
        data,
    })
}

fn artifact_path(dir: &Path, seed: u64, task: &str) -> PathBuf {
    dir.join(format!("seed{seed}")).join(format!("{task}.st"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn cmd_pretrain_single(run: &RunArgs) -> Result<()> {
    let config = run.resolve()?;
    if run.print_config {
        print!("{}", config.resolved());
        return Ok(());
    }
    let p = prepare_run(config)?;
    let out = &p.config.artifacts_dir().ok_or_else(|| {
        Error::Config("pretrain-single needs --artifacts (init.artifacts)".into())
    })?;
    let exp = p.config.experiment()?;
    let base = p.config.seed();
    for r in 0..run.runs {
        let seed = base + r as u64;
        let model = build_model(&exp, &p.tasks, &p.vocab, seed)?;
        let train = TrainConfig {
            seed: Seeds::derive(seed).single_task,
            ..exp.train.clone()
        };
        create_dir(&out.join(format!("seed{seed}")))?;
        for (t, spec) in p.tasks.iter().enumerate() {
            let (artifact, outcome) = pre_finetune_single_task(&model, t, &p.data[t], &train)?;
            artifact.save(artifact_path(out, seed, &spec.name))?;
            println!(
                "seed {seed} {}: best epoch {} {} {:.4}",
                spec.name,
                outcome.best_epoch,
                spec.metric,
                outcome.best().average
            );
        }
    }
    Ok(())
}

fn load_artifacts(dir: &Path, seed: u64, tasks: &[TaskSpec]) -> Result<Vec<SingleTaskArtifact>> {
    tasks
        .iter()
        .map(|t| SingleTaskArtifact::load(artifact_path(dir, seed, &t.name)))
        .collect()
}

fn train_one(p: &Prepared, root: &Path, r: usize) -> Result<Vec<(String, f64)>> {
    let seed = p.config.seed() + r as u64;
    let dir = root.join(format!("run{r}"));
    create_dir(&dir)?;
    let mut resolved = p.config.clone();
    resolved.set("seed", &seed.to_string())?;
    write_file(&dir.join("config.resolved"), &resolved.resolved())?;

    let exp = p.config.experiment()?;
    let artifacts = match p.config.artifacts_dir() {
        Some(a)
            if (exp.prompt_init == PromptInit::SingleTask
                || exp.pooler_init == PoolerInit::SingleTask) =>
        {
            Some(load_artifacts(&a, seed, &p.tasks)?)
        }
        _ => None,
    };
    let log_path = dir.join("metrics.log");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?);
    let result = run_experiment(
        &exp,
        &p.tasks,
        &p.data,
        &p.vocab,
        seed,
        artifacts,
        Some(&mut log),
    )?;
    log.flush().map_err(|e| Error::Io {
        path: log_path,
        source: e,
    })?;
    result.model.save(dir.join("ckpt.best"))?;

    let report = evaluate(&result.model, &p.data, exp.train.eval_batch_size)?;
    let mut text = format!(
        "seed {seed}\nbest epoch {} of {} ({} steps)\n\n",
        result.outcome.best_epoch,
        result.outcome.history.len(),
        result.outcome.total_steps
    );
    text.push_str(&report.table());
    write_file(&dir.join("report.txt"), &text)?;
    Ok(report
        .tasks
        .into_iter()
        .map(|t| (t.task, t.value))
        .collect())
}

fn cmd_train(run: &RunArgs) -> Result<()> {
    let config = run.resolve()?;
    if run.print_config {
        print!("{}", config.resolved());
        return Ok(());
    }
    let p = prepare_run(config)?;
    let root = p.config.run_dir();
    create_dir(&root)?;
    write_file(&root.join("config.resolved"), &p.config.resolved())?;
    p.vocab.save(root.join("vocab.txt"))?;
    let runs = (0..run.runs)
        .into_par_iter()
        .map(|r| train_one(&p, &root, r))
        .collect::<Result<Vec<_>>>()?;
    let summary = aggregate_runs_median(&runs)?;
    let mut text = format!("median over {} runs\n", runs.len());
    for (name, v) in &summary.per_task {
        text.push_str(&format!("{name}\t{v:.4}\n"));
    }
    text.push_str(&format!("average\t{:.4}\n", summary.average));
    write_file(&root.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    vocab: &Path,
    data: &Path,
    max_len: usize,
    batch_size: usize,
    json: bool,
) -> Result<()> {
    let model = MtopModel::load(checkpoint)?;
    let vocab = Vocabulary::load(vocab)?;
    let names: Vec<String> = model.tasks().iter().map(|t| t.name.clone()).collect();
    let (_, datasets) = load_datasets(data, &names)?;
    let encoded = mtop::data::encode_datasets(&vocab, &datasets, max_len);
    let report = evaluate(&model, &encoded, batch_size)?;
    if json {
        let stdout = std::io::stdout();
        report.write_ndjson(&mut stdout.lock())?;
    } else {
        print!("{}", report.table());
        println!("wall clock: {:.3}s", report.wall_clock.as_secs_f64());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    config: Option<&Path>,
    overrides: &[String],
    variants: &[ModelVariant],
    num_tasks: usize,
    seq_len: usize,
    batch_size: usize,
    batches: usize,
    reps: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    let mut model_cfg = cfg.experiment()?.model;
    model_cfg.encoder.vocab_size = vocab_size;
    let seeds = Seeds::derive(seed);
    let tasks: Vec<TaskSpec> = (0..num_tasks)
        .map(|t| TaskSpec::binary(format!("task{t}")))
        .collect();
    let models = variants
        .iter()
        .map(|&v| {
            let c = mtop::model::ModelConfig {
                variant: v,
                ..model_cfg.clone()
            };
            MtopModel::with_tasks(c, seeds.backbone, &tasks, seeds.init)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.train);
    let inputs: Vec<Vec<Vec<usize>>> = (0..batches)
        .map(|_| {
            (0..batch_size)
                .map(|_| {
                    (0..seq_len)
                        .map(|_| rng.gen_range(3..vocab_size.max(4)))
                        .collect()
                })
                .collect()
        })
        .collect();
    let refs: Vec<&MtopModel> = models.iter().collect();
    print!("{}", bench_table(&bench(&refs, &inputs, reps)?));
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MTOP_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            Error::Config(format!(
                "MTOP_THREADS must be a positive integer, got '{v}'"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::BuildNhc { input, out, seed } => {
            let records = read_news_records(&input)?;
            let manifest = write_nhc(&out, &build_nhc(&records, seed)?)?;
            let total: usize = manifest.tasks.iter().map(|t| t.train + t.eval).sum();
            for t in &manifest.tasks {
                println!("{}\t{}\t{}/{}", t.name, t.category, t.train, t.eval);
            }
            println!("{} tasks, {total} examples", manifest.tasks.len());
            Ok(())
        }
        Command::Synth {
            out,
            tasks,
            examples,
            conflict,
            seed,
        } => {
            let sets = generate_synthetic(tasks, examples, conflict, seed)?;
            let names: Vec<String> = sets.iter().map(|d| d.name.clone()).collect();
            write_datasets(&out, &sets, &names, seed)?;
            println!("{} tasks, {} examples each", sets.len(), examples);
            Ok(())
        }
        Command::PretrainSingle { run } => cmd_pretrain_single(&run),
        Command::Train { run } => cmd_train(&run),
        Command::Eval {
            checkpoint,
            vocab,
            data,
            max_len,
            batch_size,
            json,
        } => cmd_eval(&checkpoint, &vocab, &data, max_len, batch_size, json),
        Command::Bench {
            config,
            variants,
            num_tasks,
            seq_len,
            batch_size,
            batches,
            reps,
            vocab_size,
            seed,
            overrides,
        } => cmd_bench(
            config.as_deref(),
            &overrides,
            &variants,
            num_tasks,
            seq_len,
            batch_size,
            batches,
            reps,
            vocab_size,
            seed,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mtop: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
