//! End-to-end runs: build a model for a seed, optionally pre-finetune and
//! transplant single-task weights, train, and report.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{encode_datasets, TextDataset, Vocabulary};
use crate::error::Result;
use crate::init::{InitSpec, PoolerInit, PromptInit};
use crate::model::{ModelConfig, MtopModel, TaskSpec};
use crate::trainer::{run_training, TaskData, TrainConfig, TrainOutcome};
use crate::transplant::{apply_init, pre_finetune_single_task, SingleTaskArtifact};

/// Independent seeds for each random consumer of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub backbone: u64,
    pub init: u64,
    pub train: u64,
    pub single_task: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng.next_u64()
        };
        Self {
            backbone: stream(1),
            init: stream(2),
            train: stream(3),
            single_task: stream(4),
        }
    }
}

/// Vocabulary over all training texts plus the tokenized tasks.
pub fn prepare(
    datasets: &[TextDataset],
    vocab_max: usize,
    max_len: usize,
) -> (Vocabulary, Vec<TaskData>) {
    let vocab = Vocabulary::build(
        datasets
            .iter()
            .flat_map(|d| d.train.iter().map(|e| e.text.as_str())),
        vocab_max,
    );
    let data = encode_datasets(&vocab, datasets, max_len);
    (vocab, data)
}

/// Task specs for binary datasets, named after the datasets.
pub fn binary_tasks(datasets: &[TextDataset]) -> Vec<TaskSpec> {
    datasets
        .iter()
        .map(|d| TaskSpec::binary(d.name.clone()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    /// `encoder.vocab_size` is overwritten with the vocabulary's size.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prompt_init: PromptInit,
    pub pooler_init: PoolerInit,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    /// Holds the best checkpoint's weights.
    pub model: MtopModel,
    pub outcome: TrainOutcome,
    pub artifacts: Vec<SingleTaskArtifact>,
}

/// Freshly initialized model for `seed` before any init recipe is applied.
pub fn build_model(
    exp: &Experiment,
    tasks: &[TaskSpec],
    vocab: &Vocabulary,
    seed: u64,
) -> Result<MtopModel> {
    let seeds = Seeds::derive(seed);
    let mut config = exp.model.clone();
    config.encoder.vocab_size = vocab.len();
    MtopModel::with_tasks(config, seeds.backbone, tasks, seeds.init)
}

/// Pre-finetunes every task of `model` against its frozen backbone.
pub fn pretrain_all(
    model: &MtopModel,
    data: &[TaskData],
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<SingleTaskArtifact>> {
    let config = TrainConfig {
        seed: Seeds::derive(seed).single_task,
        ..train.clone()
    };
    (0..model.num_tasks())
        .map(|t| pre_finetune_single_task(model, t, &data[t], &config).map(|(a, _)| a))
        .collect()
}

/// One full run. Single-task artifacts are trained here unless supplied.
pub fn run_experiment(
    exp: &Experiment,
    tasks: &[TaskSpec],
    data: &[TaskData],
    vocab: &Vocabulary,
    seed: u64,
    artifacts: Option<Vec<SingleTaskArtifact>>,
    log: Option<&mut dyn Write>,
) -> Result<RunResult> {
    let seeds = Seeds::derive(seed);
    let mut model = build_model(exp, tasks, vocab, seed)?;
    let init = InitSpec {
        prompt: exp.prompt_init,
        pooler: exp.pooler_init,
        seed: seeds.init,
    };
    let artifacts = match artifacts {
        Some(a) => a,
        None if init.needs_artifacts() => pretrain_all(&model, data, &exp.train, seed)?,
        None => Vec::new(),
    };
    apply_init(&mut model, &init, Some(vocab), &artifacts)?;
    let train = TrainConfig {
        seed: seeds.train,
        ..exp.train.clone()
    };
    let outcome = run_training(&mut model, data, &train, log)?;
    Ok(RunResult {
        model,
        outcome,
        artifacts,
    })
}
