//! Initialization procedures that need more than a random draw: token-row
//! prompts, and single-task pre-finetuning against a frozen backbone whose
//! results are copied into the multi-task model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::ParamStore;
use crate::checkpoint::{Container, ContainerKind};
use crate::data::{Example, Vocabulary, TOKEN_POOL};
use crate::encoder::BACKBONE_GROUP;
use crate::error::{Error, Result};
use crate::init::{truncated_normal, InitSpec, PoolerInit, PromptInit, INIT_STD};
use crate::model::{ModelConfig, ModelVariant, MtopModel, TaskSpec};
use crate::tensor::Tensor;
use crate::trainer::{run_training, TaskData, TrainConfig, TrainOutcome};

/// SHA-256 over every backbone tensor's name, shape and payload, visited in
/// name order; lowercase hex.
pub fn backbone_fingerprint(store: &ParamStore) -> String {
    let mut backbone: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.group == BACKBONE_GROUP)
        .map(|(_, p)| p)
        .collect();
    backbone.sort_by(|a, b| a.name.cmp(&b.name));
    let mut h = Sha256::new();
    for p in backbone {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        h.update((p.tensor.shape().len() as u64).to_le_bytes());
        for &d in p.tensor.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trained task-local weights of one single-task model.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleTaskArtifact {
    /// Index of the task in the multi-task model.
    pub task: usize,
    pub spec: TaskSpec,
    pub prompt: Tensor,
    pub pooler_kernel: Tensor,
    pub pooler_bias: Tensor,
    pub head: Tensor,
    pub fingerprint: String,
}

impl SingleTaskArtifact {
    /// Task-local scalars carried: `d^2 + (L_P + c + 1) d`.
    pub fn scalars(&self) -> usize {
        self.prompt.len() + self.pooler_kernel.len() + self.pooler_bias.len() + self.head.len()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::SingleTask);
        c.set("task.index", self.task);
        c.set("task.name", &self.spec.name);
        c.set("task.classes", self.spec.num_classes);
        c.set("task.metric", self.spec.metric);
        c.set("backbone.fingerprint", &self.fingerprint);
        c.tensors.push(("prompt".into(), self.prompt.clone()));
        c.tensors
            .push(("pooler.kernel".into(), self.pooler_kernel.clone()));
        c.tensors
            .push(("pooler.bias".into(), self.pooler_bias.clone()));
        c.tensors.push(("head".into(), self.head.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::SingleTask {
            return Err(Error::Checkpoint(
                "container is not a single-task artifact".into(),
            ));
        }
        let tensor = |id: &str| {
            c.tensor(id)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("artifact lacks tensor '{id}'")))
        };
        Ok(Self {
            task: c.parse("task.index")?,
            spec: TaskSpec {
                name: c.parse("task.name")?,
                num_classes: c.parse("task.classes")?,
                metric: c.parse("task.metric")?,
            },
            prompt: tensor("prompt")?,
            pooler_kernel: tensor("pooler.kernel")?,
            pooler_bias: tensor("pooler.bias")?,
            head: tensor("head")?,
            fingerprint: c.parse("backbone.fingerprint")?,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// A one-task model over a bit copy of `model`'s backbone. Its task
/// parameters are drawn from stream `task` of `seed`, so tasks pre-finetuned
/// under one seed start from different points.
pub fn single_task_model(model: &MtopModel, task: usize, seed: u64) -> Result<MtopModel> {
    let spec = model
        .tasks()
        .get(task)
        .cloned()
        .ok_or(Error::TaskOutOfRange {
            index: task,
            count: model.num_tasks(),
        })?;
    let config = ModelConfig {
        encoder: model.config().encoder.clone(),
        prompt_len: model.config().prompt_len,
        shared_prompts: 0,
        variant: ModelVariant::Mtop,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64);
    let mut st = MtopModel::new(config, 0, &mut rng)?;
    for (_, p) in model
        .params()
        .iter()
        .filter(|(_, p)| p.group == BACKBONE_GROUP)
    {
        let id = st
            .params()
            .id(&p.name)
            .ok_or_else(|| Error::Config(format!("backbone tensor '{}' missing", p.name)))?;
        *st.params_mut().tensor_mut(id) = p.tensor.clone();
    }
    st.register_task(spec, &mut rng)?;
    st.params_mut().set_group_trainable(BACKBONE_GROUP, false);
    Ok(st)
}

/// Trains only task `task`'s prompt, pooler and head against `model`'s frozen
/// backbone and returns them as an artifact.
///
/// Fails if the backbone changed during training.
pub fn pre_finetune_single_task(
    model: &MtopModel,
    task: usize,
    data: &TaskData,
    config: &TrainConfig,
) -> Result<(SingleTaskArtifact, TrainOutcome)> {
    let mut st = single_task_model(model, task, config.seed)?;
    let before = backbone_fingerprint(st.params());
    let retag = |v: &[Example]| -> Vec<Example> {
        v.iter()
            .map(|e| Example {
                task: 0,
                ..e.clone()
            })
            .collect()
    };
    let local = TaskData {
        train: retag(&data.train),
        eval: retag(&data.eval),
    };
    let outcome = run_training(&mut st, &[local], config, None)?;
    let after = backbone_fingerprint(st.params());
    if before != after {
        return Err(Error::Config(format!(
            "backbone changed while pre-finetuning task '{}'",
            st.tasks()[0].name
        )));
    }
    let get = |id| st.params().tensor(id).clone();
    let pooler = st.poolers().conditional(0).expect("single-task pooler");
    let artifact = SingleTaskArtifact {
        task,
        spec: st.tasks()[0].clone(),
        prompt: get(st.pool().task_prompt(0)),
        pooler_kernel: get(pooler.kernel),
        pooler_bias: get(pooler.bias),
        head: get(st.poolers().head(0).expect("single-task head")),
        fingerprint: before,
    };
    Ok((artifact, outcome))
}

fn require_prompts(model: &MtopModel) -> Result<()> {
    if !model.variant().uses_prompts() {
        return Err(Error::Config(format!(
            "variant {} has no task prompts to initialize",
            model.variant()
        )));
    }
    Ok(())
}

/// Overwrites every task prompt row with a copy of the embedding row of a
/// token drawn uniformly from the `min(5000, |V|)` most frequent ones.
pub fn token_init(model: &mut MtopModel, vocab: &Vocabulary, seed: u64) -> Result<()> {
    require_prompts(model)?;
    let pool = vocab.top_tokens(TOKEN_POOL);
    if pool.is_empty() {
        return Err(Error::InvalidArgument(
            "token init needs a non-empty vocabulary".into(),
        ));
    }
    let table = model
        .params()
        .tensor(model.encoder().token_embedding())
        .clone();
    if let Some(&bad) = pool.iter().find(|&&id| id >= table.rows()) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside the embedding table of {} rows",
            table.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for task in 0..model.num_tasks() {
        let id = model.pool().task_prompt(task);
        let t = model.params_mut().tensor_mut(id);
        let d = t.cols();
        for row in t.data_mut().chunks_mut(d) {
            let tok = pool[rng.gen_range(0..pool.len())];
            row.copy_from_slice(table.row(tok));
        }
    }
    Ok(())
}

/// Copies artifact weights into `model` for the parts `init` marks as
/// single-task, after checking every artifact's backbone fingerprint.
/// Shared prompts are redrawn from the truncated normal. Returns the number
/// of scalars copied.
pub fn transplant_init(
    model: &mut MtopModel,
    artifacts: &[SingleTaskArtifact],
    prompts: bool,
    poolers: bool,
    seed: u64,
) -> Result<usize> {
    require_prompts(model)?;
    let fingerprint = backbone_fingerprint(model.params());
    let mut copied = 0;
    for task in 0..model.num_tasks() {
        let name = model.tasks()[task].name.clone();
        let art = artifacts
            .iter()
            .find(|a| a.task == task)
            .ok_or_else(|| Error::Config(format!("no single-task artifact for task '{name}'")))?;
        if art.fingerprint != fingerprint {
            return Err(Error::FingerprintMismatch {
                task: name,
                expected: fingerprint,
                found: art.fingerprint.clone(),
            });
        }
        let pooler = model
            .poolers()
            .conditional(task)
            .expect("conditional pooler");
        let head = model.poolers().head(task).expect("head");
        let mut pairs = Vec::with_capacity(4);
        if prompts {
            pairs.push((model.pool().task_prompt(task), &art.prompt));
        }
        if poolers {
            pairs.push((pooler.kernel, &art.pooler_kernel));
            pairs.push((pooler.bias, &art.pooler_bias));
            pairs.push((head, &art.head));
        }
        for (id, src) in pairs {
            let dst = model.params_mut().tensor_mut(id);
            if dst.shape() != src.shape() {
                return Err(Error::Shape {
                    op: "transplant",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            *dst = src.clone();
            copied += src.len();
        }
    }
    if let Some(id) = model.pool().shared() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = model.params().tensor(id).shape().to_vec();
        *model.params_mut().tensor_mut(id) = truncated_normal(&shape, INIT_STD, &mut rng);
    }
    Ok(copied)
}

/// Applies the non-random parts of `init` to a freshly built model. Random
/// choices are already in place from construction.
pub fn apply_init(
    model: &mut MtopModel,
    init: &InitSpec,
    vocab: Option<&Vocabulary>,
    artifacts: &[SingleTaskArtifact],
) -> Result<()> {
    if init.prompt == PromptInit::Token {
        let vocab = vocab.ok_or_else(|| Error::Config("token init needs a vocabulary".into()))?;
        token_init(model, vocab, init.seed)?;
    }
    let st_prompts = init.prompt == PromptInit::SingleTask;
    let st_poolers = init.pooler == PoolerInit::SingleTask;
    if st_prompts || st_poolers {
        transplant_init(model, artifacts, st_prompts, st_poolers, init.seed)?;
    }
    Ok(())
}
