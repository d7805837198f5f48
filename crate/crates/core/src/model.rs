//! The multi-task prompt model: a shared prompt pool in front of one encoder
//! pass, task representations pooled over each task's prompt positions, and
//! per-task conditional poolers with classification heads.
//!
//! Sequence layout per input (prompt variants):
//!
//! ```text
//! [shared prompts | task-0 prompts | ... | task-(N-1) prompts | [CLS] | tokens | padding]
//! ```
//!
//! During an MTOP training step for task `i`, every task prompt block other
//! than `i`'s enters the graph through a stop-gradient. Shared prompts never
//! do.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::checkpoint::{Container, ContainerKind};
use crate::encoder::{EmbeddedBatch, Encoder, EncoderConfig, CLS_ID};
use crate::error::{Error, Result};
use crate::init::{glorot_uniform, truncated_normal, INIT_STD};
use crate::metrics::MetricKind;
use crate::tensor::Tensor;

pub const TASK_GROUP: &str = "task";
pub const SHARED_GROUP: &str = "shared";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    /// Prompt pool, stop-gradient on foreign prompts, conditional poolers.
    Mtop,
    /// As `Mtop` but gradients reach every prompt block.
    MtopNoSg,
    /// `[CLS]` state through one shared pooler, per-task heads, no prompts.
    SharedPooler,
    /// One pass per task with only that task's prompts prepended.
    PerTaskPrompt,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Mtop,
        ModelVariant::MtopNoSg,
        ModelVariant::SharedPooler,
        ModelVariant::PerTaskPrompt,
    ];

    pub fn uses_prompts(self) -> bool {
        !matches!(self, ModelVariant::SharedPooler)
    }

    pub fn uses_conditional_poolers(self) -> bool {
        !matches!(self, ModelVariant::SharedPooler)
    }

    /// Encoder passes needed to predict every task for one batch.
    pub fn passes_per_batch(self, num_tasks: usize) -> usize {
        match self {
            ModelVariant::PerTaskPrompt => num_tasks,
            _ => 1,
        }
    }

    /// Variants that share the same parameter layout can swap freely.
    fn layout_family(self) -> u8 {
        match self {
            ModelVariant::SharedPooler => 1,
            _ => 0,
        }
    }
}

impl FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mtop" => Ok(Self::Mtop),
            "mtop_no_sg" | "no_sg" => Ok(Self::MtopNoSg),
            "shared_pooler" | "mt_dnn" => Ok(Self::SharedPooler),
            "per_task_prompt" | "p_tuning" => Ok(Self::PerTaskPrompt),
            other => Err(format!(
                "unknown variant '{other}' (expected mtop, mtop_no_sg, shared_pooler or per_task_prompt)"
            )),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mtop => "mtop",
            Self::MtopNoSg => "mtop_no_sg",
            Self::SharedPooler => "shared_pooler",
            Self::PerTaskPrompt => "per_task_prompt",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub num_classes: usize,
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            num_classes: 2,
            metric: MetricKind::Accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Prompts per task.
    pub prompt_len: usize,
    /// Task-agnostic prompts prepended before all task prompts.
    pub shared_prompts: usize,
    pub variant: ModelVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            prompt_len: 2,
            shared_prompts: 0,
            variant: ModelVariant::Mtop,
        }
    }
}

/// New trainable scalars one task adds: prompts, conditional pooler, head.
///
/// `d^2 + (prompt_len + classes + 1) * d`
pub fn extra_params_per_task(hidden_dim: usize, prompt_len: usize, num_classes: usize) -> usize {
    hidden_dim * hidden_dim + (prompt_len + num_classes + 1) * hidden_dim
}

/// Prompt parameters: per-task `prompt_len x d` blocks plus optional
/// task-agnostic rows.
#[derive(Clone, Debug, Default)]
pub struct PromptPool {
    shared: Option<ParamId>,
    shared_len: usize,
    tasks: Vec<ParamId>,
    prompt_len: usize,
}

impl PromptPool {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn shared_len(&self) -> usize {
        self.shared_len
    }

    pub fn shared(&self) -> Option<ParamId> {
        self.shared
    }

    pub fn task_prompt(&self, task: usize) -> ParamId {
        self.tasks[task]
    }

    /// Rows of the assembled prompt block: `S + N * L_P`.
    pub fn block_rows(&self) -> usize {
        self.shared_len + self.tasks.len() * self.prompt_len
    }

    /// Positions of `task`'s prompts inside the full block.
    pub fn task_rows(&self, task: usize) -> Range<usize> {
        let start = self.shared_len + task * self.prompt_len;
        start..start + self.prompt_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pooler {
    pub kernel: ParamId,
    pub bias: ParamId,
}

/// Per-task `(W_i, b_i)` poolers and `V_i` heads, plus the shared `(W, b)`
/// used by the shared-pooler baseline.
#[derive(Clone, Debug, Default)]
pub struct ConditionalPoolerSet {
    conditional: Vec<Pooler>,
    heads: Vec<ParamId>,
    shared: Option<Pooler>,
}

impl ConditionalPoolerSet {
    /// Assembles a set from already-registered parameters.
    pub fn from_parts(
        conditional: Vec<Pooler>,
        heads: Vec<ParamId>,
        shared: Option<Pooler>,
    ) -> Self {
        Self {
            conditional,
            heads,
            shared,
        }
    }

    pub fn conditional(&self, task: usize) -> Option<Pooler> {
        self.conditional.get(task).copied()
    }

    pub fn head(&self, task: usize) -> Option<ParamId> {
        self.heads.get(task).copied()
    }

    pub fn shared(&self) -> Option<Pooler> {
        self.shared
    }

    fn logits_with(g: &mut Graph<'_>, e: NodeId, pooler: Pooler, head: ParamId) -> Result<NodeId> {
        let w = g.param(pooler.kernel);
        let b = g.param(pooler.bias);
        let z = g.linear(e, w, b)?;
        let z = g.tanh(z);
        let v = g.param(head);
        g.matmul(z, v)
    }

    /// Logits `tanh(E W_i + b_i) V_i` for a batch of task representations.
    pub fn conditional_logits(&self, g: &mut Graph<'_>, e: NodeId, task: usize) -> Result<NodeId> {
        let (pooler, head) = self
            .conditional(task)
            .zip(self.head(task))
            .ok_or_else(|| missing_task_params(task))?;
        Self::logits_with(g, e, pooler, head)
    }

    /// Logits `tanh(E W + b) V_i` through the shared pooler.
    pub fn shared_logits(&self, g: &mut Graph<'_>, e: NodeId, task: usize) -> Result<NodeId> {
        let pooler = self
            .shared
            .ok_or_else(|| Error::InvalidArgument("model has no shared pooler".into()))?;
        let head = self.head(task).ok_or_else(|| missing_task_params(task))?;
        Self::logits_with(g, e, pooler, head)
    }

    /// Class distribution for each row of `e` (`batch x d`, or a single
    /// `d` vector) through task `task`'s conditional pooler.
    pub fn predict_task(&self, store: &ParamStore, e: &Tensor, task: usize) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let en = g.input(e.clone());
        let logits = self.conditional_logits(&mut g, en, task)?;
        let probs = g.softmax(logits);
        Ok(g.value(probs).clone())
    }

    /// As [`Self::predict_task`] but through the shared pooler.
    pub fn predict_shared_pooler(
        &self,
        store: &ParamStore,
        e: &Tensor,
        task: usize,
    ) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let en = g.input(e.clone());
        let logits = self.shared_logits(&mut g, en, task)?;
        let probs = g.softmax(logits);
        Ok(g.value(probs).clone())
    }
}

fn missing_task_params(task: usize) -> Error {
    Error::InvalidArgument(format!("no pooler/head registered for task {task}"))
}

/// Per-task class distributions from [`MtopModel::predict_all_tasks`].
#[derive(Clone, Debug)]
pub struct AllTaskPredictions {
    /// One `batch x classes` tensor per task.
    pub probs: Vec<Tensor>,
    /// Encoder passes this call performed.
    pub forward_passes: u64,
}

impl AllTaskPredictions {
    pub fn argmax(&self, task: usize) -> Vec<usize> {
        argmax_rows(&self.probs[task])
    }
}

/// Index of the largest entry in each row; the first wins ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MtopModel {
    config: ModelConfig,
    encoder: Encoder,
    params: ParamStore,
    tasks: Vec<TaskSpec>,
    pool: PromptPool,
    poolers: ConditionalPoolerSet,
}

impl MtopModel {
    /// Builds the backbone from `backbone_seed` and any variant-level shared
    /// parameters from `rng`. Tasks are added with [`Self::register_task`].
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        backbone_seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        use rand::SeedableRng;
        if config.variant.uses_prompts() && config.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut backbone_rng = rand_chacha::ChaCha8Rng::seed_from_u64(backbone_seed);
        let encoder = Encoder::build(config.encoder.clone(), &mut params, &mut backbone_rng)?;
        let d = config.encoder.hidden_dim;
        let mut pool = PromptPool {
            prompt_len: config.prompt_len,
            ..PromptPool::default()
        };
        if config.variant.uses_prompts() && config.shared_prompts > 0 {
            let t = truncated_normal(&[config.shared_prompts, d], INIT_STD, rng);
            pool.shared = Some(params.add("prompt.shared", SHARED_GROUP, t, true)?);
            pool.shared_len = config.shared_prompts;
        }
        let mut poolers = ConditionalPoolerSet::default();
        if !config.variant.uses_conditional_poolers() {
            let kernel = params.add(
                "pooler.shared.kernel",
                SHARED_GROUP,
                glorot_uniform(d, d, rng),
                true,
            )?;
            let bias = params.add(
                "pooler.shared.bias",
                SHARED_GROUP,
                Tensor::zeros(&[d]),
                true,
            )?;
            poolers.shared = Some(Pooler { kernel, bias });
        }
        Ok(Self {
            config,
            encoder,
            params,
            tasks: Vec::new(),
            pool,
            poolers,
        })
    }

    /// Convenience: backbone plus randomly initialized tasks.
    pub fn with_tasks(
        config: ModelConfig,
        backbone_seed: u64,
        tasks: &[TaskSpec],
        init_seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(init_seed);
        let mut model = Self::new(config, backbone_seed, &mut rng)?;
        for t in tasks {
            model.register_task(t.clone(), &mut rng)?;
        }
        Ok(model)
    }

    /// Appends a task at the end of the task block and returns how many new
    /// trainable scalars it allocated.
    pub fn register_task<R: Rng + ?Sized>(&mut self, spec: TaskSpec, rng: &mut R) -> Result<usize> {
        if spec.name.is_empty() || spec.name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!(
                "task name '{}' must be non-empty without whitespace",
                spec.name
            )));
        }
        if self.tasks.iter().any(|t| t.name == spec.name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate task '{}'",
                spec.name
            )));
        }
        if spec.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "task '{}' needs at least 2 classes",
                spec.name
            )));
        }
        let before = self.params.trainable_scalars();
        let d = self.config.encoder.hidden_dim;
        let name = spec.name.clone();
        if self.config.variant.uses_prompts() {
            let t = truncated_normal(&[self.config.prompt_len, d], INIT_STD, rng);
            let id = self
                .params
                .add(format!("task.{name}.prompt"), TASK_GROUP, t, true)?;
            self.pool.tasks.push(id);
        }
        if self.config.variant.uses_conditional_poolers() {
            let kernel = self.params.add(
                format!("task.{name}.pooler.kernel"),
                TASK_GROUP,
                glorot_uniform(d, d, rng),
                true,
            )?;
            let bias = self.params.add(
                format!("task.{name}.pooler.bias"),
                TASK_GROUP,
                Tensor::zeros(&[d]),
                true,
            )?;
            self.poolers.conditional.push(Pooler { kernel, bias });
        }
        let head = self.params.add(
            format!("task.{name}.head"),
            TASK_GROUP,
            glorot_uniform(d, spec.num_classes, rng),
            true,
        )?;
        self.poolers.heads.push(head);
        self.tasks.push(spec);
        Ok(self.params.trainable_scalars() - before)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    /// Same weights under another variant with an identical parameter layout
    /// (`Mtop`, `MtopNoSg` and `PerTaskPrompt` are interchangeable).
    pub fn with_variant(mut self, variant: ModelVariant) -> Result<Self> {
        if variant.layout_family() != self.config.variant.layout_family() {
            return Err(Error::InvalidArgument(format!(
                "cannot switch {} to {variant}: parameter layouts differ",
                self.config.variant
            )));
        }
        self.config.variant = variant;
        Ok(self)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn pool(&self) -> &PromptPool {
        &self.pool
    }

    pub fn poolers(&self) -> &ConditionalPoolerSet {
        &self.poolers
    }

    pub fn forward_passes(&self) -> u64 {
        self.encoder.forward_passes()
    }

    pub fn reset_forward_passes(&self) {
        self.encoder.reset_forward_passes();
    }

    /// Task-local trainable parameters: prompt, pooler kernel and bias, head.
    pub fn task_param_ids(&self, task: usize) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(4);
        if let Some(p) = self.pool.tasks.get(task) {
            ids.push(*p);
        }
        if let Some(p) = self.poolers.conditional(task) {
            ids.push(p.kernel);
            ids.push(p.bias);
        }
        if let Some(h) = self.poolers.head(task) {
            ids.push(h);
        }
        ids
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.tasks.len() {
            return Err(Error::TaskOutOfRange {
                index: task,
                count: self.tasks.len(),
            });
        }
        Ok(())
    }

    /// Prompt rows for one pass: the full pool, or `only` task's block.
    fn prompt_block(
        &self,
        g: &mut Graph<'_>,
        training_task: Option<usize>,
        only: Option<usize>,
    ) -> Result<Option<NodeId>> {
        if !self.config.variant.uses_prompts() {
            return Ok(None);
        }
        let mut parts = Vec::with_capacity(self.tasks.len() + 1);
        if let Some(s) = self.pool.shared {
            parts.push(g.param(s));
        }
        let stop = self.config.variant == ModelVariant::Mtop;
        for (i, &p) in self.pool.tasks.iter().enumerate() {
            if only.is_some_and(|o| o != i) {
                continue;
            }
            let node = g.param(p);
            let node = match training_task {
                Some(t) if stop && t != i => g.stop_gradient(node),
                _ => node,
            };
            parts.push(node);
        }
        if parts.is_empty() {
            return Ok(None);
        }
        Ok(Some(g.concat_rows(&parts)?))
    }

    fn with_cls(token_ids: &[Vec<usize>]) -> Vec<Vec<usize>> {
        token_ids
            .iter()
            .map(|s| {
                let mut v = Vec::with_capacity(s.len() + 1);
                v.push(CLS_ID);
                v.extend_from_slice(s);
                v
            })
            .collect()
    }

    fn assemble(
        &self,
        g: &mut Graph<'_>,
        token_ids: &[Vec<usize>],
        training_task: Option<usize>,
        only: Option<usize>,
    ) -> Result<EmbeddedBatch> {
        let block = self.prompt_block(g, training_task, only)?;
        self.encoder
            .embed_batch(g, block, &Self::with_cls(token_ids))
    }

    /// Embeds a batch as `[prompts | [CLS] | tokens | padding]`.
    ///
    /// For `Mtop`, `training_task` selects the one prompt block that keeps
    /// its gradient. `PerTaskPrompt` requires it to pick which prompts to
    /// prepend.
    pub fn assemble_batch(
        &self,
        g: &mut Graph<'_>,
        token_ids: &[Vec<usize>],
        training_task: Option<usize>,
    ) -> Result<EmbeddedBatch> {
        if let Some(t) = training_task {
            self.check_task(t)?;
        }
        match self.config.variant {
            ModelVariant::PerTaskPrompt => {
                let t = training_task.ok_or_else(|| {
                    Error::InvalidArgument("per-task prompting needs a task to lay out".into())
                })?;
                self.assemble(g, token_ids, Some(t), Some(t))
            }
            _ => self.assemble(g, token_ids, training_task, None),
        }
    }

    /// Prompt rows of `task` within one pass's sequence layout.
    fn representation_rows(&self, task: usize, single_task_pass: bool) -> Range<usize> {
        match self.config.variant {
            ModelVariant::SharedPooler => 0..1,
            _ if single_task_pass => {
                let s = self.pool.shared_len;
                s..s + self.pool.prompt_len
            }
            _ => self.pool.task_rows(task),
        }
    }

    fn representation_over(
        &self,
        g: &mut Graph<'_>,
        h: NodeId,
        batch: &EmbeddedBatch,
        rows: Range<usize>,
    ) -> Result<NodeId> {
        let seq = batch.layout.seq;
        let mut per_seq = Vec::with_capacity(batch.layout.batch);
        for b in 0..batch.layout.batch {
            let block = g.slice_rows(h, b * seq + rows.start, rows.len())?;
            per_seq.push(if rows.len() == 1 {
                block
            } else {
                g.mean_rows(block)?
            });
        }
        g.concat_rows(&per_seq)
    }

    /// `E_i` for every sequence (`batch x d`): the mean of the encoder outputs
    /// at task `task`'s prompt positions; shared prompts are excluded. The
    /// shared-pooler baseline uses the `[CLS]` state instead.
    pub fn task_representation(
        &self,
        g: &mut Graph<'_>,
        h: NodeId,
        batch: &EmbeddedBatch,
        task: usize,
    ) -> Result<NodeId> {
        self.check_task(task)?;
        let single = self.config.variant == ModelVariant::PerTaskPrompt;
        let rows = self.representation_rows(task, single);
        self.representation_over(g, h, batch, rows)
    }

    fn classify(&self, g: &mut Graph<'_>, e: NodeId, task: usize) -> Result<NodeId> {
        if self.config.variant.uses_conditional_poolers() {
            self.poolers.conditional_logits(g, e, task)
        } else {
            self.poolers.shared_logits(g, e, task)
        }
    }

    /// Training-mode logits for a batch of task `task`.
    pub fn task_logits(
        &self,
        g: &mut Graph<'_>,
        token_ids: &[Vec<usize>],
        task: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        let batch = self.assemble_batch(g, token_ids, Some(task))?;
        let h = self.encoder.encode(g, batch.embedded, &batch.layout, rng)?;
        let e = self.task_representation(g, h, &batch, task)?;
        self.classify(g, e, task)
    }

    /// Mean cross-entropy for a batch drawn from task `task`.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        token_ids: &[Vec<usize>],
        labels: &[usize],
        task: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        let logits = self.task_logits(g, token_ids, task, rng)?;
        g.cross_entropy(logits, labels)
    }

    /// Class distributions for every task: one encoder pass for the pooled
    /// variants, one per task for `PerTaskPrompt`.
    pub fn predict_all_tasks(&self, token_ids: &[Vec<usize>]) -> Result<AllTaskPredictions> {
        let mut g = Graph::new(&self.params);
        let mut probs = Vec::with_capacity(self.tasks.len());
        let mut passes = 0;
        if self.config.variant == ModelVariant::PerTaskPrompt {
            for t in 0..self.tasks.len() {
                let batch = self.assemble(&mut g, token_ids, None, Some(t))?;
                let h = self
                    .encoder
                    .encode(&mut g, batch.embedded, &batch.layout, None)?;
                passes += 1;
                let e =
                    self.representation_over(&mut g, h, &batch, self.representation_rows(t, true))?;
                let logits = self.classify(&mut g, e, t)?;
                let p = g.softmax(logits);
                probs.push(g.value(p).clone());
            }
        } else {
            let batch = self.assemble(&mut g, token_ids, None, None)?;
            let h = self
                .encoder
                .encode(&mut g, batch.embedded, &batch.layout, None)?;
            passes += 1;
            for t in 0..self.tasks.len() {
                let e = self.task_representation(&mut g, h, &batch, t)?;
                let logits = self.classify(&mut g, e, t)?;
                let p = g.softmax(logits);
                probs.push(g.value(p).clone());
            }
        }
        Ok(AllTaskPredictions {
            probs,
            forward_passes: passes,
        })
    }

    /// Class distribution of a single task: one pass laid out as at training
    /// time, without computing the other tasks' heads.
    pub fn predict_task_probs(&self, token_ids: &[Vec<usize>], task: usize) -> Result<Tensor> {
        self.check_task(task)?;
        let mut g = Graph::new(&self.params);
        let batch = self.assemble_batch(&mut g, token_ids, Some(task))?;
        let h = self
            .encoder
            .encode(&mut g, batch.embedded, &batch.layout, None)?;
        let e = self.task_representation(&mut g, h, &batch, task)?;
        let logits = self.classify(&mut g, e, task)?;
        let p = g.softmax(logits);
        Ok(g.value(p).clone())
    }

    /// Argmax class of a single task for every sequence.
    pub fn predict_task_batch(&self, token_ids: &[Vec<usize>], task: usize) -> Result<Vec<usize>> {
        let probs = self.predict_task_probs(token_ids, task)?;
        Ok(argmax_rows(&probs))
    }

    /// Sequence length one pass sees for an input of `tokens` tokens.
    pub fn pass_sequence_len(&self, tokens: usize) -> usize {
        let prompts = match self.config.variant {
            ModelVariant::SharedPooler => 0,
            ModelVariant::PerTaskPrompt => self.pool.shared_len + self.pool.prompt_len,
            _ => self.pool.block_rows(),
        };
        prompts + 1 + tokens
    }

    /// Writes configuration, task registry and every parameter.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::Checkpoint);
        let e = &self.config.encoder;
        c.set("encoder.num_layers", e.num_layers);
        c.set("encoder.hidden_dim", e.hidden_dim);
        c.set("encoder.num_heads", e.num_heads);
        c.set("encoder.ffn_dim", e.ffn_dim);
        c.set("encoder.max_positions", e.max_positions);
        c.set("encoder.vocab_size", e.vocab_size);
        c.set("encoder.dropout_rate", e.dropout_rate);
        c.set("model.variant", self.config.variant);
        c.set("model.prompt_len", self.config.prompt_len);
        c.set("model.shared_prompts", self.config.shared_prompts);
        c.set("task.count", self.tasks.len());
        for (i, t) in self.tasks.iter().enumerate() {
            c.set(format!("task.{i}.name"), &t.name);
            c.set(format!("task.{i}.classes"), t.num_classes);
            c.set(format!("task.{i}.metric"), t.metric);
        }
        for (_, p) in self.params.iter() {
            c.tensors.push((p.name.clone(), p.tensor.clone()));
        }
        c
    }

    /// Rebuilds a model from [`Self::to_container`] output. Every stored
    /// tensor must match a parameter of the rebuilt layout and vice versa.
    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::Checkpoint {
            return Err(Error::Checkpoint(
                "container is not a model checkpoint".into(),
            ));
        }
        let encoder = EncoderConfig {
            num_layers: c.parse("encoder.num_layers")?,
            hidden_dim: c.parse("encoder.hidden_dim")?,
            num_heads: c.parse("encoder.num_heads")?,
            ffn_dim: c.parse("encoder.ffn_dim")?,
            max_positions: c.parse("encoder.max_positions")?,
            vocab_size: c.parse("encoder.vocab_size")?,
            dropout_rate: c.parse("encoder.dropout_rate")?,
        };
        let config = ModelConfig {
            encoder,
            prompt_len: c.parse("model.prompt_len")?,
            shared_prompts: c.parse("model.shared_prompts")?,
            variant: c.parse("model.variant")?,
        };
        let count: usize = c.parse("task.count")?;
        let mut tasks = Vec::with_capacity(count);
        for i in 0..count {
            tasks.push(TaskSpec {
                name: c.parse(&format!("task.{i}.name"))?,
                num_classes: c.parse(&format!("task.{i}.classes"))?,
                metric: c.parse(&format!("task.{i}.metric"))?,
            });
        }
        let mut model = Self::with_tasks(config, 0, &tasks, 0)?;
        if c.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model layout has {}",
                c.tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in &c.tensors {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
            if model.params.tensor(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.tensor(id).shape()
                )));
            }
            *model.params.tensor_mut(id) = t.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny(variant: ModelVariant, tasks: usize, shared: usize) -> MtopModel {
        let config = ModelConfig {
            encoder: EncoderConfig {
                num_layers: 1,
                hidden_dim: 8,
                num_heads: 2,
                ffn_dim: 16,
                max_positions: 64,
                vocab_size: 30,
                dropout_rate: 0.0,
            },
            prompt_len: 2,
            shared_prompts: shared,
            variant,
        };
        let specs: Vec<TaskSpec> = (0..tasks)
            .map(|i| TaskSpec::binary(format!("t{i}")))
            .collect();
        MtopModel::with_tasks(config, 5, &specs, 6).unwrap()
    }

    #[test]
    fn sequence_length_arithmetic() {
        let m = tiny(ModelVariant::Mtop, 3, 0);
        let mut g = Graph::new(m.params());
        let b = m.assemble_batch(&mut g, &[vec![3; 5]], Some(0)).unwrap();
        assert_eq!(b.layout.seq, 12);
        let m = tiny(ModelVariant::Mtop, 3, 2);
        let mut g = Graph::new(m.params());
        let b = m.assemble_batch(&mut g, &[vec![3; 5]], Some(0)).unwrap();
        assert_eq!(b.layout.seq, 14);
        assert_eq!(m.pool().task_rows(1), 4..6);
    }

    #[test]
    fn training_task_out_of_range() {
        let m = tiny(ModelVariant::Mtop, 3, 0);
        let mut g = Graph::new(m.params());
        assert!(matches!(
            m.assemble_batch(&mut g, &[vec![3]], Some(3)),
            Err(Error::TaskOutOfRange { .. })
        ));
    }

    #[test]
    fn mean_of_two_prompt_rows() {
        let m = tiny(ModelVariant::Mtop, 1, 0);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        // H for one sequence: 2 prompt rows, [CLS], one token
        let h = g.input(
            Tensor::from_rows(&[
                vec![1.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![3.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                vec![9.0; 8],
                vec![9.0; 8],
            ])
            .unwrap(),
        );
        let batch = EmbeddedBatch {
            embedded: h,
            layout: crate::autodiff::AttentionLayout {
                batch: 1,
                seq: 4,
                heads: 2,
                valid: std::sync::Arc::new(vec![true; 4]),
            },
        };
        let e = m.task_representation(&mut g, h, &batch, 0).unwrap();
        assert_eq!(&g.value(e).data()[..2], &[2.0, 4.0]);
    }

    #[test]
    fn zero_representation_gives_uniform() {
        let m = tiny(ModelVariant::Mtop, 2, 0);
        let p = m
            .poolers()
            .predict_task(m.params(), &Tensor::zeros(&[1, 8]), 1)
            .unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn missing_task_params_fail() {
        let m = tiny(ModelVariant::Mtop, 2, 0);
        assert!(m
            .poolers()
            .predict_task(m.params(), &Tensor::zeros(&[1, 8]), 5)
            .is_err());
        assert!(m
            .poolers()
            .predict_shared_pooler(m.params(), &Tensor::zeros(&[1, 8]), 0)
            .is_err());
    }

    #[test]
    fn register_task_allocates_formula_count() {
        let mut m = tiny(ModelVariant::Mtop, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let added = m
            .register_task(
                TaskSpec {
                    name: "three".into(),
                    num_classes: 3,
                    metric: MetricKind::Accuracy,
                },
                &mut rng,
            )
            .unwrap();
        assert_eq!(added, extra_params_per_task(8, 2, 3));
        assert_eq!(m.pool().task_rows(2), 4..6);
    }

    #[test]
    fn formula_examples() {
        assert_eq!(extra_params_per_task(768, 2, 2), 593_664);
        assert_eq!(extra_params_per_task(2, 2, 2), 14);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = tiny(ModelVariant::Mtop, 2, 1);
        let back = MtopModel::from_container(&m.to_container()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.tasks(), m.tasks());
        assert_eq!(back.to_container().to_bytes(), m.to_container().to_bytes());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.to_string().parse::<ModelVariant>().unwrap(), v);
        }
    }

    #[test]
    fn pass_counts() {
        let m = tiny(ModelVariant::PerTaskPrompt, 3, 0);
        m.reset_forward_passes();
        let p = m.predict_all_tasks(&[vec![3, 4], vec![5]]).unwrap();
        assert_eq!(p.forward_passes, 3);
        assert_eq!(m.forward_passes(), 3);
        let m = tiny(ModelVariant::SharedPooler, 3, 0);
        let p = m.predict_all_tasks(&[vec![3, 4], vec![5]]).unwrap();
        assert_eq!(p.forward_passes, 1);
        assert_eq!(p.probs.len(), 3);
    }

    #[test]
    fn shared_pooler_variant_cannot_swap_to_prompts() {
        let m = tiny(ModelVariant::SharedPooler, 2, 0);
        assert!(m.with_variant(ModelVariant::Mtop).is_err());
        let m = tiny(ModelVariant::Mtop, 2, 0);
        assert!(m.with_variant(ModelVariant::PerTaskPrompt).is_ok());
    }
}
