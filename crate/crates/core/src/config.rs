//! Architecture, optimisation and data configuration.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SceneConfig;
use crate::error::{config_err, Result};

/// The four intermediate prediction tasks, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Depth,
    Parsing,
    Normal,
    Contour,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Depth, Task::Parsing, Task::Normal, Task::Contour];

    pub fn name(self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::Parsing => "parsing",
            Task::Normal => "normal",
            Task::Contour => "contour",
        }
    }

    /// Score-map channels for this task.
    pub fn channels(self, num_classes: usize) -> usize {
        match self {
            Task::Depth | Task::Contour => 1,
            Task::Parsing => num_classes,
            Task::Normal => 3,
        }
    }

    /// Depth and parsing heads get the full head width, the auxiliary ones half.
    pub fn head_width(self, n: usize) -> usize {
        match self {
            Task::Depth | Task::Parsing => n,
            Task::Normal | Task::Contour => n / 2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tasks produced by the final decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalTask {
    Depth,
    Parsing,
}

impl FinalTask {
    pub const ALL: [FinalTask; 2] = [FinalTask::Depth, FinalTask::Parsing];

    pub fn task(self) -> Task {
        match self {
            FinalTask::Depth => Task::Depth,
            FinalTask::Parsing => Task::Parsing,
        }
    }

    pub fn name(self) -> &'static str {
        self.task().name()
    }
}

impl fmt::Display for FinalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How intermediate predictions are fused before the final decoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistillVariant {
    /// Decoders read projected front-end features.
    #[serde(rename = "none")]
    None,
    /// Channel concatenation shared by both decoders.
    A,
    /// Per-task residual message passing.
    B,
    /// Per-task attention-gated message passing.
    C,
    /// Same parameters as `C`, but every message convolution reads the
    /// receiving task's own features: capacity without cross-task exchange.
    #[serde(rename = "mds")]
    MatchedCapacity,
}

impl DistillVariant {
    pub fn name(self) -> &'static str {
        match self {
            DistillVariant::None => "none",
            DistillVariant::A => "A",
            DistillVariant::B => "B",
            DistillVariant::C => "C",
            DistillVariant::MatchedCapacity => "mds",
        }
    }

    pub fn uses_predictions(self) -> bool {
        !matches!(self, DistillVariant::None)
    }
}

/// Per-loss weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub intermediate_depth: f64,
    pub intermediate_parsing: f64,
    pub normal: f64,
    pub contour: f64,
    pub final_depth: f64,
    pub final_parsing: f64,
}

impl Default for LossWeights {
    /// Auxiliary tasks at 0.8, everything else at 1.0.
    fn default() -> Self {
        Self {
            intermediate_depth: 1.0,
            intermediate_parsing: 1.0,
            normal: 0.8,
            contour: 0.8,
            final_depth: 1.0,
            final_parsing: 1.0,
        }
    }
}

impl LossWeights {
    /// Default weights with both depth terms scaled to 0.3.
    pub fn desk() -> Self {
        Self {
            intermediate_depth: 0.3,
            final_depth: 0.3,
            ..Self::default()
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.intermediate_depth,
            self.intermediate_parsing,
            self.normal,
            self.contour,
            self.final_depth,
            self.final_parsing,
        ]
    }
}

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Head width `N`; depth and parsing heads use `N`, the others `N/2`.
    pub head_width: usize,
    /// Channels of each per-task distillation feature map.
    pub distill_width: usize,
    /// Output channels of each encoder stage; the first three downsample by 2.
    pub encoder_stages: Vec<usize>,
    /// Extra dilated 3x3 convolutions appended to the last stage.
    pub dilation_rates: Vec<usize>,
    pub distill_variant: DistillVariant,
    /// Intermediate predictions fed into distillation.
    pub active_inputs: Vec<Task>,
    pub final_tasks: Vec<FinalTask>,
    /// Supervise all four intermediate heads in the joint phase.
    pub deep_supervision: bool,
    pub num_classes: usize,
    pub loss_weights: LossWeights,
}

impl NetworkConfig {
    /// Desk-scale PAD-Net: stages `[16, 32, 64]`, `N = 32`, attention distillation.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            head_width: 32,
            distill_width: 16,
            encoder_stages: vec![16, 32, 64],
            dilation_rates: vec![2],
            distill_variant: DistillVariant::C,
            active_inputs: Task::ALL.to_vec(),
            final_tasks: FinalTask::ALL.to_vec(),
            deep_supervision: true,
            num_classes,
            loss_weights: LossWeights::desk(),
        }
    }

    /// Every width at most 8; intended for finite-difference checking.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            head_width: 8,
            distill_width: 4,
            encoder_stages: vec![4, 8, 8],
            dilation_rates: vec![2],
            distill_variant: DistillVariant::C,
            active_inputs: Task::ALL.to_vec(),
            final_tasks: FinalTask::ALL.to_vec(),
            deep_supervision: true,
            num_classes,
            loss_weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_stages.len() < 3 {
            return Err(config_err(format!(
                "encoder_stages needs at least 3 entries (three stride-2 stages reach 1/8 resolution), got {}",
                self.encoder_stages.len()
            )));
        }
        if let Some(i) = self.encoder_stages.iter().position(|&c| c == 0) {
            return Err(config_err(format!("encoder_stages[{i}] must be positive")));
        }
        if let Some(i) = self.dilation_rates.iter().position(|&d| d == 0) {
            return Err(config_err(format!("dilation_rates[{i}] must be positive")));
        }
        if self.head_width < 2 || self.head_width % 2 != 0 {
            return Err(config_err(format!(
                "head_width must be even and at least 2, got {}",
                self.head_width
            )));
        }
        if self.distill_width == 0 {
            return Err(config_err("distill_width must be positive"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(config_err(format!(
                "num_classes must lie in [2, 255], got {}",
                self.num_classes
            )));
        }
        if self.final_tasks.is_empty() {
            return Err(config_err("final_tasks must name at least one task"));
        }
        if has_duplicates(&self.final_tasks) {
            return Err(config_err("final_tasks contains duplicates"));
        }
        if has_duplicates(&self.active_inputs) {
            return Err(config_err("active_inputs contains duplicates"));
        }
        if self.distill_variant.uses_predictions() && self.active_inputs.is_empty() {
            return Err(config_err(format!(
                "distill_variant {} needs at least one active input",
                self.distill_variant.name()
            )));
        }
        if matches!(
            self.distill_variant,
            DistillVariant::B | DistillVariant::C | DistillVariant::MatchedCapacity
        ) {
            for k in &self.final_tasks {
                if !self.active_inputs.contains(&k.task()) {
                    return Err(config_err(format!(
                        "distill_variant {} needs final task {k} among active_inputs",
                        self.distill_variant.name()
                    )));
                }
            }
        }
        if self.fused_width() < 4 {
            return Err(config_err(format!(
                "decoders halve their input channels twice; fused width {} is below 4",
                self.fused_width()
            )));
        }
        let w = self.loss_weights.as_array();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config_err("loss_weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Active inputs in canonical task order.
    pub fn inputs(&self) -> Vec<Task> {
        Task::ALL
            .into_iter()
            .filter(|t| self.active_inputs.contains(t))
            .collect()
    }

    /// Final tasks in canonical order.
    pub fn finals(&self) -> Vec<FinalTask> {
        FinalTask::ALL
            .into_iter()
            .filter(|t| self.final_tasks.contains(t))
            .collect()
    }

    /// Intermediate heads the network carries. The parsing head always exists
    /// because the first training phase supervises it alone.
    pub fn heads(&self) -> Vec<Task> {
        if self.deep_supervision || self.distill_variant.uses_predictions() {
            Task::ALL.to_vec()
        } else {
            vec![Task::Parsing]
        }
    }

    /// Channels entering each decoder.
    pub fn fused_width(&self) -> usize {
        match self.distill_variant {
            DistillVariant::A => self.inputs().len() * self.distill_width,
            _ => self.distill_width,
        }
    }

    /// Channels of the aggregated front-end features.
    pub fn aggregated_width(&self) -> usize {
        let last = *self.encoder_stages.last().unwrap_or(&0);
        let shallow: usize = self.encoder_stages[..self.encoder_stages.len().saturating_sub(1)]
            .iter()
            .map(|&c| reduced_width(c, last))
            .sum();
        shallow + last
    }

    /// First 8 bytes (little endian) of SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&bytes);
        let mut first = [0u8; 8];
        first.copy_from_slice(&hash[..8]);
        u64::from_le_bytes(first)
    }
}

/// Channel count a shallow stage is reduced to before aggregation:
/// `min(channels, last) / 4`, at least 8.
pub fn reduced_width(channels: usize, last: usize) -> usize {
    (channels.min(last) / 4).max(8)
}

fn has_duplicates<T: PartialEq>(items: &[T]) -> bool {
    items
        .iter()
        .enumerate()
        .any(|(i, a)| items[i + 1..].contains(a))
}

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Upper clamp of the per-batch contour positive weight.
    pub max_pos_weight: f64,
    pub augment: bool,
    /// Rescale each step's gradient to at most this global L2 norm.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    /// Polynomial decay within each phase: `lr · (1 - t/T)^power`.
    #[serde(default)]
    pub poly_power: Option<f64>,
}

impl TrainConfig {
    /// Schedule published for the full-size network: momentum 0.99, weight
    /// decay 0.0005, learning rates 0.001 then 1e-5.
    pub fn paper() -> Self {
        Self {
            batch_size: 2,
            phase1_epochs: 1,
            phase2_epochs: 1,
            phase1_lr: 1e-3,
            phase2_lr: 1e-5,
            momentum: 0.99,
            weight_decay: 5e-4,
            max_pos_weight: 20.0,
            augment: true,
            clip_grad_norm: None,
            poly_power: None,
        }
    }

    /// Desk-scale schedule for from-scratch training: higher phase-2 rate
    /// with gradient clipping and polynomial decay.
    pub fn desk() -> Self {
        Self {
            batch_size: 2,
            phase1_epochs: 10,
            phase2_epochs: 12,
            phase1_lr: 1e-3,
            phase2_lr: 3e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_pos_weight: 20.0,
            augment: false,
            clip_grad_norm: Some(5.0),
            poly_power: Some(0.9),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("training.batch_size must be positive"));
        }
        for (name, v) in [
            ("phase1_lr", self.phase1_lr),
            ("phase2_lr", self.phase2_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(format!("training.{name} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err("training.momentum must lie in [0, 1)"));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(config_err("training.clip_grad_norm must be positive"));
            }
        }
        if let Some(p) = self.poly_power {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(config_err("training.poly_power must be non-negative"));
            }
        }
        if !(self.max_pos_weight >= 1.0) {
            return Err(config_err("training.max_pos_weight must be at least 1"));
        }
        Ok(())
    }
}

/// Synthetic dataset settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_count: usize,
    pub val_count: usize,
    /// Seed of the dataset; sample `i` of the training split uses `seed + i`.
    pub seed: u64,
    /// Optional pre-generated training set instead of synthesis.
    #[serde(default)]
    pub train_path: Option<String>,
    #[serde(default)]
    pub val_path: Option<String>,
}

impl DataConfig {
    /// Training and validation splits: files when paths are given, otherwise
    /// synthetic scenes. Validation scene `i` uses `seed + train_count + i`.
    pub fn load_splits(&self) -> Result<(Vec<crate::data::Sample>, Vec<crate::data::Sample>)> {
        use crate::data::{generate_dataset, read_dataset_file};
        let train = match &self.train_path {
            Some(p) => read_dataset_file(p)?,
            None => generate_dataset(self.seed, self.train_count, &self.scene)?,
        };
        let val = match &self.val_path {
            Some(p) => read_dataset_file(p)?,
            None => generate_dataset(self.seed.wrapping_add(self.train_count as u64), self.val_count, &self.scene)?,
        };
        Ok((train, val))
    }
}

/// Everything `train` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.training.validate()?;
        self.data.scene.validate()?;
        if self.data.scene.num_classes != self.network.num_classes {
            return Err(config_err(format!(
                "data.scene.num_classes ({}) differs from network.num_classes ({})",
                self.data.scene.num_classes, self.network.num_classes
            )));
        }
        Ok(())
    }

    /// Desk preset: 64x64 scenes, `N = 32`, attention distillation.
    pub fn desk() -> Self {
        let scene = SceneConfig::default();
        Self {
            network: NetworkConfig::desk(scene.num_classes),
            training: TrainConfig::desk(),
            data: DataConfig {
                scene,
                train_count: 64,
                val_count: 16,
                seed: 0,
                train_path: None,
                val_path: None,
            },
        }
    }

    /// Parses JSON, reporting the path of the first offending field.
    pub fn from_json(text: &str) -> std::result::Result<Self, ConfigParseError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ConfigParseError {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate().map_err(|e| ConfigParseError {
            path: String::new(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }
}

/// Schema violation in a JSON config.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{}{message}", if path.is_empty() || path == "." { String::new() } else { format!("at `{path}`: ") })]
pub struct ConfigParseError {
    pub path: String,
    pub message: String,
}
