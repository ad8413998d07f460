//! Synthetic benchmark: task-heterogeneous clients grouped into latent
//! relatedness clusters, intra-client distribution shift, unseen tasks, and
//! the Self/Others evaluation protocol with A_last / A_AUC metrics.

mod generator;
mod run;

pub use generator::{generate_scenario, sample_task, task_prototypes};
pub use run::{
    evaluate, evaluate_on, fast_adaptation, metrics, run, run_seeded, ClientLogRecord,
    EvalCheckpoint, FastAdaptationCurve, Method, MetricsTrace, RunOutput,
};

use crate::client::{SanitizationSpec, Sample};
use crate::error::{Error, Result};
use crate::model::{Batch, FrozenModel, ModelSpec};
use serde::{Deserialize, Serialize};

/// One synthetic classification task: cluster prototypes rotated in a fixed
/// coordinate plane, with a label permutation hook. Tasks in the same
/// cluster share prototypes up to the rotation and a small perturbation;
/// different clusters (and unseen tasks) use disjoint prototype seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub cluster_id: u64,
    pub task_id: u64,
    pub rotation_angle: f64,
    pub rotation_plane: (usize, usize),
    pub perturbation_scale: f64,
    pub label_permutation: Vec<usize>,
    pub class_count: usize,
    /// Classes this task actually draws from (label skew). Clients in one
    /// cluster cover sliding windows of the cluster's classes, so peers hold
    /// complementary knowledge; the window also slides across a client's own
    /// task sequence, giving intra-client shift.
    pub active_classes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Tasks arrive one after another (intra-client distribution shift).
    Dynamic,
    /// The same sample multiset, shuffled across the whole stream.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTypeConfig {
    pub id: String,
    pub depth: usize,
    pub hidden_width: usize,
}

/// All tunable hyperparameters of a run. Field names are the normative
/// override keys for `--set key=value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Softmax temperature of the relevance weights.
    pub tau: f64,
    /// EMA ratio of the decayed probe gradient.
    pub alpha: f64,
    /// Gaussian noise scale of gradient sanitization.
    pub mu: f64,
    /// Fraction of gradient dimensions kept by the shared mask.
    pub n_s: f64,
    /// Number of PQ-LoRA blocks per model.
    pub n_b: usize,
    /// Low-rank size shared by every adapter.
    pub rank: usize,
    /// Probe frequency in steps.
    pub f: usize,
    /// Orthogonality-regularization weight in A alignment.
    pub lambda: f64,
    pub lr_pq: f64,
    pub lr_other: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    pub momentum: f64,
    pub align_lr: f64,
    pub align_epochs: usize,
    pub align_batch_size: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau: 0.5,
            alpha: 0.5,
            mu: 1e-4,
            n_s: 0.4,
            n_b: 4,
            rank: 8,
            f: 10,
            lambda: 0.5,
            lr_pq: 2.5e-3,
            lr_other: 1e-3,
            batch_size: 16,
            local_steps: 100,
            momentum: 0.0,
            align_lr: 0.05,
            align_epochs: 120,
            align_batch_size: 64,
        }
    }
}

fn default_name() -> String {
    "scenario".into()
}
fn default_clients() -> usize {
    6
}
fn default_clusters() -> usize {
    2
}
fn default_model_types() -> Vec<ModelTypeConfig> {
    vec![
        ModelTypeConfig {
            id: "small".into(),
            depth: 8,
            hidden_width: 16,
        },
        ModelTypeConfig {
            id: "large".into(),
            depth: 12,
            hidden_width: 32,
        },
    ]
}
fn default_tasks_per_client() -> usize {
    4
}
fn default_samples_per_task() -> usize {
    24
}
fn default_test_samples() -> usize {
    64
}
fn default_unseen_tasks() -> usize {
    2
}
fn default_unseen_train() -> usize {
    256
}
fn default_unseen_test() -> usize {
    256
}
fn default_rounds() -> usize {
    20
}
fn default_eval_interval() -> usize {
    5
}
fn default_mode() -> StreamMode {
    StreamMode::Dynamic
}
fn default_input_dim() -> usize {
    16
}
fn default_classes() -> usize {
    10
}
fn default_public_samples() -> usize {
    512
}
fn default_rotation() -> f64 {
    0.15
}
fn default_noise_std() -> f64 {
    0.4
}
fn default_classes_per_task() -> usize {
    5
}
fn default_class_stride() -> usize {
    0
}

/// Full experiment description. A scenario file is this struct as JSON;
/// unknown fields are rejected so typos surface as errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    #[serde(default = "default_clusters")]
    pub num_clusters: usize,
    #[serde(default = "default_model_types")]
    pub model_types: Vec<ModelTypeConfig>,
    /// Client -> model type index; empty derives an alternating assignment.
    #[serde(default)]
    pub client_model_types: Vec<usize>,
    /// Client -> cluster id; empty splits clients evenly.
    #[serde(default)]
    pub client_clusters: Vec<usize>,
    #[serde(default = "default_tasks_per_client")]
    pub tasks_per_client: usize,
    #[serde(default = "default_samples_per_task")]
    pub samples_per_task: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples_per_task: usize,
    #[serde(default = "default_unseen_tasks")]
    pub num_unseen_tasks: usize,
    #[serde(default = "default_unseen_train")]
    pub unseen_train_samples: usize,
    #[serde(default = "default_unseen_test")]
    pub unseen_test_samples: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_mode")]
    pub mode: StreamMode,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_public_samples")]
    pub public_samples: usize,
    /// Scale of per-task prototype rotations within a cluster (radians).
    #[serde(default = "default_rotation")]
    pub within_cluster_rotation: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Size of each task's class window (label skew within a cluster).
    #[serde(default = "default_classes_per_task")]
    pub classes_per_task: usize,
    /// Window offset between neighboring clients of one cluster.
    #[serde(default = "default_class_stride")]
    pub class_stride: usize,
    #[serde(default)]
    pub hyper: HyperParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, message: &str| Error::Config {
            field: name.into(),
            message: message.into(),
        };
        if self.num_clients == 0 {
            return Err(field("num_clients", "must be >= 1"));
        }
        if self.model_types.is_empty() {
            return Err(field("model_types", "must name at least one type"));
        }
        for t in &self.model_types {
            if t.depth < 2 {
                return Err(field("model_types.depth", "experiment models need depth >= 2"));
            }
            if t.depth < self.hyper.n_b {
                return Err(field("hyper.n_b", "more blocks than layers"));
            }
        }
        if !self.client_model_types.is_empty() {
            if self.client_model_types.len() != self.num_clients {
                return Err(field("client_model_types", "length != num_clients"));
            }
            if self
                .client_model_types
                .iter()
                .any(|&t| t >= self.model_types.len())
            {
                return Err(field("client_model_types", "type index out of range"));
            }
        }
        if !self.client_clusters.is_empty() {
            if self.client_clusters.len() != self.num_clients {
                return Err(field("client_clusters", "length != num_clients"));
            }
            if self
                .client_clusters
                .iter()
                .any(|&c| c >= self.num_clusters as usize)
            {
                return Err(field("client_clusters", "cluster id out of range"));
            }
        }
        if self.num_clusters == 0 {
            return Err(field("num_clusters", "must be >= 1"));
        }
        if self.tasks_per_client == 0 {
            return Err(field("tasks_per_client", "must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(field("rounds", "must be >= 1"));
        }
        if self.eval_interval == 0 || self.eval_interval > self.rounds {
            return Err(field("eval_interval", "must be in 1..=rounds"));
        }
        if self.hyper.tau <= 0.0 {
            return Err(field("hyper.tau", "must be > 0"));
        }
        if !(self.hyper.alpha > 0.0 && self.hyper.alpha <= 1.0) {
            return Err(field("hyper.alpha", "must be in (0, 1]"));
        }
        if self.hyper.f == 0 {
            return Err(field("hyper.f", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.hyper.n_s) {
            return Err(field("hyper.n_s", "must be in [0, 1]"));
        }
        let min_width = self
            .model_types
            .iter()
            .map(|t| t.hidden_width.min(self.num_classes).min(self.input_dim))
            .min()
            .unwrap();
        if self.hyper.rank > min_width {
            return Err(field("hyper.rank", "rank exceeds the narrowest layer"));
        }
        if self.classes_per_task == 0 || self.classes_per_task > self.num_classes {
            return Err(field("classes_per_task", "must be in 1..=num_classes"));
        }
        Ok(())
    }

    /// Resolved client -> model type index. The derived assignment gives
    /// each cluster one model type (task-correlated model selection, the way
    /// deployments pick model scale by workload); with more clusters than
    /// types the assignment cycles. Falls back to round-robin when there are
    /// more types than clusters so every type stays in play.
    pub fn resolved_model_types(&self) -> Vec<usize> {
        if !self.client_model_types.is_empty() {
            return self.client_model_types.clone();
        }
        let k = self.model_types.len();
        if k > self.num_clusters {
            return (0..self.num_clients).map(|i| i % k).collect();
        }
        let clusters = self.resolved_clusters();
        (0..self.num_clients).map(|i| clusters[i] % k).collect()
    }

    /// Resolved client -> cluster id (even split by default).
    pub fn resolved_clusters(&self) -> Vec<usize> {
        if !self.client_clusters.is_empty() {
            return self.client_clusters.clone();
        }
        (0..self.num_clients)
            .map(|i| i * self.num_clusters / self.num_clients)
            .collect()
    }

    /// Apply one `--set key=value` override. Only hyperparameter and
    /// schedule keys are recognized; anything else is an error.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_f64 = |v: &str| {
            v.parse::<f64>().map_err(|_| Error::Config {
                field: key.to_string(),
                message: format!("expected a number, got `{v}`"),
            })
        };
        let parse_usize = |v: &str| {
            v.parse::<usize>().map_err(|_| Error::Config {
                field: key.to_string(),
                message: format!("expected an integer, got `{v}`"),
            })
        };
        match key {
            "tau" => self.hyper.tau = parse_f64(value)?,
            "alpha" => self.hyper.alpha = parse_f64(value)?,
            "mu" => self.hyper.mu = parse_f64(value)?,
            "n_s" => self.hyper.n_s = parse_f64(value)?,
            "n_b" => self.hyper.n_b = parse_usize(value)?,
            "rank" => self.hyper.rank = parse_usize(value)?,
            "f" => self.hyper.f = parse_usize(value)?,
            "lambda" => self.hyper.lambda = parse_f64(value)?,
            "lr_pq" => self.hyper.lr_pq = parse_f64(value)?,
            "lr_other" => self.hyper.lr_other = parse_f64(value)?,
            "batch_size" => self.hyper.batch_size = parse_usize(value)?,
            "local_steps" => self.hyper.local_steps = parse_usize(value)?,
            "momentum" => self.hyper.momentum = parse_f64(value)?,
            "align_lr" => self.hyper.align_lr = parse_f64(value)?,
            "align_epochs" => self.hyper.align_epochs = parse_usize(value)?,
            "align_batch_size" => self.hyper.align_batch_size = parse_usize(value)?,
            "rounds" => self.rounds = parse_usize(value)?,
            "eval_interval" => self.eval_interval = parse_usize(value)?,
            "within_cluster_rotation" => self.within_cluster_rotation = parse_f64(value)?,
            "noise_std" => self.noise_std = parse_f64(value)?,
            "classes_per_task" => self.classes_per_task = parse_usize(value)?,
            "class_stride" => self.class_stride = parse_usize(value)?,
            "mode" => {
                self.mode = match value {
                    "dynamic" => StreamMode::Dynamic,
                    "static" => StreamMode::Static,
                    _ => {
                        return Err(Error::Config {
                            field: key.to_string(),
                            message: format!("expected dynamic|static, got `{value}`"),
                        })
                    }
                }
            }
            _ => {
                return Err(Error::Config {
                    field: key.to_string(),
                    message: "unknown override key".into(),
                })
            }
        }
        Ok(())
    }
}

/// Fully materialized experiment: models, adapter inits, data, schedules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub master_seed: u64,
    pub model_specs: Vec<ModelSpec>,
    pub frozen_models: Vec<FrozenModel>,
    /// Index of the shared probe model (the smallest type).
    pub probe_index: usize,
    pub client_model_types: Vec<usize>,
    pub client_clusters: Vec<usize>,
    pub client_tasks: Vec<Vec<TaskDescriptor>>,
    /// Ordered per-client stream (Dynamic: by task; Static: shuffled).
    pub train_streams: Vec<Vec<Sample>>,
    /// Held-out per-client, per-task test sets.
    pub test_sets: Vec<Vec<Batch>>,
    pub unseen_tasks: Vec<TaskDescriptor>,
    pub unseen_train: Vec<Vec<Sample>>,
    pub unseen_test: Vec<Batch>,
    pub public_data: crate::align::PublicDataset,
    pub sanitization: SanitizationSpec,
    /// Per-type adapter initialization, before alignment.
    pub init_adapters: Vec<crate::adapter::AdapterSet>,
}

impl Scenario {
    pub fn num_clients(&self) -> usize {
        self.config.num_clients
    }

    pub fn probe_model(&self) -> &FrozenModel {
        &self.frozen_models[self.probe_index]
    }

    /// Stable content fingerprint over the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        format!("{:016x}", crate::rng::fnv1a64(&bytes))
    }

    /// Stream slice for a client in a given round; sizes differ by at most
    /// one sample when the stream does not divide evenly.
    pub fn round_chunk(&self, client: usize, round: usize) -> &[Sample] {
        let stream = &self.train_streams[client];
        let n = stream.len();
        let r = self.config.rounds;
        let base = n / r;
        let extra = n % r;
        let start = round * base + round.min(extra);
        let len = base + usize::from(round < extra);
        &stream[start..(start + len).min(n)]
    }
}
