//! Deterministic scenario generation: Gaussian-mixture tasks with
//! cluster-shared prototypes, per-task rotations, client streams with
//! distribution shift, held-out tests, unseen tasks, and public data.

use super::{Scenario, ScenarioConfig, StreamMode, TaskDescriptor};
use crate::adapter::AdapterSet;
use crate::align::PublicDataset;
use crate::client::{SanitizationSpec, Sample};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::model::{build_frozen, Batch, ModelSpec};
use crate::rng::{derive_seed, stream_rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// All prototypes live in one shared low-dimensional subspace of the input
/// space, so tasks from different clusters overlap in feature space (weight
/// interference is real) while still using disjoint prototype seeds.
pub const PROTOTYPE_SUBSPACE_DIM: usize = 6;

fn subspace_basis(input_dim: usize) -> Matrix {
    let sub = PROTOTYPE_SUBSPACE_DIM.min(input_dim);
    // fixed global stream: identical for every cluster and scenario
    let mut rng = stream_rng(0x70_70_70, "proto-subspace", 0);
    let g = Matrix::from_fn(input_dim, sub, |_, _| gaussian(&mut rng));
    crate::linalg::nearest_orthogonal(&g, crate::linalg::Orientation::Cols)
        .expect("basis")
        .0
}

/// Class prototypes of a task: the cluster's shared prototypes, slightly
/// perturbed per task, then rotated in the task's coordinate plane.
pub fn task_prototypes(task: &TaskDescriptor, input_dim: usize) -> Matrix {
    let sub = PROTOTYPE_SUBSPACE_DIM.min(input_dim);
    let basis = subspace_basis(input_dim);
    let mut cluster_rng = stream_rng(task.cluster_id, "cluster-protos", 0);
    // z ~ N(0, I_sub) scaled so prototype norms match full-dimension draws
    let scale = (input_dim as f64 / sub as f64).sqrt();
    let z = Matrix::from_fn(task.class_count, sub, |_, _| gaussian(&mut cluster_rng) * scale);
    let mut protos = z.matmul_nt(&basis); // (C x sub) * (sub x d)
    let mut perturb_rng = stream_rng(task.task_id, "task-perturb", 0);
    for v in protos.data_mut() {
        *v += task.perturbation_scale * gaussian(&mut perturb_rng);
    }
    // Givens rotation in the (i, j) plane.
    let (pi, pj) = task.rotation_plane;
    let (c, s) = (task.rotation_angle.cos(), task.rotation_angle.sin());
    for row in 0..protos.rows() {
        let xi = protos.at(row, pi);
        let xj = protos.at(row, pj);
        protos.set(row, pi, c * xi - s * xj);
        protos.set(row, pj, s * xi + c * xj);
    }
    protos
}

/// Draw n labeled samples from a task (labels from its active class window).
pub fn sample_task(
    task: &TaskDescriptor,
    input_dim: usize,
    noise_std: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let protos = task_prototypes(task, input_dim);
    (0..n)
        .map(|_| {
            let y = task.active_classes[rng.random_range(0..task.active_classes.len())];
            let mut input = Vec::with_capacity(input_dim);
            for j in 0..input_dim {
                input.push(protos.at(y, j) + noise_std * gaussian(rng));
            }
            Sample {
                input,
                label: task.label_permutation[y],
            }
        })
        .collect()
}

fn samples_to_batch(samples: &[Sample], input_dim: usize) -> Batch {
    let mut inputs = Matrix::zeros(samples.len(), input_dim);
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        for (j, v) in s.input.iter().enumerate() {
            inputs.set(i, j, *v);
        }
        labels.push(s.label);
    }
    Batch { inputs, labels }
}

fn make_task(
    master_seed: u64,
    cluster_seed: u64,
    global_task_index: u64,
    active_classes: Vec<usize>,
    cfg: &ScenarioConfig,
) -> TaskDescriptor {
    let mut rng = stream_rng(master_seed, "task-params", global_task_index);
    let d = cfg.input_dim;
    let pi = rng.random_range(0..d);
    let mut pj = rng.random_range(0..d);
    if pj == pi {
        pj = (pj + 1) % d;
    }
    TaskDescriptor {
        cluster_id: cluster_seed,
        task_id: derive_seed(master_seed, "task-id", global_task_index),
        rotation_angle: rng.random_range(0.0..cfg.within_cluster_rotation.max(1e-9)),
        rotation_plane: (pi, pj),
        perturbation_scale: 0.05,
        label_permutation: (0..cfg.num_classes).collect(),
        class_count: cfg.num_classes,
        active_classes,
    }
}

/// Class window of one task. Each cluster owns a disjoint label range;
/// within it, client p anchors at stride * p and its tasks wobble the window
/// start by one class (intra-client shift on top of per-task rotations).
/// Neighboring clients overlap partially, so a client's high-relevance peers
/// hold exactly the classes it is missing, while unrelated clusters share no
/// labels at all.
fn class_window(cfg: &ScenarioConfig, cluster: usize, cluster_pos: usize, task_idx: usize) -> Vec<usize> {
    let c = cfg.num_classes;
    let cluster_offset = cluster * (c / cfg.num_clusters.max(1));
    let offset = (cluster_offset + cfg.class_stride * cluster_pos + task_idx % 2) % c;
    (0..cfg.classes_per_task).map(|k| (offset + k) % c).collect()
}

/// Build the full deterministic scenario for (config, master_seed).
pub fn generate_scenario(cfg: &ScenarioConfig, master_seed: u64) -> Result<Scenario> {
    cfg.validate()?;

    // Backbones: one pretrained frozen model per type, probe = smallest.
    let model_specs: Vec<ModelSpec> = cfg
        .model_types
        .iter()
        .map(|t| ModelSpec::uniform(&t.id, t.depth, t.hidden_width, cfg.input_dim, cfg.num_classes))
        .collect();
    let mut frozen_models = Vec::with_capacity(model_specs.len());
    for (k, spec) in model_specs.iter().enumerate() {
        frozen_models.push(build_frozen(spec, derive_seed(master_seed, "model", k as u64))?);
    }
    let probe_index = model_specs
        .iter()
        .enumerate()
        .min_by_key(|(i, s)| (s.param_count(), *i))
        .map(|(i, _)| i)
        .unwrap();

    // Adapter initialization per type (pre-alignment).
    let mut init_adapters = Vec::with_capacity(model_specs.len());
    for (k, spec) in model_specs.iter().enumerate() {
        init_adapters.push(AdapterSet::init(
            &spec.widths,
            cfg.hyper.n_b,
            cfg.hyper.rank,
            derive_seed(master_seed, "init", k as u64),
        )?);
    }

    let client_model_types = cfg.resolved_model_types();
    let client_clusters = cfg.resolved_clusters();

    // Cluster prototype seeds, disjoint by stream name.
    let cluster_seed = |c: usize| derive_seed(master_seed, "cluster", c as u64);

    // Per-client tasks and data.
    let mut client_tasks = Vec::with_capacity(cfg.num_clients);
    let mut train_streams = Vec::with_capacity(cfg.num_clients);
    let mut test_sets = Vec::with_capacity(cfg.num_clients);
    let mut global_task_index: u64 = 0;
    let mut cluster_pos_counter = vec![0usize; cfg.num_clusters];
    for i in 0..cfg.num_clients {
        let cseed = cluster_seed(client_clusters[i]);
        let cluster_pos = cluster_pos_counter[client_clusters[i]];
        cluster_pos_counter[client_clusters[i]] += 1;
        let mut tasks = Vec::with_capacity(cfg.tasks_per_client);
        for t in 0..cfg.tasks_per_client {
            let window = class_window(cfg, client_clusters[i], cluster_pos, t);
            tasks.push(make_task(master_seed, cseed, global_task_index, window, cfg));
            global_task_index += 1;
        }

        let mut stream = Vec::with_capacity(cfg.tasks_per_client * cfg.samples_per_task);
        let mut tests = Vec::with_capacity(cfg.tasks_per_client);
        for (t, task) in tasks.iter().enumerate() {
            let mut data_rng = stream_rng(master_seed, "train-data", (i * 1024 + t) as u64);
            stream.extend(sample_task(
                task,
                cfg.input_dim,
                cfg.noise_std,
                cfg.samples_per_task,
                &mut data_rng,
            ));
            let mut test_rng = stream_rng(master_seed, "test-data", (i * 1024 + t) as u64);
            let test_samples = sample_task(
                task,
                cfg.input_dim,
                cfg.noise_std,
                cfg.test_samples_per_task,
                &mut test_rng,
            );
            tests.push(samples_to_batch(&test_samples, cfg.input_dim));
        }
        if cfg.mode == StreamMode::Static {
            // Fisher-Yates with the dedicated shuffle stream.
            let mut shuffle_rng = stream_rng(master_seed, "shuffle", i as u64);
            for k in (1..stream.len()).rev() {
                let j = shuffle_rng.random_range(0..=k);
                stream.swap(k, j);
            }
        }
        client_tasks.push(tasks);
        train_streams.push(stream);
        test_sets.push(tests);
    }

    // Unseen tasks: novel tasks in a familiar family. Each reuses an
    // existing cluster's prototype family under a rotation far outside the
    // training range and spans the cluster's full class window, so no client
    // ever trained on it but the domain is recognizable (the structure fast
    // adaptation is supposed to exploit).
    let mut unseen_tasks = Vec::with_capacity(cfg.num_unseen_tasks);
    let mut unseen_train = Vec::with_capacity(cfg.num_unseen_tasks);
    let mut unseen_test = Vec::with_capacity(cfg.num_unseen_tasks);
    for u in 0..cfg.num_unseen_tasks {
        let home_cluster = u % cfg.num_clusters;
        let range = cfg.num_classes / cfg.num_clusters.max(1);
        let window: Vec<usize> = (0..range)
            .map(|k| (home_cluster * range + k) % cfg.num_classes)
            .collect();
        let mut task = make_task(
            master_seed,
            cluster_seed(home_cluster),
            global_task_index,
            window,
            cfg,
        );
        // rotation strictly outside the training range [0, within_cluster_rotation)
        task.rotation_angle = cfg.within_cluster_rotation * (2.0 + u as f64);
        global_task_index += 1;
        let mut train_rng = stream_rng(master_seed, "unseen-train", u as u64);
        unseen_train.push(sample_task(
            &task,
            cfg.input_dim,
            cfg.noise_std,
            cfg.unseen_train_samples,
            &mut train_rng,
        ));
        let mut test_rng = stream_rng(master_seed, "unseen-test", u as u64);
        let test = sample_task(
            &task,
            cfg.input_dim,
            cfg.noise_std,
            cfg.unseen_test_samples,
            &mut test_rng,
        );
        unseen_test.push(samples_to_batch(&test, cfg.input_dim));
        unseen_tasks.push(task);
    }

    // Public dataset: fresh draws from the backbone pretraining
    // distribution (never the pretraining samples themselves), which is
    // disjoint from every client task by construction.
    let mut public_rng = stream_rng(master_seed, "public-data", 0);
    let protos = crate::model::pretrain_prototypes(cfg.input_dim, cfg.num_classes);
    let public_data = PublicDataset {
        samples: crate::model::sample_pretrain_distribution(
            &protos,
            cfg.public_samples,
            &mut public_rng,
        ),
    };

    // Shared sanitization mask over the probe's last-layer gradient size.
    let probe_spec = &model_specs[probe_index];
    let (d_in, d_out) = *probe_spec.widths.last().unwrap();
    let mut mask_rng = stream_rng(master_seed, "mask", 0);
    let sanitization =
        SanitizationSpec::generate(d_in * d_out, cfg.hyper.n_s, cfg.hyper.mu, &mut mask_rng);

    Ok(Scenario {
        config: cfg.clone(),
        master_seed,
        model_specs,
        frozen_models,
        probe_index,
        client_model_types,
        client_clusters,
        client_tasks,
        train_streams,
        test_sets,
        unseen_tasks,
        unseen_train,
        unseen_test,
        public_data,
        sanitization,
        init_adapters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::last_layer_gradient;

    fn small_cfg() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.samples_per_task = 30;
        cfg.test_samples_per_task = 16;
        cfg.rounds = 4;
        cfg.eval_interval = 2;
        cfg.public_samples = 32;
        cfg.hyper.local_steps = 10;
        cfg.model_types[0].depth = 4;
        cfg.model_types[1].depth = 6;
        cfg.hyper.n_b = 2;
        cfg.hyper.rank = 4;
        cfg
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_scenario(&cfg, 3).unwrap();
        let b = generate_scenario(&cfg, 3).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.train_streams, b.train_streams);
        let c = generate_scenario(&cfg, 4).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn static_stream_is_permutation_of_dynamic() {
        let mut cfg = small_cfg();
        cfg.mode = StreamMode::Dynamic;
        let dy = generate_scenario(&cfg, 7).unwrap();
        cfg.mode = StreamMode::Static;
        let st = generate_scenario(&cfg, 7).unwrap();
        for i in 0..cfg.num_clients {
            let mut a: Vec<String> = dy.train_streams[i]
                .iter()
                .map(|s| format!("{:?}", s))
                .collect();
            let mut b: Vec<String> = st.train_streams[i]
                .iter()
                .map(|s| format!("{:?}", s))
                .collect();
            assert_ne!(a, b, "client {i}: static stream should differ in order");
            a.sort();
            b.sort();
            assert_eq!(a, b, "client {i}: multisets differ");
        }
    }

    #[test]
    fn round_chunks_partition_the_stream() {
        let cfg = small_cfg();
        let sc = generate_scenario(&cfg, 1).unwrap();
        for i in 0..cfg.num_clients {
            let mut total = 0;
            for r in 0..cfg.rounds {
                total += sc.round_chunk(i, r).len();
            }
            assert_eq!(total, sc.train_streams[i].len());
        }
    }

    #[test]
    fn unseen_tasks_are_disjoint_from_client_tasks() {
        let cfg = small_cfg();
        let sc = generate_scenario(&cfg, 2).unwrap();
        for u in &sc.unseen_tasks {
            for tasks in &sc.client_tasks {
                for t in tasks {
                    assert_ne!(u.task_id, t.task_id);
                    // familiar family, but a rotation no client ever saw
                    if u.cluster_id == t.cluster_id {
                        assert!(u.rotation_angle >= cfg.within_cluster_rotation);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_is_shared_and_sized() {
        let cfg = small_cfg();
        let sc = generate_scenario(&cfg, 2).unwrap();
        let probe = sc.probe_model();
        let (d_in, d_out) = *probe.spec.widths.last().unwrap();
        assert_eq!(sc.sanitization.mask.len(), d_in * d_out);
        let expect = (cfg.hyper.n_s * (d_in * d_out) as f64).round() as usize;
        assert_eq!(sc.sanitization.popcount(), expect);
    }

    #[test]
    fn within_cluster_probe_gradients_more_similar_than_cross() {
        // 20-seed majority: mean within-cluster probe cosine beats cross.
        let mut wins = 0;
        for seed in 0..20u64 {
            let mut cfg = small_cfg();
            cfg.samples_per_task = 64;
            let sc = generate_scenario(&cfg, 1000 + seed).unwrap();
            let probe = sc.probe_model();
            // one probe gradient per client over its first task's samples
            let grads: Vec<crate::linalg::Vector> = (0..cfg.num_clients)
                .map(|i| {
                    let samples = &sc.train_streams[i][..64];
                    let batch = samples_to_batch(samples, cfg.input_dim);
                    last_layer_gradient(probe, &batch).unwrap()
                })
                .collect();
            let mut within = Vec::new();
            let mut cross = Vec::new();
            for i in 0..cfg.num_clients {
                for j in (i + 1)..cfg.num_clients {
                    let c = crate::linalg::cosine(&grads[i], &grads[j]).unwrap().value;
                    if sc.client_clusters[i] == sc.client_clusters[j] {
                        within.push(c);
                    } else {
                        cross.push(c);
                    }
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            if mean(&within) > mean(&cross) {
                wins += 1;
            }
        }
        assert!(wins >= 15, "within-cluster similarity won in {wins}/20 seeds");
    }
}
