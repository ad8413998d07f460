//! Experiment execution: the federated round loop for each method, the
//! N x N Self/Others evaluation grid, metric assembly, and fast adaptation
//! on unseen tasks.

use super::Scenario;
use crate::adapter::{AdapterSet, GateParams};
use crate::client::{run_round, ClientState, Sample, StreamConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{forward, Batch, ForwardMode, FrozenModel};
use crate::par::{map_indexed, ExecMode};
use crate::rng::stream_rng;
use crate::server::{
    aggregate, aggregate_equal, aggregation_weights, relevance_matrix, round_record,
    RelevanceState, RoundRecord,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sft,
    VanillaEqual,
    Fedmosaic,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "sft" => Ok(Method::Sft),
            "vanilla_equal" => Ok(Method::VanillaEqual),
            "fedmosaic" => Ok(Method::Fedmosaic),
            other => Err(Error::invalid(
                "method",
                format!("unknown method `{other}` (expected sft|vanilla_equal|fedmosaic)"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::VanillaEqual => "vanilla_equal",
            Method::Fedmosaic => "fedmosaic",
        }
    }
}

/// Accuracy of the gated dual-adapter model on a test batch.
///
/// `candidates` restricts the argmax to the test task's own answer set,
/// mirroring per-task answer formats (a task is scored within its own
/// label space); `None` ranks all classes.
pub fn evaluate_on(
    model: &FrozenModel,
    local: &AdapterSet,
    global: &AdapterSet,
    gates: &GateParams,
    testset: &Batch,
    candidates: Option<&[usize]>,
) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Empty {
            what: "testset".into(),
        });
    }
    if let Some(cands) = candidates {
        if cands.is_empty() {
            return Err(Error::Empty {
                what: "candidate classes".into(),
            });
        }
    }
    let (logits, _) = forward(
        model,
        local,
        global,
        gates,
        &testset.inputs,
        ForwardMode::GatedDual,
    )?;
    let mut correct = 0usize;
    for (i, &label) in testset.labels.iter().enumerate() {
        let row = logits.row(i);
        let argmax = match candidates {
            None => {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            }
            Some(cands) => {
                *cands
                    .iter()
                    .max_by(|&&a, &&b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap()
            }
        };
        if argmax == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / testset.len() as f64)
}

/// Accuracy over the full class range.
pub fn evaluate(
    model: &FrozenModel,
    local: &AdapterSet,
    global: &AdapterSet,
    gates: &GateParams,
    testset: &Batch,
) -> Result<f64> {
    evaluate_on(model, local, global, gates, testset, None)
}

/// A_last and A_AUC of one accuracy-vs-checkpoint curve. A_AUC is the mean
/// of the checkpoint accuracies (uniform spacing).
pub fn metrics(curve: &[f64]) -> Result<(f64, f64)> {
    if curve.is_empty() {
        return Err(Error::Empty {
            what: "metrics trace".into(),
        });
    }
    let a_last = *curve.last().unwrap();
    let a_auc = curve.iter().sum::<f64>() / curve.len() as f64;
    Ok((a_last, a_auc))
}

/// N x N accuracy matrix at one evaluation round: entry (i, j) is client i's
/// model on client j's test tasks (mean over j's per-task sets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCheckpoint {
    pub round: usize,
    pub acc: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub method: String,
    pub master_seed: u64,
    pub scenario_fingerprint: String,
    pub checkpoints: Vec<EvalCheckpoint>,
    pub self_a_last: f64,
    pub self_a_auc: f64,
    pub others_a_last: f64,
    pub others_a_auc: f64,
}

impl MetricsTrace {
    /// Per-client Self curve (diagonal) over checkpoints.
    pub fn self_curve(&self, client: usize) -> Vec<f64> {
        self.checkpoints
            .iter()
            .map(|c| c.acc[client][client])
            .collect()
    }

    /// Per-client Others curve (mean off-diagonal of the client's row).
    pub fn others_curve(&self, client: usize) -> Vec<f64> {
        let n = self.checkpoints[0].acc.len();
        self.checkpoints
            .iter()
            .map(|c| {
                let row = &c.acc[client];
                let sum: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != client)
                    .map(|(_, v)| v)
                    .sum();
                sum / (n - 1) as f64
            })
            .collect()
    }

    /// Machine-readable table: checkpoint,evaluator,target,accuracy.
    /// The leading comment line pins provenance for reproducibility checks.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# method={} master_seed={} scenario={}\n",
            self.method, self.master_seed, self.scenario_fingerprint
        ));
        out.push_str("checkpoint,evaluator,target,accuracy\n");
        for cp in &self.checkpoints {
            for (i, row) in cp.acc.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out.push_str(&format!("{},{},{},{}\n", cp.round, i, j, v));
                }
            }
        }
        out
    }
}

/// Per-client, per-round training record; expands to line-delimited logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientLogRecord {
    pub client_id: usize,
    pub round: usize,
    pub losses: Vec<f64>,
    pub probe_steps: Vec<usize>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub trace: MetricsTrace,
    pub round_records: Vec<RoundRecord>,
    pub client_logs: Vec<ClientLogRecord>,
    /// (round, W) at every evaluation checkpoint, for weight heatmaps.
    pub weight_snapshots: Vec<(usize, Vec<Vec<f64>>)>,
    pub final_states: Vec<ClientState>,
}

fn stream_config(scenario: &Scenario) -> StreamConfig {
    let h = &scenario.config.hyper;
    StreamConfig {
        batch_size: h.batch_size,
        local_steps_per_round: h.local_steps,
        probe_every: h.f,
        alpha: h.alpha,
        lr_pq: h.lr_pq,
        lr_other: h.lr_other,
        momentum: h.momentum,
    }
}

/// Execute one method over the scenario. `aligned` holds one adapter set per
/// model type (the shared initialization); every client of a type starts
/// from a clone of its set. Fully deterministic for a fixed scenario,
/// including under parallel execution.
pub fn run(
    scenario: &Scenario,
    aligned: &[AdapterSet],
    method: Method,
    mode: ExecMode,
) -> Result<RunOutput> {
    run_seeded(scenario, aligned, method, mode, scenario.master_seed)
}

/// Like [`run`] but with an explicit seed for the run-phase randomness
/// (batch order, sanitization noise); the data streams stay as generated.
pub fn run_seeded(
    scenario: &Scenario,
    aligned: &[AdapterSet],
    method: Method,
    mode: ExecMode,
    run_seed: u64,
) -> Result<RunOutput> {
    let cfg = &scenario.config;
    let n = cfg.num_clients;
    if aligned.len() != scenario.model_specs.len() {
        return Err(Error::dims("run aligned sets", scenario.model_specs.len(), aligned.len()));
    }
    let stream_cfg = stream_config(scenario);
    stream_cfg.validate()?;
    let probe = scenario.probe_model();
    let (d_in, d_out) = *probe.spec.widths.last().unwrap();
    let probe_dim = d_in * d_out;

    let mut states: Vec<ClientState> = (0..n)
        .map(|i| {
            let ty = scenario.client_model_types[i];
            ClientState::new(
                i,
                &scenario.model_specs[ty].model_type_id,
                aligned[ty].clone(),
                probe_dim,
                stream_rng(run_seed, "batch", i as u64),
                stream_rng(run_seed, "noise", i as u64),
            )
        })
        .collect();

    let mut round_records = Vec::new();
    let mut client_logs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut weight_snapshots = Vec::new();

    for round in 0..cfg.rounds {
        // Client side: independent, order-preserving parallel map.
        let moved: Vec<ClientState> = std::mem::take(&mut states);
        let results = map_indexed(mode, moved, |i, mut st| {
            let chunk: Vec<Sample> = scenario.round_chunk(i, round).to_vec();
            let ty = scenario.client_model_types[i];
            let out = run_round(
                &mut st,
                &scenario.frozen_models[ty],
                probe,
                &chunk,
                &stream_cfg,
                &scenario.sanitization,
            );
            (st, out)
        });
        let mut payloads = Vec::with_capacity(n);
        for (i, (st, out)) in results.into_iter().enumerate() {
            let (losses, payload) = out?;
            let probe_steps: Vec<usize> = (0..stream_cfg.local_steps_per_round)
                .filter(|s| s % stream_cfg.probe_every == 0)
                .collect();
            client_logs.push(ClientLogRecord {
                client_id: i,
                round,
                losses,
                probe_steps,
            });
            payloads.push(payload);
            states.push(st);
        }

        // Server side: the round barrier.
        let mut current_w: Option<Vec<Vec<f64>>> = None;
        match method {
            Method::Sft => {}
            Method::VanillaEqual | Method::Fedmosaic => {
                let gradients: Vec<Option<crate::linalg::Vector>> = payloads
                    .iter()
                    .map(|p| p.sanitized_gradient.clone())
                    .collect();
                let (s, degenerate) = relevance_matrix(&gradients)?;
                let w = match method {
                    Method::Fedmosaic => aggregation_weights(&s, cfg.hyper.tau, &degenerate)?,
                    _ => Matrix::from_fn(n, n, |_, _| 1.0 / n as f64),
                };
                let dispatch = match method {
                    Method::Fedmosaic => aggregate(&payloads, &w)?,
                    _ => aggregate_equal(&payloads)?,
                };
                let rel = RelevanceState {
                    s,
                    w: w.clone(),
                    tau: cfg.hyper.tau,
                    degenerate,
                };
                round_records.push(round_record(round, &rel, &dispatch));
                current_w = Some((0..n).map(|i| w.row(i).to_vec()).collect());
                for (st, g) in states.iter_mut().zip(dispatch.per_client) {
                    st.receive_global(g)?;
                }
            }
        }

        // Evaluation checkpoint.
        if (round + 1) % cfg.eval_interval == 0 {
            let acc = eval_grid(scenario, &states, mode)?;
            checkpoints.push(EvalCheckpoint {
                round: round + 1,
                acc,
            });
            if let Some(w) = current_w {
                weight_snapshots.push((round + 1, w));
            }
        }
    }

    let trace = assemble_trace(scenario, method, checkpoints, run_seed)?;
    Ok(RunOutput {
        trace,
        round_records,
        client_logs,
        weight_snapshots,
        final_states: states,
    })
}

fn eval_grid(
    scenario: &Scenario,
    states: &[ClientState],
    mode: ExecMode,
) -> Result<Vec<Vec<f64>>> {
    let n = states.len();
    let rows = map_indexed(mode, (0..n).collect::<Vec<_>>(), |_, i| -> Result<Vec<f64>> {
        let ty = scenario.client_model_types[i];
        let model = &scenario.frozen_models[ty];
        let st = &states[i];
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            let mut acc = 0.0;
            for (t, test) in scenario.test_sets[j].iter().enumerate() {
                // each task scores within its own answer set
                let cands = &scenario.client_tasks[j][t].active_classes;
                acc += evaluate_on(
                    model,
                    &st.local_adapters,
                    &st.global_adapters,
                    &st.gates,
                    test,
                    Some(cands),
                )?;
            }
            row.push(acc / scenario.test_sets[j].len() as f64);
        }
        Ok(row)
    });
    rows.into_iter().collect()
}

fn assemble_trace(
    scenario: &Scenario,
    method: Method,
    checkpoints: Vec<EvalCheckpoint>,
    run_seed: u64,
) -> Result<MetricsTrace> {
    let n = scenario.num_clients();
    let mut trace = MetricsTrace {
        method: method.name().to_string(),
        master_seed: run_seed,
        scenario_fingerprint: scenario.fingerprint(),
        checkpoints,
        self_a_last: 0.0,
        self_a_auc: 0.0,
        others_a_last: 0.0,
        others_a_auc: 0.0,
    };
    let mut sl = 0.0;
    let mut sa = 0.0;
    let mut ol = 0.0;
    let mut oa = 0.0;
    for i in 0..n {
        let (l, a) = metrics(&trace.self_curve(i))?;
        sl += l;
        sa += a;
        let (l, a) = metrics(&trace.others_curve(i))?;
        ol += l;
        oa += a;
    }
    trace.self_a_last = sl / n as f64;
    trace.self_a_auc = sa / n as f64;
    trace.others_a_last = ol / n as f64;
    trace.others_a_auc = oa / n as f64;
    Ok(trace)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FastAdaptationCurve {
    pub label: String,
    /// (step, accuracy); step 0 is the zero-shot accuracy of the init.
    pub points: Vec<(usize, f64)>,
}

/// Fine-tune a fresh client on an unseen task from the given initialization
/// (used for both local and frozen-global adapters), recording accuracy
/// every `record_every` steps.
#[allow(clippy::too_many_arguments)]
pub fn fast_adaptation(
    label: &str,
    model: &FrozenModel,
    init: &AdapterSet,
    train: &[Sample],
    test: &Batch,
    steps: usize,
    record_every: usize,
    stream_cfg: &StreamConfig,
    seed: u64,
) -> Result<FastAdaptationCurve> {
    if train.is_empty() {
        return Err(Error::Empty {
            what: "unseen-task train set".into(),
        });
    }
    let probe = model; // probe is irrelevant here; probes still fire on schedule
    let (d_in, d_out) = *model.spec.widths.last().unwrap();
    let mut state = ClientState::new(
        0,
        &model.spec.model_type_id,
        init.clone(),
        d_in * d_out,
        stream_rng(seed, "fast-batch", 0),
        stream_rng(seed, "fast-noise", 0),
    );
    for s in train {
        state.observe(s.clone());
    }
    let mut points = Vec::new();
    points.push((
        0usize,
        evaluate(model, &state.local_adapters, &state.global_adapters, &state.gates, test)?,
    ));
    for step in 0..steps {
        crate::client::local_step(&mut state, model, probe, step + 1, stream_cfg)?;
        if (step + 1) % record_every == 0 || step + 1 == steps {
            points.push((
                step + 1,
                evaluate(model, &state.local_adapters, &state.global_adapters, &state.gates, test)?,
            ));
        }
    }
    Ok(FastAdaptationCurve {
        label: label.to_string(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_scenario, ScenarioConfig};

    fn tiny_scenario(seed: u64) -> Scenario {
        let mut cfg = ScenarioConfig::default();
        cfg.num_clients = 3;
        cfg.num_clusters = 1;
        cfg.model_types.truncate(1);
        cfg.model_types[0].depth = 4;
        cfg.model_types[0].hidden_width = 16;
        cfg.samples_per_task = 30;
        cfg.tasks_per_client = 2;
        cfg.test_samples_per_task = 24;
        cfg.rounds = 4;
        cfg.eval_interval = 2;
        cfg.public_samples = 32;
        cfg.num_unseen_tasks = 1;
        cfg.unseen_train_samples = 64;
        cfg.unseen_test_samples = 64;
        cfg.hyper.local_steps = 15;
        cfg.hyper.n_b = 2;
        cfg.hyper.rank = 4;
        cfg.hyper.f = 5;
        generate_scenario(&cfg, seed).unwrap()
    }

    #[test]
    fn metrics_spec_cases() {
        let (last, auc) = metrics(&[0.5, 0.6, 0.7]).unwrap();
        assert!((last - 0.7).abs() < 1e-15);
        assert!((auc - 0.6).abs() < 1e-12);
        let (last, auc) = metrics(&[0.42]).unwrap();
        assert_eq!(last, auc);
        let (last, auc) = metrics(&[0.3, 0.3, 0.3, 0.3]).unwrap();
        assert!((last - 0.3).abs() < 1e-15);
        assert!((auc - 0.3).abs() < 1e-15);
        assert!(metrics(&[]).is_err());
    }

    #[test]
    fn evaluate_random_model_near_chance() {
        // untrained random logits: accuracy within a 3-sigma binomial bound
        // of 1/C on n = 1000 samples
        let sc = tiny_scenario(5);
        let ty = 0;
        let model = &sc.frozen_models[ty];
        let set = sc.init_adapters[ty].clone();
        let gates = GateParams::zeros(set.depth());
        // random-label test set: chance is exactly 1/C regardless of model
        let mut rng = stream_rng(99, "chance", 0);
        use rand::Rng;
        let n = 1000;
        let inputs = Matrix::from_fn(n, sc.config.input_dim, |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|_| rng.random_range(0..sc.config.num_classes)).collect();
        let test = Batch { inputs, labels };
        let acc = evaluate(model, &set, &set, &gates, &test).unwrap();
        let p = 1.0 / sc.config.num_classes as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (acc - p).abs() < 3.0 * sigma + 1e-9,
            "acc {acc} vs chance {p} (sigma {sigma})"
        );
    }

    #[test]
    fn run_is_reproducible_and_parallel_matches_sequential() {
        let sc = tiny_scenario(7);
        let aligned = sc.init_adapters.clone();
        let a = run(&sc, &aligned, Method::Fedmosaic, ExecMode::Sequential).unwrap();
        let b = run(&sc, &aligned, Method::Fedmosaic, ExecMode::Sequential).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        let c = run(&sc, &aligned, Method::Fedmosaic, ExecMode::default()).unwrap();
        assert_eq!(a.trace.to_csv(), c.trace.to_csv());
    }

    #[test]
    fn sft_never_updates_globals() {
        let sc = tiny_scenario(8);
        let aligned = sc.init_adapters.clone();
        let out = run(&sc, &aligned, Method::Sft, ExecMode::default()).unwrap();
        for st in &out.final_states {
            let ty = sc.client_model_types[st.client_id];
            assert_eq!(st.global_adapters, aligned[ty]);
        }
        assert!(out.round_records.is_empty());
    }

    #[test]
    fn federated_methods_dispatch_globals() {
        let sc = tiny_scenario(9);
        let aligned = sc.init_adapters.clone();
        let out = run(&sc, &aligned, Method::VanillaEqual, ExecMode::default()).unwrap();
        for st in &out.final_states {
            let ty = sc.client_model_types[st.client_id];
            assert_ne!(st.global_adapters, aligned[ty]);
        }
        assert_eq!(out.round_records.len(), sc.config.rounds);
        // every W row is stochastic in every round
        for rec in &out.round_records {
            for row in &rec.w {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn identical_clients_get_uniform_rela_weights() {
        // Fully symmetric clients: same data, same model, same batch draws,
        // mu = 0. Every round's RELA weight matrix must be exactly uniform.
        let mut sc = tiny_scenario(10);
        sc.config.hyper.mu = 0.0;
        sc.sanitization.noise_scale = 0.0;
        let n = sc.config.num_clients;
        let stream = sc.train_streams[0].clone();
        let stream_cfg = stream_config(&sc);
        let probe = sc.probe_model().clone();
        let model = sc.frozen_models[0].clone();
        let (d_in, d_out) = *probe.spec.widths.last().unwrap();
        let mut states: Vec<ClientState> = (0..n)
            .map(|i| {
                ClientState::new(
                    i,
                    &model.spec.model_type_id,
                    sc.init_adapters[0].clone(),
                    d_in * d_out,
                    stream_rng(42, "batch", 0), // identical draws for everyone
                    stream_rng(42, "noise", 0),
                )
            })
            .collect();
        for round in 0..sc.config.rounds {
            let mut payloads = Vec::new();
            for st in states.iter_mut() {
                let chunk = {
                    let nloc = stream.len();
                    let r = sc.config.rounds;
                    let base = nloc / r;
                    let extra = nloc % r;
                    let start = round * base + round.min(extra);
                    let len = base + usize::from(round < extra);
                    stream[start..(start + len).min(nloc)].to_vec()
                };
                let (_, payload) =
                    run_round(st, &model, &probe, &chunk, &stream_cfg, &sc.sanitization).unwrap();
                payloads.push(payload);
            }
            let gradients: Vec<Option<crate::linalg::Vector>> = payloads
                .iter()
                .map(|p| p.sanitized_gradient.clone())
                .collect();
            let (s, degenerate) = relevance_matrix(&gradients).unwrap();
            let w = aggregation_weights(&s, sc.config.hyper.tau, &degenerate).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert!(
                        (w.at(i, j) - 1.0 / n as f64).abs() < 1e-9,
                        "round {round}: non-uniform {}",
                        w.at(i, j)
                    );
                }
            }
            let dispatch = aggregate(&payloads, &w).unwrap();
            for (st, g) in states.iter_mut().zip(dispatch.per_client) {
                st.receive_global(g).unwrap();
            }
        }
    }

    #[test]
    fn checkpoints_cover_grid_and_are_in_unit_interval() {
        let sc = tiny_scenario(11);
        let aligned = sc.init_adapters.clone();
        let out = run(&sc, &aligned, Method::Fedmosaic, ExecMode::default()).unwrap();
        assert_eq!(out.trace.checkpoints.len(), 2);
        for cp in &out.trace.checkpoints {
            assert_eq!(cp.acc.len(), 3);
            for row in &cp.acc {
                assert_eq!(row.len(), 3);
                for &v in row {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn fast_adaptation_curves() {
        let sc = tiny_scenario(12);
        let ty = 0;
        let init = sc.init_adapters[ty].clone();
        let cfgs = stream_config(&sc);
        let curve = fast_adaptation(
            "random_init",
            &sc.frozen_models[ty],
            &init,
            &sc.unseen_train[0],
            &sc.unseen_test[0],
            60,
            20,
            &cfgs,
            3,
        )
        .unwrap();
        assert_eq!(curve.points[0].0, 0);
        assert_eq!(curve.points.last().unwrap().0, 60);
        // learnable task: the final point should beat the zero-shot point
        assert!(
            curve.points.last().unwrap().1 >= curve.points[0].1,
            "no improvement: {:?}",
            curve.points
        );
    }
}
