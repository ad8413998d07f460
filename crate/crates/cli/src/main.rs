//! Operator surface for the simulator.
//!
//! Subcommands:
//!   generate  build a scenario artifact (models, data, schedules) from a config
//!   align     one-shot cross-architecture adapter alignment, checkpointed
//!   run       execute methods over a scenario and write metric artifacts
//!   check     self-contained property suites (theorem1|theorem2|gradients|alignment|rela)
//!
//! Exit codes: 0 success, 1 property/runtime failure, 2 usage error.

use fedmosaic_core::adapter::AdapterSet;
use fedmosaic_core::align::{align_all, AlignmentConfig};
use fedmosaic_core::bench::{
    generate_scenario, run_seeded, Method, MetricsTrace, RunOutput, Scenario, ScenarioConfig,
};
use fedmosaic_core::checkpoint::{load_adapter_set, save_adapter_set};
use fedmosaic_core::checks;
use fedmosaic_core::par::ExecMode;
use fedmosaic_core::rng::fnv1a64;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const USAGE: &str = "\
usage: fedmosaic <command> [flags]

commands:
  generate  --config <file> [--seed <n>] --out <dir> [--set key=value ...]
  align     --scenario <dir> [--force]
  run       --scenario <dir> --methods <m1,m2,..> [--seed <n>] --out <dir> [--set key=value ...]
  check     --suite <theorem1|theorem2|gradients|alignment|rela>

methods: sft, vanilla_equal, fedmosaic
";

/// Hyperparameters that may change after a scenario is generated; everything
/// else shapes the data or models and needs a regenerate.
const RUN_PHASE_KEYS: &[&str] = &[
    "tau",
    "alpha",
    "mu",
    "f",
    "lr_pq",
    "lr_other",
    "batch_size",
    "local_steps",
    "momentum",
    "rounds",
    "eval_interval",
];

struct UsageError(String);

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(code) => code,
        Err(UsageError(msg)) => {
            eprintln!("error: {msg}");
            eprintln!();
            eprint!("{USAGE}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(args: &[String]) -> Result<ExitCode, UsageError> {
    let Some(command) = args.first() else {
        return Err(UsageError("missing command".into()));
    };
    let flags = parse_flags(&args[1..])?;
    match command.as_str() {
        "generate" => cmd_generate(flags),
        "align" => cmd_align(flags),
        "run" => cmd_run(flags),
        "check" => cmd_check(flags),
        other => Err(UsageError(format!("unknown command `{other}`"))),
    }
}

#[derive(Default)]
struct Flags {
    config: Option<PathBuf>,
    scenario: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    methods: Option<String>,
    suite: Option<String>,
    force: bool,
    sets: Vec<(String, String)>,
}

fn parse_flags(args: &[String]) -> Result<Flags, UsageError> {
    let mut flags = Flags::default();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let mut value = |name: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| UsageError(format!("flag {name} needs a value")))
        };
        match arg.as_str() {
            "--config" => flags.config = Some(PathBuf::from(value("--config")?)),
            "--scenario" => flags.scenario = Some(PathBuf::from(value("--scenario")?)),
            "--out" => flags.out = Some(PathBuf::from(value("--out")?)),
            "--seed" => {
                let v = value("--seed")?;
                flags.seed = Some(
                    v.parse()
                        .map_err(|_| UsageError(format!("--seed expects an integer, got `{v}`")))?,
                );
            }
            "--methods" => flags.methods = Some(value("--methods")?),
            "--suite" => flags.suite = Some(value("--suite")?),
            "--force" => flags.force = true,
            "--set" => {
                let kv = value("--set")?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| UsageError(format!("--set expects key=value, got `{kv}`")))?;
                flags.sets.push((k.to_string(), v.to_string()));
            }
            other => return Err(UsageError(format!("unknown flag `{other}`"))),
        }
    }
    Ok(flags)
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

// ---------------------------------------------------------------- generate

fn cmd_generate(flags: Flags) -> Result<ExitCode, UsageError> {
    let config_path = flags
        .config
        .ok_or_else(|| UsageError("generate needs --config".into()))?;
    let out = flags
        .out
        .ok_or_else(|| UsageError("generate needs --out".into()))?;
    let seed = flags.seed.unwrap_or(0);

    let text = match std::fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) => return Ok(fail(format!("{}: {e}", config_path.display()))),
    };
    // serde_json errors carry line/column anchors
    let mut config: ScenarioConfig = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", config_path.display());
            return Ok(ExitCode::from(2));
        }
    };
    for (k, v) in &flags.sets {
        if let Err(e) = config.apply_override(k, v) {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
    }
    if let Err(e) = config.validate() {
        eprintln!("error: {e}");
        return Ok(ExitCode::from(2));
    }

    let scenario = match generate_scenario(&config, seed) {
        Ok(s) => s,
        Err(e) => return Ok(fail(e)),
    };
    if let Err(e) = std::fs::create_dir_all(&out) {
        return Ok(fail(e));
    }
    let path = out.join("scenario.json");
    let json = match serde_json::to_vec(&scenario) {
        Ok(j) => j,
        Err(e) => return Ok(fail(e)),
    };
    if let Err(e) = std::fs::write(&path, &json) {
        return Ok(fail(e));
    }
    println!("scenario written to {}", path.display());
    println!("fingerprint {}", scenario.fingerprint());
    Ok(ExitCode::SUCCESS)
}

// ------------------------------------------------------------------- align

fn load_scenario(dir: &Path) -> Result<Scenario, String> {
    let path = dir.join("scenario.json");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn checkpoint_path(dir: &Path, type_id: &str) -> PathBuf {
    dir.join("checkpoints").join(format!("{type_id}.adapters"))
}

fn cmd_align(flags: Flags) -> Result<ExitCode, UsageError> {
    let dir = flags
        .scenario
        .ok_or_else(|| UsageError("align needs --scenario".into()))?;
    let scenario = match load_scenario(&dir) {
        Ok(s) => s,
        Err(e) => return Ok(fail(e)),
    };

    let existing: Vec<PathBuf> = scenario
        .model_specs
        .iter()
        .map(|s| checkpoint_path(&dir, &s.model_type_id))
        .filter(|p| p.exists())
        .collect();
    if !existing.is_empty() && !flags.force {
        println!(
            "checkpoints already present ({} files); skipping alignment (use --force to redo)",
            existing.len()
        );
        return Ok(ExitCode::SUCCESS);
    }

    let models: Vec<_> = scenario
        .frozen_models
        .iter()
        .cloned()
        .zip(scenario.init_adapters.iter().cloned())
        .collect();
    let cfg = AlignmentConfig {
        lambda: scenario.config.hyper.lambda,
        lr: scenario.config.hyper.align_lr,
        epochs: scenario.config.hyper.align_epochs,
        public_batch_size: scenario.config.hyper.align_batch_size,
        ..Default::default()
    };
    let (aligned, report) = match align_all(&models, &scenario.public_data, &cfg) {
        Ok(r) => r,
        Err(e) => return Ok(fail(e)),
    };

    if let Err(e) = std::fs::create_dir_all(dir.join("checkpoints")) {
        return Ok(fail(e));
    }
    for (spec, set) in scenario.model_specs.iter().zip(&aligned) {
        let path = checkpoint_path(&dir, &spec.model_type_id);
        if let Err(e) = save_adapter_set(&path, set, &spec.model_type_id) {
            return Ok(fail(e));
        }
    }
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Err(e) = std::fs::write(dir.join("alignment_report.json"), &report_json) {
        return Ok(fail(e));
    }

    println!("pivot type: {}", report.pivot_type_id);
    for ty in &report.types {
        for b in &ty.blocks {
            println!(
                "{} block {} (layer {} -> {}): A-feature gap {:.4} -> {:.4}, B-path CKA {:.3} -> {:.3}",
                ty.model_type_id,
                b.block,
                b.pivot_layer,
                b.other_layer,
                b.pre_gap,
                b.post_gap,
                b.pre_b_cka,
                b.post_b_cka
            );
        }
    }
    println!("checkpoints written to {}", dir.join("checkpoints").display());
    Ok(ExitCode::SUCCESS)
}

// --------------------------------------------------------------------- run

fn cmd_run(flags: Flags) -> Result<ExitCode, UsageError> {
    let dir = flags
        .scenario
        .ok_or_else(|| UsageError("run needs --scenario".into()))?;
    let out = flags
        .out
        .ok_or_else(|| UsageError("run needs --out".into()))?;
    let methods_arg = flags
        .methods
        .ok_or_else(|| UsageError("run needs --methods".into()))?;
    let mut methods = Vec::new();
    for name in methods_arg.split(',') {
        match Method::parse(name.trim()) {
            Ok(m) => methods.push(m),
            Err(e) => return Err(UsageError(e.to_string())),
        }
    }

    let mut scenario = match load_scenario(&dir) {
        Ok(s) => s,
        Err(e) => return Ok(fail(e)),
    };
    for (k, v) in &flags.sets {
        if !RUN_PHASE_KEYS.contains(&k.as_str()) {
            eprintln!(
                "error: `{k}` shapes the generated data or models; regenerate the scenario instead"
            );
            return Ok(ExitCode::from(2));
        }
        if let Err(e) = scenario.config.apply_override(k, v) {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
        if k == "mu" {
            scenario.sanitization.noise_scale = scenario.config.hyper.mu;
        }
    }
    let run_seed = flags.seed.unwrap_or(scenario.master_seed);

    // Initial adapters: aligned checkpoints when present, fresh init
    // otherwise. Federated methods across heterogeneous types require the
    // checkpoints; sft does not.
    let mut aligned: Vec<AdapterSet> = Vec::with_capacity(scenario.model_specs.len());
    let mut have_checkpoints = true;
    for (idx, spec) in scenario.model_specs.iter().enumerate() {
        let path = checkpoint_path(&dir, &spec.model_type_id);
        if path.exists() {
            match load_adapter_set(&path) {
                Ok((set, _)) => aligned.push(set),
                Err(e) => return Ok(fail(format!("{}: {e}", path.display()))),
            }
        } else {
            have_checkpoints = false;
            aligned.push(scenario.init_adapters[idx].clone());
        }
    }
    let heterogeneous = scenario.model_specs.len() > 1;
    if heterogeneous && !have_checkpoints && methods.iter().any(|m| !matches!(m, Method::Sft)) {
        return Ok(fail(
            "federated methods on heterogeneous model types need aligned checkpoints; run `fedmosaic align` first",
        ));
    }

    if let Err(e) = std::fs::create_dir_all(&out) {
        return Ok(fail(e));
    }

    let mut traces: Vec<MetricsTrace> = Vec::new();
    for method in &methods {
        let output = match run_seeded(&scenario, &aligned, *method, ExecMode::default(), run_seed)
        {
            Ok(o) => o,
            Err(e) => return Ok(fail(e)),
        };
        // flush this method's artifacts before starting the next
        if let Err(e) = write_method_artifacts(&out, &scenario, &output) {
            return Ok(fail(e));
        }
        println!(
            "{}: self A_last {:.4} / A_AUC {:.4}, others A_last {:.4} / A_AUC {:.4}",
            output.trace.method,
            output.trace.self_a_last,
            output.trace.self_a_auc,
            output.trace.others_a_last,
            output.trace.others_a_auc
        );
        traces.push(output.trace);
    }

    let table = comparison_table(&traces);
    if let Err(e) = std::fs::write(out.join("comparison.txt"), &table) {
        return Ok(fail(e));
    }
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

fn write_method_artifacts(
    out: &Path,
    scenario: &Scenario,
    output: &RunOutput,
) -> Result<(), fedmosaic_core::Error> {
    let method = &output.trace.method;
    std::fs::write(out.join(format!("trace_{method}.csv")), output.trace.to_csv())?;

    let config_json = serde_json::to_string(&scenario.config)?;
    let summary = serde_json::json!({
        "method": method,
        "master_seed": output.trace.master_seed,
        "scenario_fingerprint": output.trace.scenario_fingerprint,
        "config_hash": format!("{:016x}", fnv1a64(config_json.as_bytes())),
        "self_a_last": output.trace.self_a_last,
        "self_a_auc": output.trace.self_a_auc,
        "others_a_last": output.trace.others_a_last,
        "others_a_auc": output.trace.others_a_auc,
        "weight_snapshots": output.weight_snapshots,
    });
    std::fs::write(
        out.join(format!("summary_{method}.json")),
        serde_json::to_string_pretty(&summary)?,
    )?;

    let mut rounds = String::new();
    for rec in &output.round_records {
        let _ = writeln!(rounds, "{}", serde_json::to_string(rec)?);
    }
    std::fs::write(out.join(format!("rounds_{method}.jsonl")), rounds)?;

    // line-delimited per-step client log: step, loss, probe marker
    let mut clients = String::new();
    for rec in &output.client_logs {
        for (step, loss) in rec.losses.iter().enumerate() {
            let probe = rec.probe_steps.contains(&step);
            let _ = writeln!(
                clients,
                "{}",
                serde_json::json!({
                    "client": rec.client_id,
                    "round": rec.round,
                    "step": step,
                    "loss": loss,
                    "probe": probe,
                })
            );
        }
    }
    std::fs::write(out.join(format!("clients_{method}.jsonl")), clients)?;
    Ok(())
}

fn comparison_table(traces: &[MetricsTrace]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>12} {:>14} {:>14}",
        "method", "self A_last", "self A_AUC", "others A_last", "others A_AUC"
    );
    for t in traces {
        let _ = writeln!(
            out,
            "{:<16} {:>12.4} {:>12.4} {:>14.4} {:>14.4}",
            t.method, t.self_a_last, t.self_a_auc, t.others_a_last, t.others_a_auc
        );
    }
    out
}

// ------------------------------------------------------------------- check

fn cmd_check(flags: Flags) -> Result<ExitCode, UsageError> {
    let suite = flags
        .suite
        .ok_or_else(|| UsageError("check needs --suite".into()))?;
    let report = match checks::run_suite(&suite, ExecMode::default()) {
        Ok(r) => r,
        Err(e) => return Err(UsageError(e.to_string())),
    };
    print!("{}", report.render_text());
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
