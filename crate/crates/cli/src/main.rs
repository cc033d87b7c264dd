//! `defkv` command-line front end: trace generation, eviction planning,
//! fragility analysis, policy comparison, and micro-benchmarks.
//!
//! Exit codes: 0 success, 2 usage/validation error, 1 runtime failure.
//! With `--json-errors` failures go to stderr as one-line JSON.

use clap::{Args, Parser, Subcommand};
use defkv::aggregation::AggregationSpec;
use defkv::attention::ModelConfig;
use defkv::eval::{self, Criterion};
use defkv::policy::{build_plan, PolicyKind};
use defkv::synth::SyntheticRegime;
use defkv::traceio;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "defkv", version, about = "KV-cache eviction laboratory")]
struct Cli {
    /// Emit errors as single-line JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    /// JSON config file with the same keys as the flags; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic regime-shift trace (kind-1 DKVT).
    Gen(GenArgs),
    /// Build an eviction plan for a policy on a trace.
    Evict(EvictArgs),
    /// Per-step retained-importance ratios for observation criteria.
    Fragility(FragilityArgs),
    /// Policy x budget comparison table over a set of traces.
    Compare(CompareArgs),
    /// Micro-benchmark aggregation kernels and plan construction.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    q_heads: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    dh: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    shift_prob: Option<f64>,
    #[arg(long)]
    regimes: Option<usize>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvictArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    /// Aggregation ablation: `worst-only` or `fixed:THRESHOLD`.
    #[arg(long)]
    agg_ablation: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FragilityArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Comma-separated: single:J, mean, worst-only, defensive.
    #[arg(long)]
    criteria: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Glob over kind-1 DKVT files.
    #[arg(long)]
    traces: Option<String>,
    /// Comma-separated policy names; defaults to all.
    #[arg(long)]
    policies: Option<String>,
    /// Comma-separated budget fractions.
    #[arg(long)]
    budgets: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Optional values for every flag, loadable from `--config`. Unknown keys
/// are rejected.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    layers: Option<usize>,
    q_heads: Option<usize>,
    kv_heads: Option<usize>,
    dh: Option<usize>,
    prompt_len: Option<usize>,
    steps: Option<usize>,
    shift_prob: Option<f64>,
    regimes: Option<usize>,
    drift: Option<f64>,
    trace: Option<PathBuf>,
    policy: Option<String>,
    budget: Option<f64>,
    window: Option<usize>,
    kernel: Option<usize>,
    agg_ablation: Option<String>,
    layer: Option<usize>,
    criteria: Option<String>,
    threshold: Option<f64>,
    traces: Option<String>,
    policies: Option<String>,
    budgets: Option<String>,
    n: Option<usize>,
    m: Option<usize>,
    iters: Option<usize>,
    out: Option<PathBuf>,
}

enum CliError {
    /// Bad flags or invalid input values: exit 2.
    Usage(String),
    /// Failures during compute or I/O: exit 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json_errors = cli.json_errors;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json_errors {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": e.message(), "code": e.code() })
                );
            } else {
                eprintln!("error: {}", e.message());
            }
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("bad config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Gen(a) => cmd_gen(a, &cfg),
        Command::Evict(a) => cmd_evict(a, &cfg),
        Command::Fragility(a) => cmd_fragility(a, &cfg),
        Command::Compare(a) => cmd_compare(a, &cfg),
        Command::Bench(a) => cmd_bench(a, &cfg),
    }
}

fn require_out(flag: Option<PathBuf>, cfg: &FileConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.out.clone())
        .ok_or_else(|| usage("--out is required"))
}

fn cmd_gen(a: GenArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let q_heads = a.q_heads.or(cfg.q_heads).unwrap_or(8);
    let dh = a.dh.or(cfg.dh).unwrap_or(16);
    let model = ModelConfig {
        n_layers: a.layers.or(cfg.layers).unwrap_or(4),
        n_q_heads: q_heads,
        n_kv_heads: a.kv_heads.or(cfg.kv_heads).unwrap_or(2),
        d_h: dh,
        d_model: q_heads * dh,
        seed: a.seed.or(cfg.seed).unwrap_or(0),
    };
    let regime = SyntheticRegime {
        seed: model.seed,
        n_regimes: a.regimes.or(cfg.regimes).unwrap_or(6),
        shift_prob: a.shift_prob.or(cfg.shift_prob).unwrap_or(0.05),
        drift_scale: a.drift.or(cfg.drift).unwrap_or(0.3),
    };
    let prompt_len = a.prompt_len.or(cfg.prompt_len).unwrap_or(256);
    let steps = a.steps.or(cfg.steps).unwrap_or(128);
    let out = require_out(a.out, cfg)?;
    model.validate().map_err(usage)?;
    regime.validate().map_err(usage)?;
    let trace = defkv::gen_synthetic(&model, prompt_len, steps, &regime).map_err(usage)?;
    traceio::write_trace(&out, &trace).map_err(runtime)?;
    println!(
        "wrote {}: layers={} q_heads={} kv_heads={} d_h={} prompt={} steps={} seed={}",
        out.display(),
        trace.n_layers,
        trace.n_q_heads,
        trace.n_kv_heads,
        trace.d_h,
        trace.n_prompt,
        trace.n_steps,
        model.seed,
    );
    Ok(())
}

fn parse_budget(b: f64) -> Result<f64, CliError> {
    if !(b > 0.0 && b <= 1.0) {
        return Err(usage(format!("budget {b} outside (0, 1]")));
    }
    Ok(b)
}

fn parse_ablation(s: &str) -> Result<AggregationSpec, CliError> {
    if s == "worst-only" {
        return Ok(AggregationSpec::WorstCaseOnly);
    }
    if let Some(t) = s.strip_prefix("fixed:") {
        let thr: f64 = t
            .parse()
            .map_err(|_| usage(format!("bad fixed threshold `{t}`")))?;
        if !(thr.is_finite() && thr >= 0.0) {
            return Err(usage(format!("fixed threshold {thr} must be finite and >= 0")));
        }
        return Ok(AggregationSpec::FixedThreshold(thr));
    }
    Err(usage(format!(
        "unknown aggregation ablation `{s}`: expected worst-only or fixed:THRESHOLD"
    )))
}

fn load_trace(path: &Path) -> Result<defkv::Trace, CliError> {
    traceio::read_trace(path).map_err(|e| match e {
        traceio::TraceError::Io(io) => runtime(format!("{}: {io}", path.display())),
        other => usage(format!("{}: {other}", path.display())),
    })
}

fn cmd_evict(a: EvictArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let trace_path = a
        .trace
        .or_else(|| cfg.trace.clone())
        .ok_or_else(|| usage("--trace is required"))?;
    let policy_name = a
        .policy
        .or_else(|| cfg.policy.clone())
        .ok_or_else(|| usage("--policy is required"))?;
    let kind = PolicyKind::parse(&policy_name)
        .ok_or_else(|| usage(format!("unknown policy `{policy_name}`")))?;
    let budget = parse_budget(a.budget.or(cfg.budget).unwrap_or(0.2))?;
    let window = a.window.or(cfg.window).unwrap_or(32);
    let kernel = a.kernel.or(cfg.kernel).unwrap_or(5);
    let ablation = a
        .agg_ablation
        .or_else(|| cfg.agg_ablation.clone())
        .map(|s| parse_ablation(&s))
        .transpose()?;
    let out = require_out(a.out, cfg)?;
    let trace = load_trace(&trace_path)?;
    let plan = build_plan(&trace, kind, budget, window, kernel, ablation).map_err(usage)?;
    traceio::write_atomic(&out, plan.to_json().as_bytes()).map_err(runtime)?;
    let counts: Vec<String> = (0..trace.n_layers)
        .map(|l| format!("L{l}={}", plan.retained_count(l)))
        .collect();
    let note = if kind == PolicyKind::Streaming {
        " (window flag ignored for streaming)"
    } else {
        ""
    };
    println!(
        "plan {} budget={budget} retained per layer: {}{note}",
        plan.policy,
        counts.join(" ")
    );
    Ok(())
}

fn parse_criteria(s: &str) -> Result<Vec<Criterion>, CliError> {
    let list: Vec<Criterion> = s
        .split(',')
        .map(|part| {
            Criterion::parse(part.trim())
                .ok_or_else(|| usage(format!("unknown criterion `{}`", part.trim())))
        })
        .collect::<Result<_, _>>()?;
    if list.is_empty() {
        return Err(usage("empty criteria list"));
    }
    Ok(list)
}

fn cmd_fragility(a: FragilityArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let trace_path = a
        .trace
        .or_else(|| cfg.trace.clone())
        .ok_or_else(|| usage("--trace is required"))?;
    let budget = parse_budget(a.budget.or(cfg.budget).unwrap_or(0.5))?;
    let layer = a.layer.or(cfg.layer).unwrap_or(0);
    let window = a.window.or(cfg.window).unwrap_or(32);
    let threshold = a.threshold.or(cfg.threshold).unwrap_or(0.5);
    let criteria = parse_criteria(
        &a.criteria
            .or_else(|| cfg.criteria.clone())
            .unwrap_or_else(|| "single:16,mean,defensive".into()),
    )?;
    for c in &criteria {
        if let Criterion::SingleToken(j) = c {
            if *j == 0 || *j > window {
                return Err(usage(format!(
                    "criterion single:{j} outside observation window 1..={window}"
                )));
            }
        }
    }
    let out = require_out(a.out, cfg)?;
    let trace = load_trace(&trace_path)?;
    if layer >= trace.n_layers {
        return Err(usage(format!(
            "layer {layer} out of range for {} layers",
            trace.n_layers
        )));
    }
    let reports = eval::fragility_analysis(&trace, layer, budget, window, &criteria, threshold, true)
        .map_err(usage)?;

    let mut csv = String::from("step");
    for r in &reports {
        csv.push_str(&format!(",ratio_{}", r.criterion));
    }
    csv.push('\n');
    for step in 0..trace.n_steps {
        csv.push_str(&step.to_string());
        for r in &reports {
            csv.push_str(&format!(",{}", r.ratios[step]));
        }
        csv.push('\n');
    }
    traceio::write_atomic(&out, csv.as_bytes()).map_err(runtime)?;

    let sidecar: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "criterion": r.criterion,
                "min": r.min,
                "mean": r.mean,
                "outlier_count": r.outlier_count,
                "outlier_threshold": r.outlier_threshold,
                "zero_denominator_steps": r.zero_denominator_steps,
            })
        })
        .collect();
    let sidecar_path = out.with_extension("json");
    traceio::write_atomic(
        &sidecar_path,
        format!(
            "{}\n",
            serde_json::to_string_pretty(&serde_json::json!({
                "layer": layer,
                "budget": budget,
                "window": window,
                "reports": sidecar,
            }))
            .map_err(runtime)?
        )
        .as_bytes(),
    )
    .map_err(runtime)?;
    for r in &reports {
        println!(
            "{}: min={:.4} mean={:.4} outliers={}",
            r.criterion, r.min, r.mean, r.outlier_count
        );
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let pattern = a
        .traces
        .or_else(|| cfg.traces.clone())
        .ok_or_else(|| usage("--traces is required"))?;
    let mut paths: Vec<PathBuf> = glob::glob(&pattern)
        .map_err(|e| usage(format!("bad glob `{pattern}`: {e}")))?
        .collect::<Result<_, _>>()
        .map_err(runtime)?;
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("glob `{pattern}` matched no files")));
    }
    let policies: Vec<PolicyKind> = match a.policies.or_else(|| cfg.policies.clone()) {
        Some(list) => list
            .split(',')
            .map(|p| {
                PolicyKind::parse(p.trim()).ok_or_else(|| usage(format!("unknown policy `{}`", p.trim())))
            })
            .collect::<Result<_, _>>()?,
        None => PolicyKind::all().to_vec(),
    };
    let budgets: Vec<f64> = a
        .budgets
        .or_else(|| cfg.budgets.clone())
        .unwrap_or_else(|| "0.2,0.4".into())
        .split(',')
        .map(|b| {
            b.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("bad budget `{}`", b.trim())))
                .and_then(parse_budget)
        })
        .collect::<Result<_, _>>()?;
    let window = a.window.or(cfg.window).unwrap_or(32);
    let kernel = a.kernel.or(cfg.kernel).unwrap_or(5);
    let threshold = a.threshold.or(cfg.threshold).unwrap_or(0.5);
    let out = require_out(a.out, cfg)?;

    let traces: Vec<defkv::Trace> = paths
        .iter()
        .map(|p| load_trace(p))
        .collect::<Result<_, _>>()?;
    let rows = eval::compare_policies(&traces, &policies, &budgets, window, kernel, threshold)
        .map_err(usage)?;
    let mut csv = String::from("policy,budget,mean_ratio,worst_ratio,outliers,retained_total\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.policy, r.budget, r.mean_ratio, r.worst_ratio, r.outlier_count, r.retained_total
        ));
    }
    traceio::write_atomic(&out, csv.as_bytes()).map_err(runtime)?;
    println!(
        "compared {} policies x {} budgets over {} traces -> {}",
        policies.len(),
        budgets.len(),
        traces.len(),
        out.display()
    );
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn cmd_bench(a: BenchArgs, cfg: &FileConfig) -> Result<(), CliError> {
    use defkv::aggregation::{defensive_aggregate, mean_aggregate};
    use defkv::math::Matrix;
    use defkv::rng::SplitMix64;
    use defkv::scoring::ImportanceMatrix;
    use std::time::Instant;

    let n = a.n.or(cfg.n).unwrap_or(100_000);
    let m = a.m.or(cfg.m).unwrap_or(32);
    let iters = a.iters.or(cfg.iters).unwrap_or(50);
    if iters == 0 {
        return Err(usage("iters must be >= 1"));
    }
    if n == 0 || m == 0 {
        return Err(usage("n and m must be >= 1"));
    }
    let mut rng = SplitMix64::new(1);
    let im = ImportanceMatrix {
        layer: 0,
        head: 0,
        values: Matrix::from_vec(m, n, (0..m * n).map(|_| rng.uniform()).collect()),
    };
    let mut mean_times = Vec::with_capacity(iters);
    let mut def_times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let r = mean_aggregate(&im);
        mean_times.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(r);
        let t0 = Instant::now();
        let r = defensive_aggregate(&im);
        def_times.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(r);
    }

    // Plan construction on a small synthetic trace for context.
    let model = ModelConfig {
        n_layers: 2,
        d_model: 64,
        n_q_heads: 4,
        n_kv_heads: 2,
        d_h: 16,
        seed: 1,
    };
    let trace = defkv::gen_synthetic(&model, 128, 8, &SyntheticRegime::default()).map_err(runtime)?;
    let mut plan_times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let p = build_plan(&trace, PolicyKind::DefensiveKv, 0.5, 32, 5, None).map_err(runtime)?;
        plan_times.push(t0.elapsed().as_secs_f64());
        std::hint::black_box(p);
    }

    let mean_med = median(mean_times);
    let def_med = median(def_times);
    let report = serde_json::json!({
        "n": n,
        "m": m,
        "iters": iters,
        "mean_aggregate_median_s": mean_med,
        "defensive_aggregate_median_s": def_med,
        "defensive_over_mean_ratio": def_med / mean_med,
        "plan_construction_median_s": median(plan_times),
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&report).map_err(runtime)?);
    if let Some(out) = a.out.clone().or_else(|| cfg.out.clone()) {
        traceio::write_atomic(&out, text.as_bytes()).map_err(runtime)?;
    }
    print!("{text}");
    Ok(())
}
