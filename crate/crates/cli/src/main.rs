//! `lengthmark`: generate length-controlled text, run evaluations and run
//! counting probes.
//!
//! Exit codes: 0 success (constraint met), 1 constraint missed or some
//! items failed, 2 backend failure, 64 usage or input error.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lengthmark::bench::{self, CostLedger, EvalReport, EvalRunConfig, Method, ReportFormat};
use lengthmark::decode::LengthConstraint;
use lengthmark::pipeline::{run_three_stage, PipelineConfig, PipelineError};
use lengthmark::probes::{self, ProbeConfig, ProbeError, ProbeItem, ProbeKind, ProbeSpec};
use lengthmark::prompts::PromptTemplates;
use lengthmark::segmenter::SegmentationRule;
use serde_json::json;

use config::{build_backend, parse_format, parse_schedule, BackendChoice, CliConfig};

const EXIT_OK: u8 = 0;
const EXIT_MISS: u8 = 1;
const EXIT_BACKEND: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(
    name = "lengthmark",
    version,
    about = "Length-controlled generation and evaluation"
)]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `mock:<behavior>[:seed]` or an http(s) chat-completions URL.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Model name for HTTP backends.
    #[arg(long, global = true)]
    model: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Tuning {
    /// `decaying` or `uniform:K`.
    #[arg(long)]
    schedule: Option<String>,
    /// Marker format: `words`, `bare` or `remaining`.
    #[arg(long)]
    format: Option<String>,
    /// Rewrite attempts (T).
    #[arg(long)]
    attempts: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Directory whose `<name>.txt` files replace built-in prompt templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one response under a length constraint.
    Generate(GenerateArgs),
    /// Evaluate a method over a corpus.
    Eval(EvalArgs),
    /// Run counting probes over a corpus and decompose the errors.
    Probe(ProbeArgs),
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("constraint").required(true).args(["target", "range"])))]
struct GenerateArgs {
    /// The question or instruction.
    prompt: String,
    /// Exact unit count.
    #[arg(long)]
    target: Option<usize>,
    /// Inclusive unit range `MIN:MAX`.
    #[arg(long, value_parser = parse_range)]
    range: Option<LengthConstraint>,
    /// Write every rewrite attempt's transcript here (JSON lines).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Write the full run with its effective configuration here (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// `three_stage` or `implicit:K`.
    #[arg(long, default_value = "three_stage", value_parser = parse_method)]
    method: Method,
    /// Output directory for `report.{json,csv,md}`.
    #[arg(long)]
    out: PathBuf,
    /// Report formats to write.
    #[arg(long, value_delimiter = ',', default_value = "json,csv,md", value_parser = parse_report_format)]
    formats: Vec<ReportFormat>,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    /// Earlier JSON report whose units are the cost reference.
    #[arg(long)]
    reference_report: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Counting intervals.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
    intervals: Vec<usize>,
    /// Skip the letter control.
    #[arg(long)]
    no_control: bool,
    /// Add the implicit counting probe.
    #[arg(long)]
    implicit: bool,
    /// Add the plan probe.
    #[arg(long)]
    plan: bool,
    /// Output directory for `probes.csv`, `errors.csv` and `errors.json`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tuning: Tuning,
}

fn parse_range(s: &str) -> Result<LengthConstraint, String> {
    let (a, b) = s.split_once(':').ok_or("expected MIN:MAX")?;
    let min = a.trim().parse().map_err(|_| format!("bad minimum {a:?}"))?;
    let max = b.trim().parse().map_err(|_| format!("bad maximum {b:?}"))?;
    LengthConstraint::range(min, max).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method {s:?} (three_stage | implicit:K)"))
}

fn parse_report_format(s: &str) -> Result<ReportFormat, String> {
    match s {
        "json" => Ok(ReportFormat::Json),
        "csv" => Ok(ReportFormat::Csv),
        "md" | "markdown" => Ok(ReportFormat::Markdown),
        _ => Err(format!("unknown report format {s:?} (json | csv | md)")),
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn backend_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_BACKEND,
        message: message.into(),
    }
}

/// Effective settings after layering flags over the config file.
struct Settings {
    pipeline: PipelineConfig,
    parallelism: usize,
    backend: BackendChoice,
}

fn settings(cli: &Cli, file: &CliConfig, tuning: &Tuning) -> Result<Settings, Failure> {
    let d = &file.defaults;
    let mut pipeline = PipelineConfig::default();
    if let Some(s) = tuning.schedule.as_deref().or(d.schedule.as_deref()) {
        pipeline.schedule = parse_schedule(s).map_err(usage)?;
    }
    if let Some(f) = tuning.format.as_deref().or(d.format.as_deref()) {
        pipeline.decode.format = parse_format(f).map_err(usage)?;
    }
    if let Some(t) = tuning.attempts.or(d.attempts) {
        if t == 0 {
            return Err(usage("--attempts must be at least 1"));
        }
        pipeline.max_attempts = t;
    }
    if let Some(t) = tuning.temperature.or(d.temperature) {
        pipeline.sampling.temperature = t;
    }
    if let Some(dir) = tuning.templates.as_ref().or(d.templates.as_ref()) {
        pipeline.templates = PromptTemplates::load_dir(dir).map_err(|e| usage(e.to_string()))?;
    }
    let parallelism = tuning.parallelism.or(d.parallelism).unwrap_or(4).max(1);
    let backend = build_backend(
        cli.backend.as_deref(),
        cli.model.as_deref(),
        &file.backend,
        &pipeline.decode.format,
    )
    .map_err(usage)?;
    Ok(Settings {
        pipeline,
        parallelism,
        backend,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| usage(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents)
        .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::InvalidInput(_) | PipelineError::Template { .. } => usage(e.to_string()),
        _ => backend_failure(e.to_string()),
    }
}

fn cmd_generate(cli: &Cli, file: &CliConfig, args: &GenerateArgs) -> Result<u8, Failure> {
    let constraint = match (args.target, args.range) {
        (Some(t), None) => LengthConstraint::exact(t).map_err(|e| usage(e.to_string()))?,
        (None, Some(r)) => r,
        _ => return Err(usage("give exactly one of --target or --range")),
    };
    let s = settings(cli, file, &args.tuning)?;
    let run = run_three_stage(&args.prompt, &constraint, &s.pipeline, &*s.backend.backend)
        .map_err(pipeline_failure)?;
    let count = run.result.final_count;
    let met = s.pipeline.is_compliant(&constraint, count);
    println!("{}", run.result.clean);
    let target = match constraint {
        LengthConstraint::Exact { target } => target.to_string(),
        LengthConstraint::Range { min, max } => format!("{min}:{max}"),
    };
    eprintln!(
        "count={count} target={target} E={:.4} attempts={} met={met}",
        constraint.relative_error(count),
        run.outputs.rewrite_attempts.len()
    );
    if let Some(path) = &args.transcript {
        let mut lines = String::new();
        for (i, a) in run.outputs.rewrite_attempts.iter().enumerate() {
            for ev in &a.transcript.events {
                let mut v = serde_json::to_value(ev).expect("event serializes");
                v["attempt"] = json!(i);
                lines.push_str(&v.to_string());
                lines.push('\n');
            }
        }
        write_file(path, &lines)?;
    }
    if let Some(path) = &args.report {
        let report = json!({
            "schema_version": bench::REPORT_SCHEMA_VERSION,
            "command": "generate",
            "config": {
                "backend": s.backend.label,
                "seed": s.backend.seed,
                "pipeline": s.pipeline,
            },
            "prompt": args.prompt,
            "constraint": constraint,
            "count": count,
            "met": met,
            "text": run.result.clean,
            "outputs": run.outputs,
        });
        write_file(
            path,
            &format!("{}\n", serde_json::to_string_pretty(&report).expect("json")),
        )?;
    }
    Ok(if met { EXIT_OK } else { EXIT_MISS })
}

fn load_records(path: &Path) -> Result<Vec<bench::BenchmarkRecord>, Failure> {
    let corpus = bench::load_corpus(path)
        .map_err(|e| usage(format!("cannot read corpus {}: {e}", path.display())))?;
    for e in &corpus.errors {
        log::warn!("{}:{}: {}", path.display(), e.line, e.message);
    }
    if corpus.records.is_empty() {
        return Err(usage(format!(
            "corpus {} has no valid records",
            path.display()
        )));
    }
    Ok(corpus.records)
}

fn cmd_eval(cli: &Cli, file: &CliConfig, args: &EvalArgs) -> Result<u8, Failure> {
    let records = load_records(&args.corpus)?;
    if args.repetitions == 0 {
        return Err(usage("--repetitions must be at least 1"));
    }
    let s = settings(cli, file, &args.tuning)?;
    let config = EvalRunConfig {
        method: args.method,
        pipeline: s.pipeline,
        rule: SegmentationRule::default(),
        backend: s.backend.label.clone(),
        seed: s.backend.seed,
        repetitions: args.repetitions,
        parallelism: s.parallelism,
    };
    let mut report = bench::run_eval(&records, &config, &*s.backend.backend)
        .map_err(|e| usage(e.to_string()))?;
    if let Some(path) = &args.reference_report {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let reference: EvalReport = serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid report {}: {e}", path.display())))?;
        report.cost = report.cost.relative_to(&reference.cost);
    }
    for f in &args.formats {
        let path = args.out.join(format!("report.{}", f.extension()));
        write_file(&path, &bench::emit_report(&report, *f))?;
    }
    let a = &report.aggregates;
    let CostLedger {
        units_generated,
        backend_calls,
        relative_cost,
    } = report.cost;
    eprintln!(
        "items={} failed={} mean_E={} E_r={} units={units_generated} calls={backend_calls}{}",
        a.items,
        a.failed,
        a.mean_e
            .map(|e| format!("{e:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        a.e_r
            .map(|e| format!("{e:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        relative_cost
            .map(|r| format!(" relative_cost={r:.3}"))
            .unwrap_or_default()
    );
    Ok(if a.failed == 0 {
        EXIT_OK
    } else if a.failed == a.items {
        EXIT_BACKEND
    } else {
        EXIT_MISS
    })
}

fn probe_specs(args: &ProbeArgs) -> Result<Vec<ProbeSpec>, Failure> {
    let intervals: BTreeSet<usize> = args.intervals.iter().copied().collect();
    if intervals.contains(&0) {
        return Err(usage("intervals must be at least 1"));
    }
    let mut kinds: Vec<ProbeKind> = Vec::new();
    if !intervals.contains(&1) {
        kinds.push(ProbeKind::IdentifyOneByOne);
    }
    kinds.extend(intervals.iter().map(|&n| match n {
        1 => ProbeKind::IdentifyOneByOne,
        n => ProbeKind::CountInterval(n),
    }));
    if !args.no_control {
        kinds.push(ProbeKind::LetterControl(1));
    }
    if args.implicit {
        kinds.push(ProbeKind::ImplicitCount);
    }
    if args.plan {
        kinds.push(ProbeKind::PlanProbe);
    }
    Ok(kinds.into_iter().map(ProbeSpec::new).collect())
}

fn errors_csv(result: &probes::ProbeSuiteResult) -> String {
    let ns: BTreeSet<usize> = result
        .reports
        .iter()
        .flat_map(|(_, r)| r.intervals.keys().copied())
        .collect();
    let mut header = vec![
        "schema_version".to_string(),
        "id".into(),
        "n_target".into(),
        "n_true".into(),
        "e".into(),
        "e_i".into(),
        "e_p".into(),
    ];
    for n in &ns {
        header.push(format!("e_c@{n}"));
        header.push(format!("e_a@{n}"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for ((id, inputs), (_, r)) in result.inputs.iter().zip(&result.reports) {
        let mut row = vec![
            bench::REPORT_SCHEMA_VERSION.to_string(),
            id.clone(),
            inputs.n_target.to_string(),
            inputs.n_true.to_string(),
            r.e.to_string(),
            r.e_i.to_string(),
            r.e_p.to_string(),
        ];
        for n in &ns {
            match r.intervals.get(n) {
                Some(iv) => {
                    row.push(iv.e_c.to_string());
                    row.push(iv.e_a.to_string());
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn probes_csv(result: &probes::ProbeSuiteResult) -> String {
    let mut out = String::from("item_id,spec,n_true,n_pred,failed\n");
    for r in &result.rows {
        let id = if r.item_id.contains([',', '"', '\n']) {
            format!("\"{}\"", r.item_id.replace('"', "\"\""))
        } else {
            r.item_id.clone()
        };
        out.push_str(&format!(
            "{id},{},{},{},{}\n",
            r.spec,
            r.n_true,
            r.n_pred.map(|n| n.to_string()).unwrap_or_default(),
            r.failed
        ));
    }
    out
}

fn cmd_probe(cli: &Cli, file: &CliConfig, args: &ProbeArgs) -> Result<u8, Failure> {
    let records = load_records(&args.corpus)?;
    let specs = probe_specs(args)?;
    let s = settings(cli, file, &args.tuning)?;
    let mut items = Vec::new();
    for r in records {
        let Some(text) = r.reference.clone() else {
            log::warn!("record {} has no reference text; skipped", r.id);
            continue;
        };
        let target = match r.constraint() {
            Ok(Some(LengthConstraint::Exact { target })) => Some(target),
            _ => None,
        };
        items.push(ProbeItem {
            id: r.id,
            text,
            prompt: Some(r.prompt),
            target,
        });
    }
    if items.is_empty() {
        return Err(usage("no corpus record has a reference text to probe"));
    }
    let config = ProbeConfig {
        templates: s.pipeline.templates.clone(),
        format: s.pipeline.decode.format.clone(),
        parallelism: s.parallelism,
        sampling: lengthmark::backend::SamplingParams {
            temperature: s.pipeline.sampling.temperature,
            stop_sequences: Vec::new(),
            ..Default::default()
        },
        ..ProbeConfig::default()
    };
    let result = match probes::run_probe_suite(&items, &specs, &config, &*s.backend.backend) {
        Ok(r) => r,
        Err(e @ ProbeError::Backend(_)) => return Err(backend_failure(e.to_string())),
        Err(e @ ProbeError::TooManyFailures { .. }) => {
            return Err(Failure {
                code: EXIT_MISS,
                message: e.to_string(),
            })
        }
        Err(e) => return Err(usage(e.to_string())),
    };
    let intervals: BTreeSet<usize> = args.intervals.iter().copied().collect();
    let items_json: Vec<_> = result
        .inputs
        .iter()
        .zip(&result.reports)
        .map(|((id, inputs), (_, report))| json!({"id": id, "inputs": inputs, "report": report}))
        .collect();
    let report = json!({
        "schema_version": bench::REPORT_SCHEMA_VERSION,
        "command": "probe",
        "config": {
            "backend": s.backend.label,
            "seed": s.backend.seed,
            "intervals": intervals,
            "specs": specs,
            "format": config.format,
            "rule": config.rule,
            "sampling": config.sampling,
            "parallelism": config.parallelism,
            "max_failure_rate": config.max_failure_rate,
        },
        "aggregate": result.aggregate,
        "implicit_error": result.implicit_error,
        "failed_probes": result.failed_probes,
        "excluded_items": result.excluded_items,
        "items": items_json,
    });
    write_file(&args.out.join("probes.csv"), &probes_csv(&result))?;
    write_file(&args.out.join("errors.csv"), &errors_csv(&result))?;
    write_file(
        &args.out.join("errors.json"),
        &format!("{}\n", serde_json::to_string_pretty(&report).expect("json")),
    )?;
    eprintln!(
        "items={} probes={} failed={} E={:.4} e_I={:.4}",
        result.inputs.len(),
        result.rows.len(),
        result.failed_probes,
        result.aggregate.e,
        result.aggregate.e_i
    );
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let file = match &cli.config {
        Some(p) => match CliConfig::load(p) {
            Ok(c) => c,
            Err(m) => {
                eprintln!("error: {m}");
                return ExitCode::from(EXIT_USAGE);
            }
        },
        None => CliConfig::default(),
    };
    let outcome = match &cli.command {
        Command::Generate(a) => cmd_generate(&cli, &file, a),
        Command::Eval(a) => cmd_eval(&cli, &file, a),
        Command::Probe(a) => cmd_probe(&cli, &file, a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
