//! The `posemerge` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 unreadable or malformed input,
//! 3 validation failure (gradient check over tolerance, diverged training).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::annotations::{convert_to_union, parse_keypoint_json, read_unified, write_unified, ConvertReport};
use crate::gradcheck::{run_gradcheck, Fault, GradcheckOptions, GradcheckReport, DEFAULT_STEP};
use crate::harness::{
    baseline_config, render_csv, render_text, run_ablation_matrix, run_experiment, AblationAxes,
    AblationReport, ExperimentConfig, HarnessError, RunLog, TableRow,
};
use crate::metrics::{average_precision, coco_thresholds, pck, subset_slots, EvalReport, OksParams, PckConfig, Subset};
use crate::model::save_checkpoint;
use crate::schema::{build_union, overlap, unique_to, SchemaRegistry, UnionSchema};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitStatus(pub u8);

impl ExitStatus {
    pub const SUCCESS: Self = Self(0);
    pub const USAGE: Self = Self(1);
    pub const INPUT: Self = Self(2);
    pub const VALIDATION: Self = Self(3);
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Validation(String),
}

impl CliError {
    fn status(&self) -> ExitStatus {
        match self {
            Self::Input(_) => ExitStatus::INPUT,
            Self::Validation(_) => ExitStatus::VALIDATION,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Input(m) | Self::Validation(m) => m,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Diverged { .. } => Self::Validation(e.to_string()),
            other => Self::Input(other.to_string()),
        }
    }
}

fn input<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Input(format!("{context}: {e}"))
}

type CliResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "posemerge",
    version,
    about = "Unified skeletons, distillation losses and pose metrics",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Union, overlap or difference of two skeleton schemas.
    Schema {
        #[arg(value_enum)]
        op: SchemaOp,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Extra schema definition files ({"id", "keypoints", "aliases"}).
        #[arg(long = "schema-file")]
        schema_files: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Convert a COCO-dialect keypoint file onto the COCO + MPII union.
    Convert {
        /// Schema of the input file (coco17, mpii16, halpe26, or registered).
        #[arg(long)]
        schema: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fill an unlabeled thorax with the shoulder midpoint.
        #[arg(long)]
        synthesize_thorax: bool,
        #[arg(long = "schema-file")]
        schema_files: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Score predictions against ground truth (both in the unified format).
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long, default_value = "all")]
        subset: Subset,
        /// OKS constants override file ({"sigmas": {name: k}}).
        #[arg(long)]
        sigmas: Option<PathBuf>,
        /// PCK threshold (default 0.5 for pckh, 0.1 for pck).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, conflicts_with = "json")]
        csv: bool,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one gradient on purpose; the check must then fail.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        json: bool,
    },
    /// Train and evaluate the student on the synthetic two-dataset task.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also train the dataset-A-only baseline and tabulate both.
        #[arg(long)]
        compare: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run an ablation grid over distillation, alpha and beta settings.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid file ({"distill": [..], "alphas": [..], "betas": [{..}]}).
        #[arg(long)]
        axes: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Render the table stored in a run log or ablation report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Same as `--format json`.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemaOp {
    Union,
    Overlap,
    Diff,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    Ap,
    Pck,
    Pckh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<S: AsRef<str>>(argv: &[S], out: &mut dyn Write, err: &mut dyn Write) -> ExitStatus {
    let cli = match Cli::try_parse_from(argv.iter().map(AsRef::as_ref)) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(rendered.as_bytes());
                    ExitStatus::SUCCESS
                }
                _ => {
                    let _ = err.write_all(rendered.as_bytes());
                    ExitStatus::USAGE
                }
            };
        }
    };
    match run(cli.command, out) {
        Ok(()) => ExitStatus::SUCCESS,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.status()
        }
    }
}

fn run(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Schema {
            op,
            a,
            b,
            schema_files,
            json,
        } => cmd_schema(op, &a, &b, &schema_files, json, out),
        Command::Convert {
            schema,
            input,
            out: dest,
            synthesize_thorax,
            schema_files,
            json,
        } => cmd_convert(&schema, &input, &dest, synthesize_thorax, &schema_files, json, out),
        Command::Eval {
            gt,
            pred,
            metric,
            subset,
            sigmas,
            threshold,
            csv,
            json,
        } => {
            let format = if json {
                Format::Json
            } else if csv {
                Format::Csv
            } else {
                Format::Text
            };
            cmd_eval(&gt, &pred, metric, subset, sigmas.as_deref(), threshold, format, out)
        }
        Command::Gradcheck {
            tol,
            cases,
            step,
            seed,
            inject_fault,
            json,
        } => cmd_gradcheck(tol, cases, step, seed, inject_fault, json, out),
        Command::Train {
            config,
            seed,
            out: dest,
            compare,
            json,
        } => cmd_train(config.as_deref(), seed, &dest, compare, json, out),
        Command::Ablate {
            config,
            axes,
            seeds,
            out: dest,
            json,
        } => cmd_ablate(config.as_deref(), axes.as_deref(), &seeds, &dest, json, out),
        Command::Report { input, format, json } => {
            cmd_report(&input, if json { Format::Json } else { format }, out)
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(input(path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(input(path.display()))
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Input(format!("stdout: {e}")))
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> CliResult {
    let mut s = serde_json::to_string_pretty(value).expect("output serialises");
    s.push('\n');
    emit(out, &s)
}

fn registry_with(files: &[PathBuf]) -> Result<SchemaRegistry, CliError> {
    let mut registry = SchemaRegistry::builtin();
    for f in files {
        registry
            .register_json(&read(f)?)
            .map_err(input(f.display()))?;
    }
    Ok(registry)
}

#[derive(Serialize)]
struct KeypointEntry {
    slot: usize,
    name: String,
    sources: Vec<String>,
}

#[derive(Serialize)]
struct SchemaOutput {
    op: &'static str,
    a: String,
    b: String,
    count: usize,
    keypoints: Vec<KeypointEntry>,
}

fn cmd_schema(op: SchemaOp, a: &str, b: &str, files: &[PathBuf], json: bool, out: &mut dyn Write) -> CliResult {
    let registry = registry_with(files)?;
    let sa = registry.get(a).map_err(input("--a"))?.clone();
    let sb = registry.get(b).map_err(input("--b"))?.clone();
    let union = build_union(&[sa.clone(), sb.clone()]).map_err(input("union"))?;
    let names = match op {
        SchemaOp::Union => union.keypoints().to_vec(),
        SchemaOp::Overlap => overlap(&sa, &sb),
        SchemaOp::Diff => unique_to(&sa, &sb),
    };
    let keypoints: Vec<KeypointEntry> = names
        .iter()
        .enumerate()
        .map(|(slot, k)| KeypointEntry {
            slot,
            name: k.to_string(),
            sources: union.provenance()[union.index_of(k.as_str()).expect("in union")]
                .iter()
                .cloned()
                .collect(),
        })
        .collect();
    let op_name = match op {
        SchemaOp::Union => "union",
        SchemaOp::Overlap => "overlap",
        SchemaOp::Diff => "diff",
    };
    let output = SchemaOutput {
        op: op_name,
        a: a.to_string(),
        b: b.to_string(),
        count: keypoints.len(),
        keypoints,
    };
    if json {
        return emit_json(out, &output);
    }
    let mut text = format!("{op_name} of {a} and {b}: {} keypoints\n", output.count);
    for k in &output.keypoints {
        text.push_str(&format!("{:>3}  {:<16} {}\n", k.slot, k.name, k.sources.join(",")));
    }
    emit(out, &text)
}

#[derive(Serialize)]
struct ConvertOutput {
    schema: String,
    file_digest: String,
    instances_in_file: usize,
    skipped_empty: usize,
    skipped_crowd: usize,
    name_mismatches: usize,
    report: ConvertReport,
    union: Vec<String>,
}

fn cmd_convert(
    schema: &str,
    src: &Path,
    dest: &Path,
    thorax: bool,
    files: &[PathBuf],
    json: bool,
    out: &mut dyn Write,
) -> CliResult {
    let registry = registry_with(files)?;
    let source = registry.get(schema).map_err(input("--schema"))?;
    let bytes = read(src)?;
    let (desc, raws) = parse_keypoint_json(&bytes, source).map_err(input(src.display()))?;
    let union = crate::schema::coco_mpii_union();
    let (instances, report) =
        convert_to_union(&raws, source, &union, thorax).map_err(input(src.display()))?;
    let mut buf = Vec::new();
    write_unified(&instances, &union, &mut buf).map_err(input(dest.display()))?;
    write_file(dest, &buf)?;
    let output = ConvertOutput {
        schema: desc.id,
        file_digest: desc.file_digest,
        instances_in_file: desc.instance_count,
        skipped_empty: desc.skipped_empty,
        skipped_crowd: desc.skipped_crowd,
        name_mismatches: desc.name_mismatches,
        report,
        union: union.keypoints().iter().map(|k| k.to_string()).collect(),
    };
    if json {
        return emit_json(out, &output);
    }
    let dropped: Vec<String> = output.report.dropped_keypoints.iter().map(|k| k.to_string()).collect();
    emit(
        out,
        &format!(
            "converted {} instances from {} ({} empty, {} crowd skipped)\n\
             dropped keypoints: {}\n\
             thorax synthesized: {}, not synthesized: {}\n",
            output.report.converted,
            output.schema,
            output.skipped_empty,
            output.skipped_crowd,
            if dropped.is_empty() { "none".to_string() } else { dropped.join(", ") },
            output.report.thorax_synthesized,
            output.report.thorax_not_synthesized,
        ),
    )
}

fn union_for(names: &[String]) -> Result<UnionSchema, CliError> {
    let registry = SchemaRegistry::builtin();
    let sources: Vec<_> = registry.ids().map(|id| registry.get(id).expect("listed").clone()).collect();
    UnionSchema::from_slots(names, &sources).map_err(input("schema"))
}

fn eval_csv(report: &EvalReport) -> String {
    let mut s = String::from("key,score,count\n");
    for k in &report.per_keypoint {
        s.push_str(&format!("{},{},{}\n", k.name, k.score, k.count));
    }
    for (k, v) in &report.means {
        s.push_str(&format!("{k},{v},\n"));
    }
    s
}

fn eval_text(report: &EvalReport) -> String {
    let mut s = format!(
        "{}: {} instances, {} keypoints, {} predictions\n",
        report.metric, report.counts.instances, report.counts.keypoints, report.counts.predictions
    );
    for (k, v) in &report.means {
        s.push_str(&format!("  {k:<8} {v:.4}\n"));
    }
    for k in &report.per_keypoint {
        s.push_str(&format!("  {:<16} {:.4}  (n={})\n", k.name, k.score, k.count));
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    gt: &Path,
    pred: &Path,
    metric: Metric,
    subset: Subset,
    sigmas: Option<&Path>,
    threshold: Option<f64>,
    format: Format,
    out: &mut dyn Write,
) -> CliResult {
    let (gt_names, gts) = read_unified(&read(gt)?).map_err(input(gt.display()))?;
    let (pred_names, preds) = read_unified(&read(pred)?).map_err(input(pred.display()))?;
    if gt_names != pred_names {
        return Err(CliError::Input("prediction and ground-truth slot lists differ".into()));
    }
    let union = union_for(&gt_names)?;
    let slots = subset_slots(&union, subset);
    let report = match metric {
        Metric::Ap => {
            let params = match sigmas {
                Some(p) => OksParams::from_json(&read(p)?, &union).map_err(input(p.display()))?,
                None => OksParams::defaults(&union),
            };
            average_precision(&preds, &gts, &params, &slots, &coco_thresholds(), &union)
        }
        Metric::Pck | Metric::Pckh => {
            let cfg = match metric {
                Metric::Pckh => PckConfig::pckh(threshold.unwrap_or(0.5)),
                _ => PckConfig::bbox(threshold.unwrap_or(0.1)),
            };
            pck(&preds, &gts, &cfg, &slots, &union).map_err(input("pck"))?
        }
    };
    match format {
        Format::Json => emit_json(out, &report),
        Format::Csv => emit(out, &eval_csv(&report)),
        Format::Text => emit(out, &eval_text(&report)),
    }
}

#[derive(Serialize)]
struct GradcheckOutput<'a> {
    tol: f64,
    passed: bool,
    max_rel_error: f64,
    report: &'a GradcheckReport,
}

fn cmd_gradcheck(
    tol: f64,
    cases: usize,
    step: f64,
    seed: u64,
    inject_fault: bool,
    json: bool,
    out: &mut dyn Write,
) -> CliResult {
    let report = run_gradcheck(&GradcheckOptions {
        cases,
        step,
        seed,
        fault: if inject_fault { Fault::FlipKeypointSign } else { Fault::None },
    });
    let passed = report.passes(tol);
    if json {
        emit_json(
            out,
            &GradcheckOutput {
                tol,
                passed,
                max_rel_error: report.max_rel_error(),
                report: &report,
            },
        )?;
    } else {
        let mut s = format!("finite differences, h = {step:e}, tolerance {tol:e}\n");
        for c in &report.checks {
            s.push_str(&format!(
                "  {:<26} {:>5} cases {:>7} entries  max rel {:.3e}  {}\n",
                c.name,
                c.cases,
                c.entries,
                c.max_rel_error,
                if c.max_rel_error <= tol { "ok" } else { "FAIL" }
            ));
        }
        emit(out, &s)?;
    }
    if passed {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "max relative error {:.3e} exceeds {tol:e}",
            report.max_rel_error()
        )))
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut config = match path {
        Some(p) => ExperimentConfig::from_json(&read(p)?).map_err(input(p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate().map_err(input("config"))?;
    Ok(config)
}

fn write_tables(dir: &Path, rows: &[TableRow], report_json: &impl Serialize) -> CliResult {
    let mut json = serde_json::to_string_pretty(report_json).expect("report serialises");
    json.push('\n');
    write_file(&dir.join("report.json"), json.as_bytes())?;
    write_file(&dir.join("report.csv"), render_csv(rows).as_bytes())?;
    write_file(&dir.join("report.txt"), render_text(rows).as_bytes())
}

#[derive(Serialize)]
struct TrainOutput {
    out: String,
    config_digest: String,
    files: Vec<&'static str>,
    rows: Vec<TableRow>,
}

fn cmd_train(
    config: Option<&Path>,
    seed: Option<u64>,
    dest: &Path,
    compare: bool,
    json: bool,
    out: &mut dyn Write,
) -> CliResult {
    let config = load_config(config, seed)?;
    fs::create_dir_all(dest).map_err(input(dest.display()))?;
    let mut runs = Vec::new();
    if compare {
        let (_, log) = run_experiment("baseline", &baseline_config(&config))?;
        runs.push(log);
    }
    let (model, log) = run_experiment("unified", &config)?;
    let mut ck = Vec::new();
    save_checkpoint(&model, log.steps.len() as u64, &log.config_digest, &mut ck)
        .map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&dest.join("student.json"), &ck)?;
    runs.push(log);
    let rows: Vec<TableRow> = runs
        .iter()
        .filter_map(|l| l.report.as_ref().map(|r| r.row.clone()))
        .collect();
    let unified = runs.last().expect("unified run");
    write_file(&dest.join("runlog.json"), format!("{}\n", unified.to_json()).as_bytes())?;
    let reports: Vec<_> = runs.iter().filter_map(|l| l.report.as_ref()).collect();
    write_tables(dest, &rows, &reports)?;
    if json {
        emit_json(
            out,
            &TrainOutput {
                out: dest.display().to_string(),
                config_digest: unified.config_digest.clone(),
                files: vec!["runlog.json", "report.json", "report.csv", "report.txt", "student.json"],
                rows,
            },
        )
    } else {
        emit(out, &render_text(&rows))
    }
}

#[derive(Serialize)]
struct AblateOutput {
    out: String,
    cells: usize,
    failures: usize,
    rows: Vec<TableRow>,
}

fn cmd_ablate(
    config: Option<&Path>,
    axes: Option<&Path>,
    seeds: &[u64],
    dest: &Path,
    json: bool,
    out: &mut dyn Write,
) -> CliResult {
    let config = load_config(config, None)?;
    let axes: AblationAxes = match axes {
        Some(p) => serde_json::from_slice(&read(p)?).map_err(input(p.display()))?,
        None => AblationAxes {
            distill: vec![true, false],
            alphas: vec![config.loss.alpha],
            betas: vec![config.loss.betas.clone()],
        },
    };
    fs::create_dir_all(dest).map_err(input(dest.display()))?;
    let report = run_ablation_matrix(&config, &axes, seeds)?;
    let rows = report.mean_rows();
    let mut log = serde_json::to_string_pretty(&report).expect("report serialises");
    log.push('\n');
    write_file(&dest.join("runlog.json"), log.as_bytes())?;
    write_tables(dest, &rows, &report.rows)?;
    let failures = report.cells.iter().filter(|c| c.error.is_some()).count();
    if json {
        emit_json(
            out,
            &AblateOutput {
                out: dest.display().to_string(),
                cells: report.cells.len(),
                failures,
                rows,
            },
        )
    } else {
        let mut s = render_text(&rows);
        for c in report.cells.iter().filter(|c| c.error.is_some()) {
            s.push_str(&format!(
                "cell distill={} alpha={} seed={} failed: {}\n",
                c.distill,
                c.alpha,
                c.seed,
                c.error.as_deref().unwrap_or_default()
            ));
        }
        emit(out, &s)
    }
}

fn rows_from(bytes: &[u8]) -> Result<Vec<TableRow>, String> {
    if let Ok(log) = serde_json::from_slice::<RunLog>(bytes) {
        return log
            .report
            .map(|r| vec![r.row])
            .ok_or_else(|| "run log carries no evaluation report".to_string());
    }
    if let Ok(report) = serde_json::from_slice::<AblationReport>(bytes) {
        return Ok(report.mean_rows());
    }
    serde_json::from_slice::<Vec<TableRow>>(bytes)
        .map_err(|_| "not a run log, ablation report or table".to_string())
}

fn cmd_report(src: &Path, format: Format, out: &mut dyn Write) -> CliResult {
    let rows = rows_from(&read(src)?).map_err(input(src.display()))?;
    match format {
        Format::Text => emit(out, &render_text(&rows)),
        Format::Csv => emit(out, &render_csv(&rows)),
        Format::Json => emit_json(out, &rows),
    }
}
