use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use fairscope_core::corpus::{self, Corpus, CorpusSpec, CORPUS_FORMAT_VERSION};
use fairscope_core::encoder::ModelConfig;
use fairscope_core::io::{file_sha256, read_to_string, write_atomic};
use fairscope_core::nn::checkpoint::CHECKPOINT_VERSION;
use fairscope_core::protocol::{
    self, Arch, ExperimentPlan, RunOptions, Setting, TrainOptions, PLAN_SCHEMA_VERSION, REPORT_SCHEMA_VERSION,
};
use fairscope_core::report;
use fairscope_core::training::{self, StudentInitMode, TrainConfig, TrainedModel};
use fairscope_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

fn long_version() -> &'static str {
    Box::leak(
        format!(
            "{}\ncorpus format {CORPUS_FORMAT_VERSION}\ncheckpoint format {CHECKPOINT_VERSION}\nplan schema {PLAN_SCHEMA_VERSION}\nreport schema {REPORT_SCHEMA_VERSION}",
            env!("CARGO_PKG_VERSION")
        )
        .into_boxed_str(),
    )
}

#[derive(Parser)]
#[command(name = "fairscope", version, long_version = long_version(), about = "Locate bias in small transformer classifiers")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    /// Worker threads for independent training and evaluation tasks.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled corpus as JSON lines.
    Gen(GenArgs),
    /// Pretrain, fine-tune or distill one model.
    Train(TrainArgs),
    /// Layer-wise attention and representation comparison of Mi vs Mb.
    #[command(name = "audit-e1")]
    AuditE1(AuditArgs),
    /// Single-head ablation sweep with per-class equalized odds.
    #[command(name = "audit-e2")]
    AuditE2(AuditE2Args),
    /// Teacher vs student summary from existing E2 reports.
    Compare(CompareArgs),
    /// Re-render CSV tables from the JSON reports in an output directory.
    Report(ReportArgs),
    /// Run the whole plan: training, both audits, comparison and reports.
    Run(AuditArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Corpus spec (JSON); omitted fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_examples: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mlm,
    Finetune,
    Distill,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudentInitArg {
    FromTeacher,
    Fresh,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Training config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model config (JSON); defaults are sized to the corpus.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Starting checkpoint for fine-tuning.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Teacher checkpoint for distillation.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "from-teacher")]
    student_init: StudentInitArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Output directory (overrides the plan's).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (overrides the plan's).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Fail instead of training when a checkpoint is missing.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Teacher,
    Student,
    Both,
}

#[derive(Args)]
struct AuditE2Args {
    #[command(flatten)]
    common: AuditArgs,
    #[arg(long, value_enum, default_value = "both")]
    arch: ArchArg,
}

#[derive(Args)]
struct CompareArgs {
    /// Output directory holding reports/e2_teacher.json and reports/e2_student.json.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, value_enum, default_value = "imbalanced")]
    setting: SettingArg,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Imbalanced,
    Balanced,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    dir: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn guard_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::invalid(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn input_record(path: &Path) -> Result<Value> {
    let hash = file_sha256(path)?;
    tracing::info!(path = %path.display(), sha256 = %hash, "input");
    Ok(json!({ "path": path, "sha256": hash }))
}

fn write_resolved(path: &Path, value: &Value) -> Result<()> {
    tracing::info!(config = %value, "resolved configuration");
    write_atomic(path, report::to_json(value)?.as_bytes())
}

fn gen(a: &GenArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let mut inputs = Vec::new();
    let mut spec: CorpusSpec = match &a.spec {
        Some(p) => {
            inputs.push(input_record(p)?);
            read_json(p)?
        }
        None => CorpusSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.num_examples {
        spec.num_examples = n;
    }
    spec.validate()?;
    let c = corpus::generate(&spec)?;
    c.write_jsonl(&a.out)?;
    write_resolved(
        &sidecar(&a.out, ".resolved_config.json"),
        &json!({ "command": "gen", "spec": spec, "inputs": inputs, "output_sha256": file_sha256(&a.out)? }),
    )?;
    println!("{} examples -> {}", c.len(), a.out.display());
    Ok(())
}

fn default_model_config(c: &Corpus) -> ModelConfig {
    let s = c.spec();
    ModelConfig {
        vocab_size: s.vocab_size,
        max_len: s.max_len + 1,
        num_classes: s.num_classes,
        ..ModelConfig::default()
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    guard_output(&a.out, a.force)?;
    let mut inputs = vec![input_record(&a.corpus)?];
    let corpus = Corpus::read_jsonl(&a.corpus)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => {
            inputs.push(input_record(p)?);
            read_json(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    cfg.validate()?;
    let model_config = match &a.model_config {
        Some(p) => {
            inputs.push(input_record(p)?);
            read_json(p)?
        }
        None => default_model_config(&corpus),
    };
    let mut load = |p: &Path| -> Result<TrainedModel> {
        inputs.push(input_record(p)?);
        TrainedModel::load(p)
    };
    let (model, mode) = match a.mode {
        Mode::Mlm => (training::pretrain_mlm(&cfg, &corpus, &model_config)?, "mlm"),
        Mode::Finetune => {
            let base = a.base.as_deref().map(&mut load).transpose()?;
            (training::finetune(&cfg, &corpus, base.as_ref(), &model_config)?, "finetune")
        }
        Mode::Distill => {
            let path = a
                .teacher
                .as_deref()
                .ok_or_else(|| Error::invalid("--mode distill needs --teacher"))?;
            let teacher = load(path)?;
            let init = match a.student_init {
                StudentInitArg::FromTeacher => StudentInitMode::FromTeacher,
                StudentInitArg::Fresh => StudentInitMode::Fresh,
            };
            (training::distill(&teacher, &cfg, &corpus, init)?, "distill")
        }
    };
    model.save(&a.out)?;
    write_atomic(&sidecar(&a.out, ".log.csv"), model.log_csv().as_bytes())?;
    write_resolved(
        &sidecar(&a.out, ".resolved_config.json"),
        &json!({
            "command": "train",
            "mode": mode,
            "train": cfg,
            "model": model.model.config,
            "provenance": model.provenance,
            "inputs": inputs,
        }),
    )?;
    println!(
        "{mode}: {} steps, final loss {} -> {}",
        model.log.len(),
        model.log.last().map_or(f64::NAN, |r| r.loss),
        a.out.display()
    );
    Ok(())
}

fn resolve_plan(a: &AuditArgs) -> Result<(ExperimentPlan, PathBuf, Vec<Value>)> {
    let mut inputs = Vec::new();
    let mut plan = match &a.plan {
        Some(p) => {
            inputs.push(input_record(p)?);
            ExperimentPlan::load(p)?
        }
        None => ExperimentPlan::default(),
    };
    if let Some(s) = &a.seeds {
        plan.seeds = s.clone();
    }
    if let Some(o) = &a.out {
        plan.output_dir = Some(o.clone());
    }
    plan.validate()?;
    let out = plan
        .output_dir
        .clone()
        .ok_or_else(|| Error::invalid("no output directory: pass --out or set output_dir in the plan"))?;
    Ok((plan, out, inputs))
}

fn resolved_plan_record(command: &str, plan: &ExperimentPlan, jobs: usize, a: &AuditArgs, inputs: Vec<Value>) -> Value {
    json!({ "command": command, "plan": plan, "jobs": jobs, "strict": a.strict, "inputs": inputs })
}

fn prepare(plan: &ExperimentPlan, out: &Path, jobs: usize, strict: bool) -> Result<(protocol::PreparedData, protocol::ModelZoo)> {
    let data = protocol::prepare_data(plan)?;
    let zoo = protocol::train_models(
        plan,
        &data,
        &TrainOptions {
            jobs,
            strict,
            checkpoint_dir: Some(out.join("checkpoints")),
        },
    )?;
    Ok((data, zoo))
}

fn audit_e1(a: &AuditArgs, jobs: usize) -> Result<()> {
    let (plan, out, inputs) = resolve_plan(a)?;
    let target = out.join("reports").join("e1.json");
    guard_output(&target, a.force)?;
    write_resolved(&out.join("resolved_config.json"), &resolved_plan_record("audit-e1", &plan, jobs, a, inputs))?;
    let (data, zoo) = prepare(&plan, &out, jobs, a.strict)?;
    let e1 = protocol::run_e1(&plan, &data, &zoo, jobs)?;
    protocol::verify_e1(&e1, plan.teacher.num_layers, plan.student_config().num_layers)?;
    write_atomic(&target, report::to_json(&e1)?.as_bytes())?;
    report::rerender(&out)?;
    for arch in &e1.archs {
        println!("{} js mi-mb by layer: {:?}", arch.arch.tag(), arch.js.mi_mb.mean);
        println!("{} svcca mi-mb by layer: {:?}", arch.arch.tag(), arch.svcca.mi_mb.mean);
    }
    Ok(())
}

fn audit_e2(a: &AuditE2Args, jobs: usize) -> Result<()> {
    let (plan, out, inputs) = resolve_plan(&a.common)?;
    let archs: Vec<Arch> = match a.arch {
        ArchArg::Teacher => vec![Arch::Teacher],
        ArchArg::Student => vec![Arch::Student],
        ArchArg::Both => Arch::ALL.to_vec(),
    };
    let target = |arch: Arch| out.join("reports").join(format!("e2_{}.json", arch.tag()));
    for &arch in &archs {
        guard_output(&target(arch), a.common.force)?;
    }
    write_resolved(
        &out.join("resolved_config.json"),
        &resolved_plan_record("audit-e2", &plan, jobs, &a.common, inputs),
    )?;
    let (data, zoo) = prepare(&plan, &out, jobs, a.common.strict)?;
    for &arch in &archs {
        let e2 = protocol::run_e2(&plan, &data, &zoo, arch, jobs)?;
        protocol::verify_e2(&e2)?;
        write_atomic(&target(arch), report::to_json(&e2)?.as_bytes())?;
        for m in &e2.models {
            println!(
                "{}: weighted F {:.4}, mean EO {}",
                m.model_id,
                m.baseline().weighted_fscore,
                m.baseline().mean_eo.map_or("undefined".into(), |v| format!("{v:.4}"))
            );
        }
    }
    // tables also pick up results of the other arch from earlier runs
    report::rerender(&out)?;
    Ok(())
}

fn compare(a: &CompareArgs) -> Result<()> {
    let reports = a.dir.join("reports");
    let target = reports.join("comparison.json");
    guard_output(&target, a.force)?;
    let (tp, sp) = (reports.join("e2_teacher.json"), reports.join("e2_student.json"));
    let inputs = vec![input_record(&tp)?, input_record(&sp)?];
    let teacher: protocol::E2Result = report::read_json(&tp)?;
    let student: protocol::E2Result = report::read_json(&sp)?;
    let setting = match a.setting {
        SettingArg::Imbalanced => Setting::Imbalanced,
        SettingArg::Balanced => Setting::Balanced,
    };
    let cmp = protocol::compare_architectures(&teacher, &student, setting)?;
    write_resolved(
        &a.dir.join("resolved_config.json"),
        &json!({ "command": "compare", "setting": setting, "inputs": inputs }),
    )?;
    write_atomic(&target, report::to_json(&cmp)?.as_bytes())?;
    report::rerender(&a.dir)?;
    println!(
        "weighted F teacher {:.4} student {:.4} ({} classes)",
        cmp.teacher_fscore,
        cmp.student_fscore,
        cmp.rows.len()
    );
    Ok(())
}

fn run(a: &AuditArgs, jobs: usize) -> Result<()> {
    let (plan, out, inputs) = resolve_plan(a)?;
    if !a.force && out.join("reports").join("summary.json").exists() {
        return Err(Error::invalid(format!(
            "{} already holds reports; pass --force to overwrite",
            out.display()
        )));
    }
    write_resolved(&out.join("resolved_config.json"), &resolved_plan_record("run", &plan, jobs, a, inputs))?;
    let outcome = protocol::run_plan(
        &plan,
        &out,
        &RunOptions {
            jobs,
            strict: a.strict,
            force: true,
        },
    )?;
    println!(
        "trained {} models; reports in {}",
        outcome.zoo.trained.len(),
        out.join("reports").display()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::invalid("--jobs must be at least 1"));
    }
    match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::AuditE1(a) => audit_e1(a, cli.jobs),
        Command::AuditE2(a) => audit_e2(a, cli.jobs),
        Command::Compare(a) => compare(a),
        Command::Report(a) => {
            for p in report::rerender(&a.dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Run(a) => run(a, cli.jobs),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
