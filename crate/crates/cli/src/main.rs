//! Command-line surface: dataset generation, incremental runs, ablation
//! sweeps, and gradient checking.
//!
//! Every run resolves to a [`RunManifest`] — file values first, then flag and
//! environment overrides — and the resolved manifest is persisted next to the
//! run's artifacts, so any run can be reproduced byte for byte from its
//! output directory alone. Human-readable summaries go to standard output;
//! machine artifacts (JSON report, CSV curves, prompt checkpoint, manifest)
//! go only to the output directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ddp_core::datagen::{generate, save_dataset, synth20, Dataset};
use ddp_core::error::{DdpError, Result};
use ddp_core::gradcheck::{finite_diff_check, run_battery, GradCheckResult, BATTERY_TOLERANCE};
use ddp_core::manifest::{
    parse_branch_mode, parse_pcd_spec, parse_prompt_mode, parse_schedule_spec, RunManifest,
};
use ddp_core::metrics::{aggregate, MetricsReport};
use ddp_core::param::Parameter;
use ddp_core::protocol::{evaluate, train_task, RunState};
use ddp_core::rng::Rng;
use ddp_core::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "ddp",
    version,
    about = "Replay-free multi-label class-incremental learning with dual decoupled prompting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic 20-class multi-label benchmark dataset.
    Datagen(DatagenArgs),
    /// Train one incremental sequence and write its report, curves,
    /// checkpoint, and resolved manifest.
    Run(RunArgs),
    /// Sweep one configuration axis with everything else shared and print a
    /// side-by-side comparison table.
    Ablate(AblateArgs),
    /// Check every backward rule against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DatagenArgs {
    /// Generation seed (prototypes, labels, noise).
    #[arg(long, env = "DDP_DATA_SEED", default_value_t = 4242)]
    seed: u64,
    /// Directory receiving train.ddp and test.ddp.
    #[arg(long, env = "DDP_DATA_OUT", default_value = "data")]
    out: PathBuf,
    /// Per-pixel noise standard deviation.
    #[arg(long, env = "DDP_DATA_NOISE")]
    noise: Option<f64>,
    /// Feature grid rows.
    #[arg(long, env = "DDP_DATA_ROWS")]
    rows: Option<usize>,
    /// Feature grid columns.
    #[arg(long, env = "DDP_DATA_COLS")]
    cols: Option<usize>,
    /// Feature grid channels.
    #[arg(long, env = "DDP_DATA_CHANNELS")]
    channels: Option<usize>,
    /// Training images per class.
    #[arg(long, env = "DDP_DATA_TRAIN_PER_CLASS")]
    train_per_class: Option<usize>,
    /// Test images per class.
    #[arg(long, env = "DDP_DATA_TEST_PER_CLASS")]
    test_per_class: Option<usize>,
}

/// Flags shared by `run` and `ablate`: a manifest file plus field overrides.
/// Priority: defaults < manifest file < environment < explicit flags.
#[derive(Args)]
struct ManifestArgs {
    /// Manifest file to start from; unset keys keep their defaults.
    #[arg(long, env = "DDP_MANIFEST")]
    manifest: Option<PathBuf>,
    /// Dataset directory holding train.ddp and test.ddp.
    #[arg(long, env = "DDP_DATASET")]
    dataset: Option<String>,
    /// Output directory for run artifacts.
    #[arg(long, env = "DDP_OUT")]
    out: Option<String>,
    /// Incremental schedule, e.g. 20:B4-C2.
    #[arg(long, env = "DDP_SCHEDULE")]
    schedule: Option<String>,
    /// Confidence temperature schedule: `tau_max=F,gamma=F` or `off`.
    #[arg(long, env = "DDP_PCD")]
    pcd: Option<String>,
    /// Prompt sharing policy: class-specific, task-specific, global, none.
    #[arg(long, env = "DDP_PROMPT_MODE")]
    prompt_mode: Option<String>,
    /// Prompted branches: both, pos-only, neg-only, none.
    #[arg(long, env = "DDP_BRANCH_MODE")]
    branch_mode: Option<String>,
    /// How many final visual layers receive the prompt.
    #[arg(long, env = "DDP_ATTACH_DEPTH")]
    attach_depth: Option<usize>,
    /// Passes over the selected images per task.
    #[arg(long, env = "DDP_EPOCHS")]
    epochs: Option<usize>,
    /// Images per optimization step.
    #[arg(long, env = "DDP_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long, env = "DDP_LEARNING_RATE")]
    learning_rate: Option<f64>,
    /// Prompt length L_P.
    #[arg(long, env = "DDP_PROMPT_LEN")]
    prompt_len: Option<usize>,
    /// Freeze each task's prompts when the task completes.
    #[arg(long, env = "DDP_FREEZE_PAST")]
    freeze_past: Option<bool>,
    /// Standard deviation of prompt initialization.
    #[arg(long, env = "DDP_INIT_STD")]
    init_std: Option<f64>,
    /// Base decision threshold on positive confidence.
    #[arg(long, env = "DDP_THRESHOLD")]
    threshold: Option<f64>,
    /// Offset of the high-confidence operating point above the base one.
    #[arg(long, env = "DDP_HICONF_DELTA")]
    hiconf_delta: Option<f64>,
    /// Root seed for prompts, class tokens, and epoch shuffles.
    #[arg(long, env = "DDP_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: ManifestArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Axis to sweep: prompt-mode, branch-mode, pcd, or attach-depth.
    axis: String,
    #[command(flatten)]
    overrides: ManifestArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also run a deliberately corrupted check to demonstrate that failures
    /// are reported with the offending name.
    #[arg(long)]
    demo_failure: bool,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Datagen(args) => cmd_datagen(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn cmd_datagen(args: &DatagenArgs) -> Result<()> {
    let mut spec = synth20(args.seed);
    if let Some(noise) = args.noise {
        spec.noise_std = noise;
    }
    if let Some(rows) = args.rows {
        spec.grid_rows = rows;
    }
    if let Some(cols) = args.cols {
        spec.grid_cols = cols;
    }
    if let Some(channels) = args.channels {
        spec.grid_channels = channels;
    }
    if let Some(n) = args.train_per_class {
        spec.train_per_class = n;
    }
    if let Some(n) = args.test_per_class {
        spec.test_per_class = n;
    }
    let (train, test) = generate(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    for ds in [&train, &test] {
        let path = args.out.join(format!("{}.ddp", ds.split));
        save_dataset(ds, &path)?;
        println!(
            "wrote {} ({} images, {} classes, {}x{}x{} grid)",
            path.display(),
            ds.num_images(),
            ds.num_classes(),
            spec.grid_rows,
            spec.grid_cols,
            spec.grid_channels,
        );
    }
    Ok(())
}

/// Applies flag/environment overrides on top of the manifest file (or the
/// defaults when no file is given).
fn resolve_manifest(args: &ManifestArgs) -> Result<RunManifest> {
    let mut m = match &args.manifest {
        Some(path) => RunManifest::load(path)?,
        None => RunManifest::default(),
    };
    if let Some(v) = &args.dataset {
        m.dataset = v.clone();
    }
    if let Some(v) = &args.out {
        m.out = v.clone();
    }
    if let Some(v) = &args.schedule {
        (m.total_classes, m.base_classes, m.increment) = parse_schedule_spec(v)?;
    }
    if let Some(v) = &args.pcd {
        m.pcd = parse_pcd_spec(v)?;
    }
    if let Some(v) = &args.prompt_mode {
        m.prompt_mode = parse_prompt_mode(v)?;
    }
    if let Some(v) = &args.branch_mode {
        m.branch_mode = parse_branch_mode(v)?;
    }
    if let Some(v) = args.attach_depth {
        m.attach_depth = v;
    }
    if let Some(v) = args.epochs {
        m.epochs = v;
    }
    if let Some(v) = args.batch_size {
        m.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        m.learning_rate = v;
    }
    if let Some(v) = args.prompt_len {
        m.prompt_len = v;
    }
    if let Some(v) = args.freeze_past {
        m.freeze_past = v;
    }
    if let Some(v) = args.init_std {
        m.init_std = v;
    }
    if let Some(v) = args.threshold {
        m.threshold = v;
    }
    if let Some(v) = args.hiconf_delta {
        m.hiconf_delta = v;
    }
    if let Some(v) = args.seed {
        m.seed = v;
    }
    Ok(m)
}

fn load_split(dir: &str, split: &str) -> Result<Dataset> {
    let path = Path::new(dir).join(format!("{split}.ddp"));
    let ds = ddp_core::datagen::load_dataset(&path)?;
    if ds.split != split {
        return Err(DdpError::Config(format!(
            "{} holds the `{}` split, expected `{split}`",
            path.display(),
            ds.split
        )));
    }
    Ok(ds)
}

/// Trains and evaluates the full sequence a manifest names, printing one
/// progress line per task, and returns the finished state and report.
fn execute(m: &RunManifest) -> Result<(RunState, MetricsReport)> {
    let schedule = m.schedule()?;
    let config = m.train_config()?;
    let train = load_split(&m.dataset, "train")?;
    let test = load_split(&m.dataset, "test")?;
    let mut scheduled = schedule.all_classes();
    scheduled.dedup();
    let mut dataset_classes = train.class_ids.clone();
    dataset_classes.sort_unstable();
    if scheduled != dataset_classes {
        return Err(DdpError::Schedule(format!(
            "schedule covers {} classes but the dataset labels {}",
            scheduled.len(),
            dataset_classes.len()
        )));
    }
    let mut state = RunState::new(config, schedule.clone(), (train.grid_rows, train.grid_cols, train.grid_channels))?;
    for t in 0..schedule.num_tasks() {
        train_task(&mut state, t, &train)?;
        let outcome = evaluate(&mut state, t, &test)?;
        let losses = &state.epoch_losses[t];
        let loss = match (losses.first(), losses.last()) {
            (Some(first), Some(last)) => format!("loss {first:.4} -> {last:.4}"),
            _ => "nothing trainable".to_string(),
        };
        let base = &outcome.records[0];
        println!(
            "task {}/{}: {} | {} classes | mAP {:.4} CF1 {:.4} OF1 {:.4} FPR {:.4} | tau {:.3}",
            t + 1,
            schedule.num_tasks(),
            loss,
            base.classes_evaluated,
            base.map,
            base.cf1,
            base.of1,
            base.fpr,
            outcome.tau,
        );
        state.records.extend(outcome.records);
    }
    let report = aggregate(&state.records, &m.hash())?;
    Ok((state, report))
}

/// Writes the four run artifacts into `dir`.
fn write_artifacts(dir: &Path, m: &RunManifest, state: &RunState, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    std::fs::write(dir.join("curves.csv"), report.to_csv())?;
    state
        .store
        .save_checkpoint(&dir.join("prompts.ckpt"), &m.hash())?;
    m.save(&dir.join("manifest.txt"))?;
    Ok(())
}

fn print_summary(report: &MetricsReport) {
    println!("view  point   {:>7} {:>7} {:>7} {:>7}", "mAP", "CF1", "OF1", "FPR");
    for (view, table) in [("last", &report.last), ("avg", &report.avg)] {
        for (point, s) in table {
            println!(
                "{view:<5} {point:<7} {:.5} {:.5} {:.5} {:.5}",
                s.map, s.cf1, s.of1, s.fpr
            );
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let m = resolve_manifest(&args.overrides)?;
    println!("manifest {}", m.hash());
    let (state, report) = execute(&m)?;
    write_artifacts(Path::new(&m.out), &m, &state, &report)?;
    print_summary(&report);
    println!("artifacts in {}", m.out);
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let base = resolve_manifest(&args.overrides)?;
    // Each row tweaks exactly one knob of the shared configuration; the
    // global row also unfreezes past prompts, making it the continually
    // overwritten fine-tuning reference rather than train-once-then-stop.
    let rows: Vec<(String, RunManifest)> = match args.axis.as_str() {
        "prompt-mode" => ["none", "global", "task-specific", "class-specific"]
            .iter()
            .map(|name| {
                let mut m = base.clone();
                m.prompt_mode = parse_prompt_mode(name)?;
                m.freeze_past = name != &"global";
                Ok((name.to_string(), m))
            })
            .collect::<Result<_>>()?,
        "branch-mode" => ["none", "neg-only", "pos-only", "both"]
            .iter()
            .map(|name| {
                let mut m = base.clone();
                m.branch_mode = parse_branch_mode(name)?;
                Ok((name.to_string(), m))
            })
            .collect::<Result<_>>()?,
        "pcd" => {
            let on = base.pcd.unwrap_or(ddp_core::manifest::PcdParams {
                tau_max: 7.0,
                gamma: 0.2,
            });
            let mut off_m = base.clone();
            off_m.pcd = None;
            let mut on_m = base.clone();
            on_m.pcd = Some(on);
            vec![("off".to_string(), off_m), ("on".to_string(), on_m)]
        }
        "attach-depth" => [1usize, 3, 6]
            .iter()
            .map(|&d| {
                let mut m = base.clone();
                m.attach_depth = d;
                (format!("depth-{d}"), m)
            })
            .collect(),
        other => {
            return Err(DdpError::Config(format!(
                "unknown ablation axis `{other}` (expected prompt-mode, branch-mode, pcd, or attach-depth)"
            )))
        }
    };

    let mut table = Vec::new();
    let mut csv = String::from("row,last_map,avg_map,last_cf1,last_of1,last_fpr,last_fpr_hiconf\n");
    for (name, mut m) in rows {
        m.out = format!("{}/{}/{}", base.out, args.axis, name);
        println!("--- {} = {name} ---", args.axis);
        let (state, report) = execute(&m)?;
        write_artifacts(Path::new(&m.out), &m, &state, &report)?;
        let last_base = &report.last["base"];
        let avg_base = &report.avg["base"];
        let row = (
            name.clone(),
            last_base.map,
            avg_base.map,
            last_base.cf1,
            last_base.of1,
            last_base.fpr,
            report.last["hiconf"].fpr,
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.0, row.1, row.2, row.3, row.4, row.5, row.6
        ));
        table.push(row);
    }
    std::fs::create_dir_all(Path::new(&base.out).join(&args.axis))?;
    std::fs::write(Path::new(&base.out).join(&args.axis).join("ablation.csv"), csv)?;

    println!(
        "\n{:<16} {:>9} {:>9} {:>9} {:>9} {:>9} {:>11}",
        args.axis, "last mAP", "avg mAP", "last CF1", "last OF1", "last FPR", "hiconf FPR"
    );
    for (name, map, avg, cf1, of1, fpr, hifpr) in &table {
        println!(
            "{name:<16} {map:>9.4} {avg:>9.4} {cf1:>9.4} {of1:>9.4} {fpr:>9.4} {hifpr:>11.4}"
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut results = run_battery()?;
    if args.demo_failure {
        results.push(corrupted_fixture()?);
    }
    let mut all_passed = true;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<24} max rel err {:.3e}", r.name, r.max_rel_err);
        all_passed &= r.passed();
    }
    if all_passed {
        println!("all {} checks within {BATTERY_TOLERANCE:.0e}", results.len());
        Ok(())
    } else {
        let worst = results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name)
            .collect::<Vec<_>>()
            .join(", ");
        Err(DdpError::Numeric(format!(
            "gradient check failed for: {worst}"
        )))
    }
}

/// A check whose loss silently changes between the analytic pass and the
/// finite-difference probes — exactly what a corrupted backward rule looks
/// like to the checker — so the failure path stays demonstrably alive.
fn corrupted_fixture() -> Result<GradCheckResult> {
    let values = Rng::stream(7, "corrupted", 0).gaussian_vec(6, 0.8);
    let p = Parameter::new("corrupted", Tensor::new(vec![2, 3], values)?);
    let mut calls = 0usize;
    let max_rel_err = finite_diff_check(
        |tape, leaves| {
            calls += 1;
            let x = leaves[0];
            let y = tape.mul(x, x)?;
            let y = if calls > 1 { tape.scale(y, 1.25)? } else { y };
            tape.sum_all(y)
        },
        std::slice::from_ref(&p),
        1e-5,
    )?;
    Ok(GradCheckResult {
        name: "corrupted-fixture",
        max_rel_err,
    })
}
