use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ptsm_core::harness::{self, ablation_csv, support_split, write_json};
use ptsm_core::synthdata::{self, Dataset, SplitPlan, SyntheticSpec};
use ptsm_core::trainer::{adapt_few_shot, apply_ablation, evaluate};
use ptsm_core::{checkpoint, io, Error, PtsmConfig, Result};

#[derive(Parser)]
#[command(name = "ptsm", version, about = "Cross-subject EEG decoding with personalised masks and decoupled features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train on a subject split and write checkpoint, log and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on chosen subjects.
    Eval(EvalArgs),
    /// Train every ablation row on the same split and write a table.
    Ablate(AblateArgs),
    /// Finite-difference check of every loss term and the full objective.
    Gradcheck(GradcheckArgs),
    /// Few-shot personalisation of a checkpoint on one subject.
    Adapt(AdaptArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset path; the JSON sidecar goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// Generator settings as JSON (any subset of fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    trials_per_cell: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Model and training settings as JSON (any subset of fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated test subject ids (default: the last subject).
    #[arg(long, value_delimiter = ',')]
    subjects_test: Vec<usize>,
    /// Comma-separated validation subject ids (default: the subject after the last test subject).
    #[arg(long, value_delimiter = ',')]
    subjects_val: Vec<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-trial masks of the test subjects to `<out>/masks.json`.
    #[arg(long)]
    export_masks: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated subject ids to evaluate (default: all).
    #[arg(long, value_delimiter = ',')]
    subjects_test: Vec<usize>,
    /// Metrics JSON path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-trial mask dump path.
    #[arg(long)]
    export_masks: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for `ablation.csv` and `ablation.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum probes per loss term.
    #[arg(long, default_value_t = 100)]
    probes: usize,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Subject to personalise for.
    #[arg(long)]
    subject: usize,
    /// Number of labelled support trials.
    #[arg(long, default_value_t = 20)]
    support: usize,
    /// Gradient steps (default: from the checkpoint config).
    #[arg(long)]
    steps: Option<usize>,
    /// Step size (default: from the checkpoint config).
    #[arg(long)]
    eta: Option<f64>,
    /// Output directory for `adapt.json` and the adapted checkpoint.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PtsmConfig> {
    let mut cfg = match path {
        Some(p) => PtsmConfig::from_json(&io::read_to_string(p)?)?,
        None => PtsmConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn plan_for(subjects: usize, test: &[usize], val: &[usize]) -> Result<SplitPlan> {
    let test = if test.is_empty() {
        vec![subjects - 1]
    } else {
        test.to_vec()
    };
    let mut plan = SplitPlan::rotate(subjects, &test)?;
    if !val.is_empty() {
        plan.validation = val.to_vec();
        plan.train = (0..subjects)
            .filter(|s| !test.contains(s) && !val.contains(s))
            .collect();
        plan.validate()?;
    }
    Ok(plan)
}

fn prepare(run: &RunArgs) -> Result<(PtsmConfig, Dataset, SplitPlan)> {
    let cfg = load_config(run.config.as_deref(), run.seed)?;
    let dataset = synthdata::load_dataset(&run.dataset)?;
    harness::check_dataset(&cfg, &dataset.meta)?;
    let plan = plan_for(dataset.meta.subjects, &run.subjects_test, &run.subjects_val)?;
    Ok((cfg, dataset, plan))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => serde_json::from_str::<SyntheticSpec>(&io::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.noise_std {
        spec.noise_std = n;
    }
    if let Some(n) = a.trials_per_cell {
        spec.trials_per_cell = n;
    }
    let ds = synthdata::generate(&spec)?;
    synthdata::save_dataset(&ds, &a.out)?;
    println!(
        "wrote {} trials (C={} T={} K={} S={}) to {}",
        ds.trials.len(),
        ds.meta.channels,
        ds.meta.samples,
        ds.meta.classes,
        ds.meta.subjects,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (cfg, dataset, plan) = prepare(&a.run)?;
    let outcome = harness::train_run(&cfg, &dataset, &plan)?;
    let mut manifest = harness::write_run(&a.out, &outcome, &cfg, &dataset, Some(&a.run.dataset), &plan)?;
    if a.export_masks {
        let path = a.out.join("masks.json");
        harness::export_masks(&outcome.state.model, &outcome.wiring, &outcome.test, &path)?;
        manifest.mask_export = Some(path.display().to_string());
        write_json(&a.out.join("manifest.json"), &manifest)?;
    }
    let acc = outcome.test_metrics.as_ref().map_or(f64::NAN, |m| m.accuracy);
    println!(
        "trained {} epochs (best {}), test accuracy {:.4}, outputs in {}",
        outcome.history.epochs.len(),
        outcome.history.best_epoch,
        acc,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, cfg) = checkpoint::load(&a.checkpoint)?;
    let dataset = synthdata::load_dataset(&a.dataset)?;
    harness::check_dataset(&cfg, &dataset.meta)?;
    let trials: Vec<_> = dataset
        .trials
        .iter()
        .filter(|t| a.subjects_test.is_empty() || a.subjects_test.contains(&t.s))
        .cloned()
        .collect();
    if trials.is_empty() {
        return Err(Error::Contract("no trials for the requested subjects".into()));
    }
    let wiring = apply_ablation(&cfg)?;
    let metrics = evaluate(&model, &wiring, &trials)?;
    if let Some(p) = &a.export_masks {
        harness::export_masks(&model, &wiring, &trials, p)?;
    }
    match &a.out {
        Some(p) => {
            write_json(p, &metrics)?;
            println!("accuracy {:.4} on {} trials, metrics in {}", metrics.accuracy, metrics.n, p.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialise")),
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let (cfg, dataset, plan) = prepare(&a.run)?;
    let rows = harness::run_ablation(&cfg, &dataset, &plan, |r| {
        eprintln!("{:<9} accuracy {:.4}", r.label, r.metrics.accuracy);
    })?;
    io::write_atomic(&a.out.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
    write_json(&a.out.join("ablation.json"), &rows)?;
    println!("wrote {} rows to {}", rows.len(), a.out.join("ablation.csv").display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let suite = harness::gradcheck_suite(a.seed, a.probes)?;
    let mut ok = true;
    for e in &suite {
        let pass = e.report.passed();
        ok &= pass;
        println!(
            "{} {:<26} probes {:>4}  max rel err {:.3e}",
            if pass { "PASS" } else { "FAIL" },
            e.name,
            e.report.probes,
            e.report.max_rel_err
        );
    }
    if let Some(p) = &a.out {
        write_json(p, &suite)?;
    }
    Ok(ok)
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let (model, cfg) = checkpoint::load(&a.checkpoint)?;
    let dataset = synthdata::load_dataset(&a.dataset)?;
    harness::check_dataset(&cfg, &dataset.meta)?;
    let (support, held_out) = support_split(&dataset.trials, a.subject, a.support)?;
    let steps = a.steps.unwrap_or(cfg.adaptation.steps);
    let eta = a.eta.unwrap_or(cfg.adaptation.eta);
    let wiring = apply_ablation(&cfg)?;
    let pre = evaluate(&model, &wiring, &held_out)?;
    let adapted = adapt_few_shot(&model, &wiring, &support, steps, eta)?;
    let post = evaluate(&adapted, &wiring, &held_out)?;
    checkpoint::save(&adapted, &cfg, &a.out.join("adapted.bin"))?;
    let report = serde_json::json!({
        "subject": a.subject,
        "support_trials": support.len(),
        "held_out_trials": held_out.len(),
        "steps": steps,
        "eta": eta,
        "pre": pre,
        "post": post,
    });
    write_json(&a.out.join("adapt.json"), &report)?;
    println!(
        "subject {} accuracy {:.4} -> {:.4} on {} held-out trials",
        a.subject,
        pre.accuracy,
        post.accuracy,
        held_out.len()
    );
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'")
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("error kind={kind} message=\"{}\"", one_line(message));
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("error kind=usage message=\"{}\"", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Adapt(a) => adapt(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return fail("gradcheck_failed", "at least one entry exceeded the tolerance"),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
