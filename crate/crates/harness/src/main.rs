use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use tabimg_core::gradsuite::run_gradient_suite;
use tabimg_harness::eval::{
    evaluate_classification, evaluate_imputation, mean_impute_baseline, render_table, run_missingness_sweep,
    EvalReport, SweepPlan,
};
use tabimg_harness::finetune::selection_metric;
use tabimg_harness::io::{create_dir, write_dataset, write_file, write_json, write_jsonl};
use tabimg_harness::pipeline::{finetune_checkpoint, importance_ranking, load_data, pretrain};
use tabimg_harness::{Checkpoint, HarnessError, Result, RunConfig};

const PRETRAINED: &str = "pretrained.ckpt";
const FINETUNED: &str = "finetuned.ckpt";

/// Self-supervised image/tabular pre-training, fine-tuning and evaluation.
#[derive(Debug, Parser)]
#[command(name = "tabimg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving every output.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset as a dataset directory.
    Synth,
    /// Pre-train a model; writes a checkpoint and the loss trace.
    Pretrain,
    /// Fine-tune the ensemble classifiers of a pre-trained checkpoint.
    Finetune,
    /// Classification report for a fine-tuned checkpoint, imputation
    /// report for a pre-trained one.
    Eval,
    /// Reconstruction RMSE against the mean-imputation baseline.
    Impute,
    /// Classification under every configured missingness scenario.
    Sweep,
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// The configured checkpoint, else the first of `defaults` found in the
    /// output directory.
    fn checkpoint(&self, defaults: &[&str]) -> Result<Checkpoint> {
        let path = match &self.cfg.checkpoint {
            Some(p) => p.clone(),
            None => defaults
                .iter()
                .map(|d| self.path(d))
                .find(|p| p.exists())
                .ok_or_else(|| {
                    HarnessError::config(format!(
                        "no checkpoint: set `checkpoint` or run earlier steps into {}",
                        self.out.display()
                    ))
                })?,
        };
        Checkpoint::load(&path)
    }

    fn write_reports(&self, stem: &str, reports: &[EvalReport]) -> Result<()> {
        write_json(&self.path(&format!("{stem}.json")), reports)?;
        let table = render_table(reports);
        write_file(&self.path(&format!("{stem}.txt")), table.as_bytes())?;
        print!("{table}");
        Ok(())
    }
}

fn synth(run: &Run) -> Result<()> {
    let split = load_data(&run.cfg)?;
    write_dataset(&run.out, &split)?;
    println!(
        "wrote {} / {} / {} samples to {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        run.out.display()
    );
    Ok(())
}

fn pretrain_cmd(run: &Run) -> Result<()> {
    let split = load_data(&run.cfg)?;
    let (ckpt, report) = pretrain(&run.cfg, &split, |rec| {
        if rec.step % 50 == 0 {
            eprintln!("epoch {} step {} loss {:.4}", rec.epoch, rec.step, rec.l_total);
        }
    })?;
    write_jsonl(&run.path("loss_trace.jsonl"), &report.trace)?;
    write_json(&run.path("epoch_means.json"), &report.epoch_means)?;
    ckpt.save(&run.path(PRETRAINED))?;
    if let (Some(first), Some(last)) = (report.epoch_means.first(), report.epoch_means.last()) {
        println!(
            "mean total loss {first:.4} -> {last:.4} over {} epochs",
            report.epoch_means.len()
        );
    }
    Ok(())
}

fn finetune_cmd(run: &Run) -> Result<()> {
    let pretrained = run.checkpoint(&[PRETRAINED])?;
    let split = load_data(&run.cfg)?;
    let (ckpt, outcome) = finetune_checkpoint(&run.cfg, &pretrained, &split)?;
    write_jsonl(&run.path("finetune_history.jsonl"), &outcome.history)?;
    ckpt.save(&run.path(FINETUNED))?;
    println!(
        "best validation {} {:.4} at epoch {}",
        outcome.metric.name(),
        outcome.best_metric,
        outcome.best_epoch
    );
    Ok(())
}

fn imputation_reports(run: &Run, ckpt: &Checkpoint) -> Result<Vec<EvalReport>> {
    let split = load_data(&run.cfg)?;
    let e = &run.cfg.eval;
    let digest = ckpt.digest();
    let mut reports = evaluate_imputation(
        &ckpt.model,
        &split.test,
        &e.impute_sigmas,
        e.mask_categorical,
        run.cfg.seed,
        e.batch_size,
        &digest,
    )?;
    for &sigma in &e.impute_sigmas {
        reports.push(mean_impute_baseline(
            &split.test,
            sigma,
            e.mask_categorical,
            run.cfg.seed,
            &digest,
        )?);
    }
    Ok(reports)
}

fn eval_cmd(run: &Run) -> Result<()> {
    let ckpt = run.checkpoint(&[FINETUNED, PRETRAINED])?;
    let reports = match ckpt.model.classes() {
        Some(classes) => {
            let split = load_data(&run.cfg)?;
            vec![evaluate_classification(
                &ckpt.model,
                &split.test,
                None,
                selection_metric(classes),
                run.cfg.seed,
                run.cfg.eval.batch_size,
                &ckpt.digest(),
            )?]
        }
        None => imputation_reports(run, &ckpt)?,
    };
    run.write_reports("eval_report", &reports)
}

fn impute_cmd(run: &Run) -> Result<()> {
    let ckpt = run.checkpoint(&[PRETRAINED, FINETUNED])?;
    let reports = imputation_reports(run, &ckpt)?;
    run.write_reports("impute_report", &reports)
}

fn sweep_cmd(run: &Run) -> Result<()> {
    let ckpt = run.checkpoint(&[FINETUNED])?;
    let classes = ckpt
        .model
        .classes()
        .ok_or_else(|| HarnessError::config("sweep needs a fine-tuned checkpoint"))?;
    let split = load_data(&run.cfg)?;
    let ranking = importance_ranking(&split, run.cfg.seed)?;
    write_json(&run.path("importance.json"), &ranking)?;
    let e = &run.cfg.eval;
    let plan = SweepPlan {
        kinds: &e.sweep_kinds,
        sigmas: &e.sweep_sigmas,
        seeds: &e.sweep_seeds,
        ranking: &ranking,
        metric: selection_metric(classes),
        batch_size: e.batch_size,
    };
    let reports = run_missingness_sweep(&ckpt.model, &split.test, &plan, &ckpt.digest())?;
    run.write_reports("sweep_report", &reports)
}

fn gradcheck_cmd(run: &Run) -> Result<bool> {
    let mut log = String::new();
    let report = run_gradient_suite(10, |c| {
        let line = format!(
            "{} {:<22} seed {:<2} worst {:<24} rel err {:.2e}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.seed,
            c.worst.slot,
            c.worst.rel_err
        );
        println!("{line}");
        let _ = writeln!(log, "{line}");
    })?;
    let passed = report.cases.iter().filter(|c| c.passed).count();
    let summary = format!(
        "{passed}/{} cases passed in {:.1} s",
        report.cases.len(),
        report.seconds
    );
    println!("{summary}");
    let _ = writeln!(log, "{summary}");
    write_file(&run.path("gradcheck.txt"), log.as_bytes())?;
    Ok(report.all_passed())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| HarnessError::config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.finish()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<bool> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    create_dir(&cli.out)?;
    let run = Run { cfg, out: cli.out };
    match cli.command {
        Command::Synth => synth(&run)?,
        Command::Pretrain => pretrain_cmd(&run)?,
        Command::Finetune => finetune_cmd(&run)?,
        Command::Eval => eval_cmd(&run)?,
        Command::Impute => impute_cmd(&run)?,
        Command::Sweep => sweep_cmd(&run)?,
        Command::Gradcheck => return gradcheck_cmd(&run),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
