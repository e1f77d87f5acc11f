//! Command-line commands. Every file is written atomically.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::certify::{certification_suite, CERTIFY_TOLERANCE};
use crate::checkpoint::{read_checkpoint, store_tensors, write_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_corpus, read_dataset, write_atomic, write_dataset, SceneSample};
use crate::error::{invalid, Error, Result};
use crate::explain::{bench_explain, best_iou, pgm, region_ious, Explainer};
use crate::harness::{run_sweep, SweepSpec};
use crate::metrics::metrics_csv;
use crate::pipeline::{evaluate_held_out, finetune_and_evaluate, init_state, load_finetune, load_model, pretrain};
use crate::vqa::EvalReport;

pub const CHECKPOINT_FILE: &str = "checkpoint.uclm";
pub const FINETUNED_FILE: &str = "finetuned.uclm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const DATASET_FILE: &str = "dataset.ucld";
pub const IOU_REPORT_FILE: &str = "iou_report.json";
pub const BENCH_FILE: &str = "bench_explain.csv";

#[derive(Debug, Parser)]
#[command(
    name = "uniclam",
    version,
    about = "Contrastive pretraining with adversarial masks on synthetic VQA scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Run configuration (JSON); defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scene corpus to OUT/dataset.ucld.
    GenData(Common),
    /// Pretrain encoders and mask generators.
    Pretrain(Common),
    /// Fine-tune a pretrained checkpoint on VQA and evaluate.
    Finetune(Common),
    /// Evaluate a fine-tuned checkpoint on the held-out split.
    Evaluate(Common),
    /// Write masks, attention maps and an IoU report for the first samples.
    ExportMasks(Common),
    /// Time mask generation against attention extraction.
    BenchExplain {
        #[command(flatten)]
        common: Common,
        /// Instances to time.
        #[arg(long, default_value_t = 100)]
        n_instances: usize,
    },
    /// Check every loss gradient against finite differences.
    Gradcheck,
    /// Run an ablation sweep and write the comparison table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Sweep specification (JSON).
        #[arg(long)]
        spec: PathBuf,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => 2,
        Error::Compat { .. }
        | Error::Format { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::InvalidArgument(_)
        | Error::TokenOutOfRange { .. } => 3,
        _ => 1,
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

impl Common {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| with_path(e, p))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self) -> Result<Vec<SceneSample>> {
        let p = self.data.as_ref().ok_or_else(|| invalid("--data is required"))?;
        read_dataset(p).map_err(|e| with_path(e, p))
    }

    fn checkpoint(&self) -> Result<Vec<(String, crate::tensor::Tensor)>> {
        let p = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| invalid("--checkpoint is required"))?;
        read_checkpoint(p).map_err(|e| with_path(e, p))
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn gen_data(c: &Common) -> Result<PathBuf> {
    let cfg = c.run_config()?;
    let path = c.out_file(DATASET_FILE)?;
    write_dataset(&generate_corpus(0, cfg.n_samples), &path)?;
    Ok(path)
}

/// Writes the checkpoint, metrics and config. A diverged run still writes
/// its last good checkpoint, then reports the divergence.
pub fn cmd_pretrain(c: &Common) -> Result<()> {
    let cfg = c.run_config()?;
    let samples = c.dataset()?;
    let p = pretrain(&cfg, &samples, |_| {})?;
    write_checkpoint(&c.out_file(CHECKPOINT_FILE)?, &store_tensors(&p.state.store))?;
    write_atomic(&c.out_file(METRICS_FILE)?, metrics_csv(&p.rows).as_bytes())?;
    write_atomic(&c.out_file(CONFIG_FILE)?, (cfg.to_json() + "\n").as_bytes())?;
    match p.divergence {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn cmd_finetune(c: &Common) -> Result<EvalReport> {
    let cfg = c.run_config()?;
    let samples = c.dataset()?;
    let st = load_finetune(&cfg, &c.checkpoint()?, false)?;
    let done = finetune_and_evaluate(&cfg, st, &samples)?;
    write_checkpoint(&c.out_file(FINETUNED_FILE)?, &store_tensors(&done.state.store))?;
    if let Some(e) = done.divergence {
        return Err(e);
    }
    write_json(&c.out_file(REPORT_FILE)?, &done.report)?;
    Ok(done.report)
}

pub fn cmd_evaluate(c: &Common) -> Result<EvalReport> {
    let cfg = c.run_config()?;
    let samples = c.dataset()?;
    let st = load_finetune(&cfg, &c.checkpoint()?, true)?;
    let report = evaluate_held_out(&st, &samples)?;
    write_json(&c.out_file(REPORT_FILE)?, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleIou {
    pub sample: usize,
    /// Best IoU over the masks for each planted region.
    pub region_ious: Vec<f64>,
    pub best_iou: f64,
    pub attention_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    pub threshold: f64,
    pub samples: Vec<SampleIou>,
    pub mean_best_iou: f64,
    pub mean_attention_iou: f64,
}

pub fn cmd_export_masks(c: &Common) -> Result<IouReport> {
    let cfg = c.run_config()?;
    let samples = c.dataset()?;
    let (store, model) = load_model(&cfg, &c.checkpoint()?)?;
    let ex = Explainer::new(&store, &model);
    let mut rows = Vec::new();
    for (i, s) in samples.iter().take(cfg.export_samples).enumerate() {
        let vm = ex.vision_masks(&s.image)?;
        for j in 0..vm.count() {
            write_atomic(&c.out_file(&format!("sample{i:03}_mask{j}.pgm"))?, &pgm(&vm.mask(j))?)?;
        }
        let tm = ex.text_masks(&s.caption_ids)?;
        let mut text = String::new();
        for j in 0..tm.count() {
            let vals: Vec<String> = tm.mask(j).data().iter().map(|v| v.to_string()).collect();
            text += &vals.join(" ");
            text.push('\n');
        }
        write_atomic(&c.out_file(&format!("sample{i:03}_text_masks.txt"))?, text.as_bytes())?;
        let att = ex.attention_map(&s.image)?;
        write_atomic(&c.out_file(&format!("sample{i:03}_attention.pgm"))?, &pgm(&att)?)?;
        let (h, w) = (att.shape()[0], att.shape()[1]);
        rows.push(SampleIou {
            sample: i,
            region_ious: region_ious(&vm.masks, &s.gt_regions)?,
            best_iou: best_iou(&vm.masks, &s.gt_regions)?,
            attention_iou: best_iou(&att.reshape(vec![1, h, w])?, &s.gt_regions)?,
        });
    }
    let n = rows.len().max(1) as f64;
    let report = IouReport {
        threshold: crate::explain::IOU_THRESHOLD,
        mean_best_iou: rows.iter().map(|r| r.best_iou).sum::<f64>() / n,
        mean_attention_iou: rows.iter().map(|r| r.attention_iou).sum::<f64>() / n,
        samples: rows,
    };
    write_json(&c.out_file(IOU_REPORT_FILE)?, &report)?;
    Ok(report)
}

/// Times explanations. Without `--checkpoint` the initialized model is
/// timed; the cost does not depend on parameter values.
pub fn cmd_bench_explain(c: &Common, n: usize) -> Result<String> {
    let cfg = c.run_config()?;
    let samples = c.dataset()?;
    let (store, model) = match &c.checkpoint {
        Some(_) => load_model(&cfg, &c.checkpoint()?)?,
        None => {
            let st = init_state(&cfg)?;
            (st.store, st.model)
        }
    };
    let csv = bench_explain(&Explainer::new(&store, &model), &samples, n)?.csv();
    write_atomic(&c.out_file(BENCH_FILE)?, csv.as_bytes())?;
    Ok(csv)
}

/// One line per certified loss; fails if any exceeds the tolerance.
pub fn cmd_gradcheck() -> Result<String> {
    let suite = certification_suite()?;
    let mut out = String::new();
    for cert in &suite {
        out += &format!(
            "{} {} max_rel_error={:.3e}\n",
            if cert.passed() { "PASS" } else { "FAIL" },
            cert.loss,
            cert.report.max_rel_error()
        );
    }
    if suite.iter().all(|c| c.passed()) {
        Ok(out)
    } else {
        print!("{out}");
        Err(Error::Backward(format!(
            "gradient check above tolerance {CERTIFY_TOLERANCE:e}"
        )))
    }
}

pub fn cmd_sweep(c: &Common, spec_path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| with_path(e.into(), spec_path))?;
    let spec = SweepSpec::from_json(&text)?;
    let samples = match &c.data {
        Some(_) => c.dataset()?,
        None => generate_corpus(0, spec.base.n_samples),
    };
    let table = run_sweep(&spec, &samples, |r| {
        eprintln!(
            "run {} seed {}: {}",
            r.variant,
            r.seed,
            match (&r.report, &r.diverged) {
                (Some(rep), _) => format!("overall {:.4}, best IoU {:.4}", rep.accuracy_overall, r.mean_best_iou),
                (None, Some(d)) => d.clone(),
                (None, None) => "no report".into(),
            }
        )
    })?;
    let mut runs = String::from("variant,seed,accuracy_open,accuracy_closed,accuracy_overall,mean_best_iou,diverged\n");
    for r in &table.runs {
        let f = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let rep = r.report.as_ref();
        runs += &format!(
            "\"{}\",{},{},{},{},{},{}\n",
            r.variant,
            r.seed,
            f(rep.and_then(|r| r.accuracy_open)),
            f(rep.and_then(|r| r.accuracy_closed)),
            f(rep.map(|r| r.accuracy_overall)),
            r.mean_best_iou,
            r.diverged.is_some()
        );
    }
    write_atomic(&c.out_file("comparison.csv")?, table.csv().as_bytes())?;
    write_atomic(&c.out_file("comparison.md")?, table.markdown().as_bytes())?;
    write_atomic(&c.out_file("runs.csv")?, runs.as_bytes())?;
    Ok(table.markdown())
}

/// Runs a parsed command, printing its summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => println!("wrote {}", gen_data(&c)?.display()),
        Command::Pretrain(c) => {
            cmd_pretrain(&c)?;
            println!("wrote {}", c.out.display());
        }
        Command::Finetune(c) => println!("{}", serde_json::to_string(&cmd_finetune(&c)?)?),
        Command::Evaluate(c) => println!("{}", serde_json::to_string(&cmd_evaluate(&c)?)?),
        Command::ExportMasks(c) => {
            let r = cmd_export_masks(&c)?;
            println!("mean best IoU {:.4} over {} samples", r.mean_best_iou, r.samples.len());
        }
        Command::BenchExplain { common, n_instances } => print!("{}", cmd_bench_explain(&common, n_instances)?),
        Command::Gradcheck => print!("{}", cmd_gradcheck()?),
        Command::Sweep { common, spec } => print!("{}", cmd_sweep(&common, &spec)?),
    }
    Ok(())
}

/// Parses `args` and runs, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
