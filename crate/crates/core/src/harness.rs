//! Ablation sweeps over one or more config axes, seed aggregation into a
//! comparison table, and paired IoU comparisons between mask sources.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::config::RunConfig;
use crate::data::SceneSample;
use crate::encoders::Modality;
use crate::error::{invalid, Result};
use crate::explain::{best_iou, summarize, Explainer, Summary};
use crate::masking::random_mask_baseline;
use crate::pipeline::{finetune_and_evaluate, pretrain};
use crate::tensor::Tensor;
use crate::vqa::{EvalReport, FinetuneState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "lambda")]
    Lambda,
    #[serde(rename = "N_v", alias = "n_v")]
    NV,
    #[serde(rename = "N_t", alias = "n_t")]
    NT,
    #[serde(rename = "augmentation")]
    Augmentation,
    #[serde(rename = "sharing")]
    Sharing,
    #[serde(rename = "unified")]
    Unified,
}

impl Axis {
    /// The `RunConfig` field the axis sets.
    pub fn field(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::Lambda => "lambda",
            Axis::NV => "n_v",
            Axis::NT => "n_t",
            Axis::Augmentation => "augmentation",
            Axis::Sharing => "sharing",
            Axis::Unified => "unified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisValues {
    pub axis: Axis,
    pub values: Vec<Value>,
}

pub fn default_seeds() -> Vec<u64> {
    (1..=5).map(|i| i * 100).collect()
}

/// Seeds 100 to 1000 in steps of 100.
pub fn ten_seeds() -> Vec<u64> {
    (1..=10).map(|i| i * 100).collect()
}

/// A sweep over `axis`, optionally crossed with further `grid` axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<Value>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: RunConfig,
    #[serde(default)]
    pub grid: Vec<AxisValues>,
}

/// One cell of the grid: its label and the config without a seed applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    fn axes(&self) -> Vec<AxisValues> {
        let mut axes = vec![AxisValues {
            axis: self.axis,
            values: self.values.clone(),
        }];
        axes.extend(self.grid.iter().cloned());
        axes
    }

    pub fn validate(&self) -> Result<()> {
        let axes = self.axes();
        for (i, a) in axes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(invalid(format!("axis {} has no values", a.axis.field())));
            }
            if axes[..i].iter().any(|b| b.axis == a.axis) {
                return Err(invalid(format!("axis {} appears twice", a.axis.field())));
            }
        }
        if self.seeds.is_empty() {
            return Err(invalid("sweep needs at least one seed"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("sweep seeds must be distinct"));
        }
        self.base.validate()?;
        self.variants().map(drop)
    }

    /// Cartesian product of the axes, first axis varying slowest.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        let mut out = vec![(Vec::<String>::new(), serde_json::to_value(&self.base)?)];
        for a in self.axes() {
            let mut next = Vec::new();
            for (labels, json) in &out {
                for v in &a.values {
                    let mut json = json.clone();
                    json[a.axis.field()] = v.clone();
                    let mut labels = labels.clone();
                    labels.push(format!("{}={}", a.axis.field(), render_value(v)));
                    next.push((labels, json));
                }
            }
            out = next;
        }
        out.into_iter()
            .map(|(labels, json)| {
                let config: RunConfig = serde_json::from_value(json)?;
                config.validate()?;
                Ok(Variant {
                    label: labels.join(","),
                    config,
                })
            })
            .collect()
    }
}

/// Result of one pretrain, fine-tune and evaluate run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub mean_best_iou: f64,
    /// Divergence message when the run was excluded.
    pub diverged: Option<String>,
}

/// Mean best-IoU of the vision masks over the held-out samples.
pub fn held_out_iou(ex: &Explainer, samples: &[SceneSample]) -> Result<f64> {
    let held = held_out(samples);
    if held.is_empty() {
        return Err(invalid("no held-out samples for IoU"));
    }
    let mut total = 0.0;
    for s in held {
        total += best_iou(&ex.vision_masks(&s.image)?.masks, &s.gt_regions)?;
    }
    Ok(total / held.len() as f64)
}

/// Pretrains, fine-tunes and evaluates `config` on `samples`.
pub fn run_one(label: &str, config: &RunConfig, samples: &[SceneSample]) -> Result<RunRecord> {
    let mut rec = RunRecord {
        variant: label.to_string(),
        seed: config.seed,
        report: None,
        mean_best_iou: f64::NAN,
        diverged: None,
    };
    let p = pretrain(config, samples, |_| {})?;
    if let Some(e) = p.divergence {
        rec.diverged = Some(e.to_string());
        return Ok(rec);
    }
    rec.mean_best_iou = held_out_iou(&Explainer::new(&p.state.store, &p.state.model), samples)?;
    let ft = FinetuneState::new(p.state.store, p.state.model, config.finetune(), config.seed)?;
    let done = finetune_and_evaluate(config, ft, samples)?;
    if let Some(e) = done.divergence {
        rec.diverged = Some(e.to_string());
        return Ok(rec);
    }
    rec.report = Some(done.report);
    Ok(rec)
}

/// Worker threads for independent runs: `UNICLAM_THREADS`, else the
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("UNICLAM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` on up to `threads` workers, returning results in job order.
fn parallel_map<T: Sync, R: Send>(jobs: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> = jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("job ran"))
        .collect()
}

/// Runs every variant under every seed and aggregates. `on_run` sees each
/// record as it finishes.
pub fn run_sweep(
    spec: &SweepSpec,
    samples: &[SceneSample],
    on_run: impl Fn(&RunRecord) + Sync,
) -> Result<ComparisonTable> {
    spec.validate()?;
    let variants = spec.variants()?;
    let jobs: Vec<(String, RunConfig)> = variants
        .iter()
        .flat_map(|v| {
            spec.seeds.iter().map(|&seed| {
                let config = RunConfig {
                    seed,
                    ..v.config.clone()
                };
                (v.label.clone(), config)
            })
        })
        .collect();
    let results = parallel_map(&jobs, thread_cap(), |(label, config)| {
        let r = run_one(label, config, samples);
        if let Ok(rec) = &r {
            on_run(rec);
        }
        r
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let order: Vec<String> = variants.into_iter().map(|v| v.label).collect();
    Ok(ComparisonTable::aggregate(&order, runs))
}

/// Per-variant aggregate over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub variant: String,
    pub n_runs: usize,
    pub n_diverged: usize,
    pub accuracy_open: Summary,
    pub accuracy_closed: Summary,
    pub accuracy_overall: Summary,
    pub mean_best_iou: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
    pub runs: Vec<RunRecord>,
}

/// Summary of values taken in ascending order, so the result does not
/// depend on the order seeds ran in.
fn summarize_sorted(mut xs: Vec<f64>) -> Summary {
    xs.sort_by(f64::total_cmp);
    summarize(&xs)
}

impl ComparisonTable {
    /// Aggregates non-diverged runs per variant in `order`.
    pub fn aggregate(order: &[String], runs: Vec<RunRecord>) -> Self {
        let rows = order
            .iter()
            .map(|label| {
                let mine: Vec<&RunRecord> = runs.iter().filter(|r| &r.variant == label).collect();
                let ok: Vec<&EvalReport> = mine.iter().filter_map(|r| r.report.as_ref()).collect();
                let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
                    summarize_sorted(ok.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect())
                };
                TableRow {
                    variant: label.clone(),
                    n_runs: ok.len(),
                    n_diverged: mine.len() - ok.len(),
                    accuracy_open: col(&|r| r.accuracy_open),
                    accuracy_closed: col(&|r| r.accuracy_closed),
                    accuracy_overall: col(&|r| Some(r.accuracy_overall)),
                    mean_best_iou: summarize_sorted(
                        mine.iter()
                            .filter(|r| r.report.is_some())
                            .map(|r| r.mean_best_iou)
                            .collect(),
                    ),
                }
            })
            .collect();
        Self { rows, runs }
    }

    pub fn row(&self, variant: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Per-seed differences `a - b` of overall accuracy over seeds where
    /// both runs completed.
    pub fn paired_overall_differences(&self, a: &str, b: &str) -> Vec<f64> {
        let overall = |v: &str, seed: u64| {
            self.runs
                .iter()
                .find(|r| r.variant == v && r.seed == seed)
                .and_then(|r| r.report.as_ref())
                .map(|r| r.accuracy_overall)
        };
        let mut seeds: Vec<u64> = self.runs.iter().filter(|r| r.variant == a).map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds
            .into_iter()
            .filter_map(|s| Some(overall(a, s)? - overall(b, s)?))
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "variant,n_runs,n_diverged,open_mean,open_stdev,closed_mean,closed_stdev,overall_mean,overall_stdev,\
             best_iou_mean,best_iou_stdev\n",
        );
        for r in &self.rows {
            out += &format!(
                "\"{}\",{},{},{},{},{},{},{},{},{},{}\n",
                r.variant,
                r.n_runs,
                r.n_diverged,
                r.accuracy_open.mean,
                r.accuracy_open.stdev,
                r.accuracy_closed.mean,
                r.accuracy_closed.stdev,
                r.accuracy_overall.mean,
                r.accuracy_overall.stdev,
                r.mean_best_iou.mean,
                r.mean_best_iou.stdev
            );
        }
        out
    }

    pub fn markdown(&self) -> String {
        let cell = |s: &Summary| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.stdev);
        let mut out =
            String::from("| Variant | Runs | Open | Closed | Overall | Best IoU |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let runs = if r.n_diverged > 0 {
                format!("{} ({} diverged)", r.n_runs, r.n_diverged)
            } else {
                r.n_runs.to_string()
            };
            out += &format!(
                "| {} | {} | {} | {} | {} | {:.3} ± {:.3} |\n",
                r.variant,
                runs,
                cell(&r.accuracy_open),
                cell(&r.accuracy_closed),
                cell(&r.accuracy_overall),
                r.mean_best_iou.mean,
                r.mean_best_iou.stdev
            );
        }
        let excluded: usize = self.rows.iter().map(|r| r.n_diverged).sum();
        if excluded > 0 {
            out += &format!("\n{excluded} diverged run(s) excluded from aggregation.\n");
        }
        out
    }
}

/// Where the compared masks come from.
pub enum MaskSource<'a> {
    Model(Explainer<'a>),
    /// Random one-hot masks; sample `i` uses seed `seed + i`.
    Random {
        seed: u64,
        n: usize,
    },
    /// Precomputed masks `[N, H, W]`, one entry per sample.
    Fixed(Vec<Tensor>),
}

impl MaskSource<'_> {
    pub fn vision_masks(&self, i: usize, image: &Tensor) -> Result<Tensor> {
        match self {
            MaskSource::Model(ex) => Ok(ex.vision_masks(image)?.masks),
            MaskSource::Random { seed, n } => {
                Ok(random_mask_baseline(seed.wrapping_add(i as u64), Modality::Vision, *n, image.shape())?.masks)
            }
            MaskSource::Fixed(masks) => masks
                .get(i)
                .cloned()
                .ok_or_else(|| invalid(format!("no fixed masks for sample {i}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouSample {
    pub adversarial: f64,
    pub baseline: f64,
    pub attention: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouComparison {
    pub samples: Vec<IouSample>,
    pub mean_adversarial: f64,
    pub mean_baseline: f64,
    pub mean_attention: f64,
    /// Mean of adversarial minus baseline.
    pub mean_diff_baseline: f64,
    /// Mean of adversarial minus attention.
    pub mean_diff_attention: f64,
    pub wins: usize,
    pub losses: usize,
    /// Two-sided sign-test p-value of adversarial against baseline.
    pub sign_test_p: f64,
}

impl IouComparison {
    pub fn csv(&self) -> String {
        let mut out = String::from("sample,adversarial,baseline,attention\n");
        for (i, s) in self.samples.iter().enumerate() {
            out += &format!("{i},{},{},{}\n", s.adversarial, s.baseline, s.attention);
        }
        out
    }
}

/// Two-sided sign test on `wins` against `losses`, ties already removed.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses) as u64;
    let b = Binomial::new(0.5, n).expect("valid binomial");
    (2.0 * b.cdf(k)).min(1.0)
}

/// Per-sample best-IoU of the adversarial model's masks, the baseline's
/// masks and the adversarial model's thresholded attention map.
pub fn iou_comparison(adv: &Explainer, baseline: &MaskSource, samples: &[SceneSample]) -> Result<IouComparison> {
    if samples.is_empty() {
        return Err(invalid("IoU comparison needs samples"));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let att = adv.attention_map(&s.image)?;
        let att = att.clone().reshape(vec![1, att.shape()[0], att.shape()[1]])?;
        rows.push(IouSample {
            adversarial: best_iou(&adv.vision_masks(&s.image)?.masks, &s.gt_regions)?,
            baseline: best_iou(&baseline.vision_masks(i, &s.image)?, &s.gt_regions)?,
            attention: best_iou(&att, &s.gt_regions)?,
        });
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&IouSample) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let wins = rows.iter().filter(|r| r.adversarial > r.baseline).count();
    let losses = rows.iter().filter(|r| r.adversarial < r.baseline).count();
    Ok(IouComparison {
        mean_adversarial: mean(&|r| r.adversarial),
        mean_baseline: mean(&|r| r.baseline),
        mean_attention: mean(&|r| r.attention),
        mean_diff_baseline: mean(&|r| r.adversarial - r.baseline),
        mean_diff_attention: mean(&|r| r.adversarial - r.attention),
        wins,
        losses,
        sign_test_p: sign_test(wins, losses),
        samples: rows,
    })
}

/// Held-out samples of a corpus.
pub fn held_out(samples: &[SceneSample]) -> &[SceneSample] {
    &samples[samples.len() * 4 / 5..]
}
