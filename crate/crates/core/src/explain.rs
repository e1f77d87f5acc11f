//! Explanations of a trained model: generated masks, attention maps, their
//! IoU against planted regions, PGM export and explanation timing.

use std::time::Instant;

use crate::data::{mask_iou, SceneSample};
use crate::error::{invalid, Result};
use crate::masking::MaskSet;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Binarization threshold for mask and attention IoU.
pub const IOU_THRESHOLD: f64 = 0.5;

/// A frozen model viewed as an explanation source.
#[derive(Clone, Copy)]
pub struct Explainer<'a> {
    pub store: &'a ParamStore,
    pub model: &'a Model,
}

impl<'a> Explainer<'a> {
    pub fn new(store: &'a ParamStore, model: &'a Model) -> Self {
        Self { store, model }
    }

    /// Vision masks `[N_v, H, W]`.
    pub fn vision_masks(&self, image: &Tensor) -> Result<MaskSet> {
        self.model.masks.vision.mask_image(self.store, image)
    }

    /// Text masks `[N_t, q]`.
    pub fn text_masks(&self, ids: &[usize]) -> Result<MaskSet> {
        let emb = self.model.et.embed_text(self.store, ids)?;
        self.model.masks.text.mask_text(self.store, &emb)
    }

    /// Attention received by each patch in the last vision layer, averaged
    /// over heads and queries, scaled to a maximum of 1 and spread over the
    /// patch's pixels: `[H, W]`.
    pub fn attention_map(&self, image: &Tensor) -> Result<Tensor> {
        let ev = &self.model.ev;
        let tokens = ev.embed_image(self.store, image)?;
        let layers = ev.extract_attention(self.store, &tokens)?;
        let last = layers.last().ok_or_else(|| invalid("encoder has no layers"))?;
        let t = tokens.shape()[0];
        let mut recv = vec![0.0; t];
        for head in last {
            for (i, &v) in head.data().iter().enumerate() {
                recv[i % t] += v;
            }
        }
        let max = recv.iter().cloned().fold(0.0, f64::max);
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let p = ev.config.patch_size;
        let gw = w / p;
        Ok(Tensor::from_fn(vec![h, w], |i| {
            let (y, x) = (i / w, i % w);
            if max > 0.0 {
                recv[(y / p) * gw + x / p] / max
            } else {
                0.0
            }
        }))
    }

    /// Runs the text encoder's attention extraction for `ids`.
    pub fn text_attention(&self, ids: &[usize]) -> Result<Vec<Vec<Tensor>>> {
        let et = &self.model.et;
        let tokens = et.embed_text(self.store, ids)?;
        et.extract_attention(self.store, &tokens)
    }
}

/// Mean over planted regions of the best IoU any candidate achieves.
/// `candidates` is `[N, H, W]`.
pub fn best_iou(candidates: &Tensor, regions: &[Tensor]) -> Result<f64> {
    if regions.is_empty() {
        return Err(invalid("sample has no ground-truth regions"));
    }
    let n = candidates.shape()[0];
    let mut total = 0.0;
    for r in regions {
        let mut best: f64 = 0.0;
        for j in 0..n {
            best = best.max(mask_iou(&candidates.index_axis0(j), r, IOU_THRESHOLD)?);
        }
        total += best;
    }
    Ok(total / regions.len() as f64)
}

/// Per-region best IoU of the vision masks of one sample.
pub fn region_ious(candidates: &Tensor, regions: &[Tensor]) -> Result<Vec<f64>> {
    regions
        .iter()
        .map(|r| best_iou(candidates, std::slice::from_ref(r)))
        .collect()
}

/// Binary PGM (P5) of a `[H, W]` grid with pixel `round(255 * v)`.
pub fn pgm(grid: &Tensor) -> Result<Vec<u8>> {
    let s = grid.shape();
    if s.len() != 2 {
        return Err(invalid(format!("PGM needs a 2-D grid, got {s:?}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(grid.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Pixel bytes and dimensions of a binary PGM.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(invalid("not an 8-bit binary PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| invalid("bad PGM width"))?;
    let h: usize = fields[2].parse().map_err(|_| invalid("bad PGM height"))?;
    let data = bytes.get(pos + 1..).unwrap_or(&[]).to_vec();
    if data.len() != w * h {
        return Err(invalid("PGM payload size does not match its header"));
    }
    Ok((w, h, data))
}

/// Mean, sample standard deviation and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub stdev: f64,
    pub se: f64,
    pub n: usize,
}

pub fn summarize(xs: &[f64]) -> Summary {
    use statrs::statistics::Statistics;
    let n = xs.len();
    let mean = if n == 0 { f64::NAN } else { xs.mean() };
    let stdev = if n < 2 { 0.0 } else { xs.std_dev() };
    Summary {
        mean,
        stdev,
        se: if n == 0 { f64::NAN } else { stdev / (n as f64).sqrt() },
        n,
    }
}

/// Explanation time per instance for one method, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub vision: Summary,
    pub text: Summary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub adversarial_mask: TimingRow,
    pub attention_extraction: TimingRow,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "method,n_instances,vision_mean_s,vision_stdev_s,vision_se_s,text_mean_s,text_stdev_s,text_se_s\n",
        );
        for (name, r) in [
            ("adversarial_mask", &self.adversarial_mask),
            ("attention_extraction", &self.attention_extraction),
        ] {
            out += &format!(
                "{name},{},{},{},{},{},{},{}\n",
                r.vision.n, r.vision.mean, r.vision.stdev, r.vision.se, r.text.mean, r.text.stdev, r.text.se
            );
        }
        out
    }
}

fn time_each(n: usize, mut f: impl FnMut(usize) -> Result<()>) -> Result<Vec<f64>> {
    f(0)?;
    (0..n)
        .map(|i| {
            let t0 = Instant::now();
            f(i)?;
            Ok(t0.elapsed().as_secs_f64())
        })
        .collect()
}

/// Times mask generation against attention extraction (a full encoder
/// forward) for `n` instances cycled from `samples`.
pub fn bench_explain(ex: &Explainer, samples: &[SceneSample], n: usize) -> Result<BenchReport> {
    if n < 10 {
        return Err(invalid(format!("bench needs at least 10 instances, got {n}")));
    }
    if samples.is_empty() {
        return Err(invalid("bench needs at least one sample"));
    }
    let s = |i: usize| &samples[i % samples.len()];
    let ev = &ex.model.ev;
    let mask_v = time_each(n, |i| ex.vision_masks(&s(i).image).map(drop))?;
    let mask_t = time_each(n, |i| ex.text_masks(&s(i).caption_ids).map(drop))?;
    let att_v = time_each(n, |i| {
        let tokens = ev.embed_image(ex.store, &s(i).image)?;
        ev.extract_attention(ex.store, &tokens).map(drop)
    })?;
    let att_t = time_each(n, |i| ex.text_attention(&s(i).caption_ids).map(drop))?;
    Ok(BenchReport {
        adversarial_mask: TimingRow {
            vision: summarize(&mask_v),
            text: summarize(&mask_t),
        },
        attention_extraction: TimingRow {
            vision: summarize(&att_v),
            text: summarize(&att_t),
        },
    })
}
