//! InfoNCE, the masked-anchor CLAM loss and the combined pretraining
//! objective.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::encoders::EncoderStack;
use crate::error::{invalid, Result};
use crate::masking::{channel_entropy, view_weights_on, MaskSemantics, TextMasker, VisionMasker};
use crate::model::Model;
use crate::params::ParamStore;
use crate::sharing::sharing_penalty_on;
use crate::tensor::Tensor;

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn check_pairs(tape: &Tape, a: Var, p: Var) -> Result<usize> {
    let (sa, sp) = (tape.shape(a), tape.shape(p));
    if sa.len() != 2 || sa != sp {
        return Err(invalid(format!(
            "anchor {sa:?} and positive {sp:?} batches must be [n, d] alike"
        )));
    }
    if sa[0] < 2 {
        return Err(invalid(
            "contrastive losses need at least 2 samples (no negatives otherwise)",
        ));
    }
    Ok(sa[0])
}

/// Selector with a one at `(r, col(r))` of an `[rows, cols]` grid.
fn selector(rows: usize, cols: usize, col: impl Fn(usize) -> usize) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    for r in 0..rows {
        t.data_mut()[r * cols + col(r)] = 1.0;
    }
    t
}

/// `mean_r [ lse_{k in allowed(r)} s[r, k] - s[r, pos(r)] ]`.
fn nce_rows(tape: &mut Tape, logits: Var, pos: Tensor, allowed: Vec<bool>) -> Result<Var> {
    let lse = tape.logsumexp(logits, Some(allowed))?;
    let sel = tape.constant(pos)?;
    let picked = tape.mul(logits, sel)?;
    let positive = tape.sum_axis(picked, 1)?;
    let diff = tape.sub(lse, positive)?;
    tape.mean(diff)
}

/// Two-view InfoNCE over the combined `2n` batch: anchor `i` is contrasted
/// against the `2n - 1` other entries, with `positives[i]` as its match.
/// The loss is averaged over the `n` anchors.
pub fn info_nce_on(tape: &mut Tape, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = check_pairs(tape, anchors, positives)?;
    let all = tape.concat(&[anchors, positives], 0)?;
    let sim = tape.cosine_similarity(anchors, all)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let allowed = (0..n * 2 * n).map(|e| e % (2 * n) != e / (2 * n)).collect();
    nce_rows(tape, logits, selector(n, 2 * n, |r| n + r), allowed)
}

/// Cross-view contrast: anchor `i` against `positives[k]` for every `k`,
/// with the denominator over the negatives `k != i` only.
pub fn info_nce_cross_on(tape: &mut Tape, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    check_pairs(tape, anchors, positives)?;
    clam_rows(tape, anchors, positives, tau, 1)
}

/// Masked-anchor rows: `anchors[j*n + i]` is the view of sample `i` under
/// mask `j`. Returns `(1/N) sum_j mean_i [lse_{k != i} S(a_ji, p_k)/tau -
/// S(a_ji, p_i)/tau]`.
fn clam_rows(tape: &mut Tape, anchors: Var, positives: Var, tau: f64, views: usize) -> Result<Var> {
    let n = tape.shape(positives)[0];
    let rows = views * n;
    let sim = tape.cosine_similarity(anchors, positives)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let allowed = (0..rows * n).map(|e| e % n != (e / n) % n).collect();
    nce_rows(tape, logits, selector(rows, n, |r| r % n), allowed)
}

/// CLAM loss from precomputed representations: `anchors[N*n, d]` in
/// mask-major order and unmasked `positives[n, d]`.
pub fn clam_from_representations(tape: &mut Tape, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let sp = tape.shape(positives).to_vec();
    let sa = tape.shape(anchors).to_vec();
    if sp.len() != 2 || sa.len() != 2 || sa[1] != sp[1] || !sa[0].is_multiple_of(sp[0]) {
        return Err(invalid(format!("anchors {sa:?} do not tile positives {sp:?}")));
    }
    if sp[0] < 2 {
        return Err(invalid(
            "contrastive losses need at least 2 samples (no negatives otherwise)",
        ));
    }
    clam_rows(tape, anchors, positives, tau, sa[0] / sp[0])
}

pub fn info_nce(anchors: &Tensor, positives: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let a = tape.constant(anchors.clone())?;
    let p = tape.constant(positives.clone())?;
    let l = info_nce_on(&mut tape, a, p, tau)?;
    Ok(tape.value(l).item())
}

/// A CLAM term on the tape plus the masks that produced it.
pub struct ClamOutput {
    pub loss: Var,
    /// Mean per-location mask entropy in nats.
    pub entropy: f64,
}

/// CLAM over `images[n, H, W]`. Masks come from `masker`, or from `fixed`
/// (`[n, N, H, W]`) when given.
pub fn vision_clam_on(
    tape: &mut Tape,
    store: &ParamStore,
    ev: &EncoderStack,
    masker: &VisionMasker,
    images: &Tensor,
    fixed: Option<&Tensor>,
    tau: f64,
    semantics: MaskSemantics,
) -> Result<ClamOutput> {
    check_tau(tau)?;
    let s = images.shape().to_vec();
    if s.len() != 3 || s[0] < 2 {
        return Err(invalid(format!("image batch must be [n >= 2, H, W], got {s:?}")));
    }
    let n = s[0];
    let x = tape.constant(images.clone())?;
    let masks = match fixed {
        Some(m) => tape.constant(m.clone())?,
        None => masker.forward(tape, store, x)?,
    };
    let ms = tape.shape(masks).to_vec();
    if ms.len() != 4 || ms[0] != n || ms[2..] != s[1..] {
        return Err(invalid(format!("masks {ms:?} do not match images {s:?}")));
    }
    let views_n = ms[1];
    let entropy = channel_entropy(tape.value(masks), 1);
    let w = view_weights_on(tape, masks, semantics)?;
    let w = tape.permute(w, &[1, 0, 2, 3])?;
    let views = tape.mul(w, x)?;
    let views = tape.reshape(views, &[views_n * n, s[1], s[2]])?;
    let all = tape.concat(&[x, views], 0)?;
    let tokens = ev.embed_images_on(tape, store, all)?;
    let out = ev.forward(tape, store, tokens)?;
    let positives = tape.gather_rows(out.z, &(0..n).collect::<Vec<_>>())?;
    let anchors = tape.gather_rows(out.z, &(n..n * (views_n + 1)).collect::<Vec<_>>())?;
    let loss = clam_rows(tape, anchors, positives, tau, views_n)?;
    Ok(ClamOutput { loss, entropy })
}

/// Groups sample indices by sequence length, in ascending length order.
pub(crate) fn length_groups(texts: &[Vec<usize>]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in texts.iter().enumerate() {
        groups.entry(t.len()).or_default().push(i);
    }
    groups
}

/// CLAM over token sequences of possibly different lengths. Masks come
/// from `masker` over the embedded tokens, or from `fixed` (one `[N, q_i]`
/// tensor per sample) when given.
pub fn text_clam_on(
    tape: &mut Tape,
    store: &ParamStore,
    et: &EncoderStack,
    masker: &TextMasker,
    texts: &[Vec<usize>],
    fixed: Option<&[Tensor]>,
    tau: f64,
    semantics: MaskSemantics,
) -> Result<ClamOutput> {
    check_tau(tau)?;
    let n = texts.len();
    if n < 2 {
        return Err(invalid(
            "contrastive losses need at least 2 samples (no negatives otherwise)",
        ));
    }
    if fixed.is_some_and(|f| f.len() != n) {
        return Err(invalid("one fixed mask set is needed per text"));
    }
    let h = et.config.hidden;
    let views_n = match fixed {
        Some(f) => f[0].shape()[0],
        None => masker.n_masks,
    };
    let ones = tape.constant(Tensor::full(vec![1, h], 1.0))?;
    let mut zs = Vec::new();
    let mut pos_rows = vec![0; n];
    let mut anchor_rows = vec![0; n * views_n];
    let mut offset = 0;
    let mut entropy_sum = 0.0;
    let mut locations = 0usize;
    for (q, idx) in length_groups(texts) {
        let g = idx.len();
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| texts[i].as_slice()).collect();
        let emb = et.embed_texts_on(tape, store, &seqs)?;
        let masks = match fixed {
            Some(f) => {
                let mut data = Vec::with_capacity(g * views_n * q);
                for &i in &idx {
                    if f[i].shape() != [views_n, q] {
                        return Err(invalid(format!(
                            "fixed text mask {:?} does not match [{views_n}, {q}]",
                            f[i].shape()
                        )));
                    }
                    data.extend_from_slice(f[i].data());
                }
                tape.constant(Tensor::new(vec![g, views_n, q], data)?)?
            }
            None => masker.forward(tape, store, emb)?,
        };
        entropy_sum += channel_entropy(tape.value(masks), 1) * (g * q) as f64;
        locations += g * q;
        let w = view_weights_on(tape, masks, semantics)?;
        let w = tape.permute(w, &[1, 0, 2])?;
        let w = tape.reshape(w, &[views_n * g * q, 1])?;
        let w = tape.matmul(w, ones)?;
        let w = tape.reshape(w, &[views_n, g, q, h])?;
        let views = tape.mul(w, emb)?;
        let views = tape.reshape(views, &[views_n * g, q, h])?;
        let all = tape.concat(&[emb, views], 0)?;
        let out = et.forward(tape, store, all)?;
        for (p, &i) in idx.iter().enumerate() {
            pos_rows[i] = offset + p;
            for j in 0..views_n {
                anchor_rows[j * n + i] = offset + g + j * g + p;
            }
        }
        offset += g * (views_n + 1);
        zs.push(out.z);
    }
    let z = tape.concat(&zs, 0)?;
    let positives = tape.gather_rows(z, &pos_rows)?;
    let anchors = tape.gather_rows(z, &anchor_rows)?;
    let loss = clam_rows(tape, anchors, positives, tau, views_n)?;
    Ok(ClamOutput {
        loss,
        entropy: entropy_sum / locations as f64,
    })
}

/// Paired image and caption batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    /// `[n, H, W]`.
    pub images: Tensor,
    pub texts: Vec<Vec<usize>>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

/// Fixed masks replacing the generators (random-augmentation baseline).
#[derive(Debug, Clone, PartialEq)]
pub struct FixedMasks {
    /// `[n, N_v, H, W]`.
    pub vision: Tensor,
    /// One `[N_t, q_i]` tensor per caption.
    pub text: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tau: f64,
    pub beta: f64,
    pub lambda: f64,
    pub semantics: MaskSemantics,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tau: 0.1,
            beta: 0.3,
            lambda: 1e-3,
            semantics: MaskSemantics::Occlude,
        }
    }
}

/// Scalar components of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_clam_v: f64,
    pub l_clam_t: f64,
    pub l_gs: f64,
    pub total: f64,
    pub tau: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// Tape handles of the combined objective.
pub struct UniclamVars {
    pub clam_v: ClamOutput,
    pub clam_t: ClamOutput,
    pub gs: Var,
    /// `beta * clam_v + (1 - beta) * clam_t + lambda * gs`.
    pub total: Var,
    /// `clam_v + clam_t`, the quantity the mask generators maximize.
    pub masking_objective: Var,
}

impl UniclamVars {
    pub fn breakdown(&self, tape: &Tape, w: &LossWeights) -> LossBreakdown {
        LossBreakdown {
            l_clam_v: tape.value(self.clam_v.loss).item(),
            l_clam_t: tape.value(self.clam_t.loss).item(),
            l_gs: tape.value(self.gs).item(),
            total: tape.value(self.total).item(),
            tau: w.tau,
            beta: w.beta,
            lambda: w.lambda,
        }
    }
}

pub fn uniclam_loss_on(
    tape: &mut Tape,
    store: &ParamStore,
    model: &Model,
    batch: &PairBatch,
    weights: &LossWeights,
    fixed: Option<&FixedMasks>,
) -> Result<UniclamVars> {
    if !(0.0..=1.0).contains(&weights.beta) || !(weights.lambda >= 0.0) {
        return Err(invalid(format!(
            "beta must lie in [0, 1] and lambda be non-negative, got {} and {}",
            weights.beta, weights.lambda
        )));
    }
    let clam_v = vision_clam_on(
        tape,
        store,
        &model.ev,
        &model.masks.vision,
        &batch.images,
        fixed.map(|f| &f.vision),
        weights.tau,
        weights.semantics,
    )?;
    let clam_t = text_clam_on(
        tape,
        store,
        &model.et,
        &model.masks.text,
        &batch.texts,
        fixed.map(|f| f.text.as_slice()),
        weights.tau,
        weights.semantics,
    )?;
    let gs = sharing_penalty_on(tape, store, &model.ev, &model.et)?;
    let v = tape.scale(clam_v.loss, weights.beta)?;
    let t = tape.scale(clam_t.loss, 1.0 - weights.beta)?;
    let g = tape.scale(gs, weights.lambda)?;
    let vt = tape.add(v, t)?;
    let total = tape.add(vt, g)?;
    let masking_objective = tape.add(clam_v.loss, clam_t.loss)?;
    Ok(UniclamVars {
        clam_v,
        clam_t,
        gs,
        total,
        masking_objective,
    })
}

/// Evaluates the combined objective without recording gradients.
pub fn uniclam_loss(
    store: &ParamStore,
    model: &Model,
    batch: &PairBatch,
    weights: &LossWeights,
    fixed: Option<&FixedMasks>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::inference();
    let vars = uniclam_loss_on(&mut tape, store, model, batch, weights, fixed)?;
    Ok(vars.breakdown(&tape, weights))
}
