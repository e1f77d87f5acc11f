//! Adversarial mask generators: a strided-conv encoder-decoder over images
//! and a shallow transformer over embedded tokens, each ending in a 1x1
//! head and a softmax across the mask channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::Modality;
use crate::error::{invalid, Result};
use crate::params::{init_normal, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{block_forward, linear_layer, BlockParams};

/// How a mask acts on its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSemantics {
    /// `x * (1 - m)`: the masked region is hidden.
    #[default]
    Occlude,
    /// `x * m`: only the masked region is kept.
    Keep,
}

/// `N` soft masks `[N, ...]` over a pixel grid or token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub modality: Modality,
    pub masks: Tensor,
}

impl MaskSet {
    pub fn count(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn mask(&self, j: usize) -> Tensor {
        self.masks.index_axis0(j)
    }

    /// Largest deviation of a per-location channel sum from 1.
    pub fn partition_error(&self) -> f64 {
        let n = self.count();
        let per = self.masks.len() / n;
        let d = self.masks.data();
        (0..per)
            .map(|i| ((0..n).map(|j| d[j * per + i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean per-location entropy of the channel distribution, in nats.
    pub fn entropy(&self) -> f64 {
        channel_entropy(&self.masks, 0)
    }
}

/// Mean entropy, in nats, of the per-location distributions laid out
/// along the channel axis `axis` of `masks`.
pub fn channel_entropy(masks: &Tensor, axis: usize) -> f64 {
    let s = masks.shape();
    let n = s[axis];
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let d = masks.data();
    let mut total = 0.0;
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..n {
                let p = d[(o * n + j) * inner + i];
                if p > 0.0 {
                    total -= p * p.ln();
                }
            }
        }
    }
    total / (outer * inner) as f64
}

/// Occluded (or kept) view of `x` under `mask`. A `[q]` mask broadcasts
/// across the width of `[q, h]` features.
pub fn apply_mask(x: &Tensor, mask: &Tensor, semantics: MaskSemantics) -> Result<Tensor> {
    let weight = |m: f64| match semantics {
        MaskSemantics::Occlude => 1.0 - m,
        MaskSemantics::Keep => m,
    };
    if x.shape() == mask.shape() {
        let data = x.data().iter().zip(mask.data()).map(|(a, &m)| a * weight(m)).collect();
        return Tensor::new(x.shape().to_vec(), data);
    }
    if x.rank() == 2 && mask.rank() == 1 && x.shape()[0] == mask.shape()[0] {
        let w = x.shape()[1];
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a * weight(mask.data()[i / w]))
            .collect();
        return Tensor::new(x.shape().to_vec(), data);
    }
    Err(invalid(format!(
        "mask resolution {:?} does not match input {:?}",
        mask.shape(),
        x.shape()
    )))
}

/// The per-location weights multiplying the input: `1 - m` or `m`.
pub fn view_weights_on(tape: &mut Tape, masks: Var, semantics: MaskSemantics) -> Result<Var> {
    match semantics {
        MaskSemantics::Occlude => {
            let neg = tape.scale(masks, -1.0)?;
            tape.add_scalar(neg, 1.0)
        }
        MaskSemantics::Keep => Ok(masks),
    }
}

/// One-hot masks `[N, ...shape]` with one uniformly drawn channel per
/// location.
pub fn random_masks(rng: &mut impl Rng, n: usize, shape: &[usize]) -> Tensor {
    let per: usize = shape.iter().product();
    let mut data = vec![0.0; n * per];
    for i in 0..per {
        let j = rng.random_range(0..n);
        data[j * per + i] = 1.0;
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::new(full, data).expect("consistent mask shape")
}

/// Random one-hot baseline masks over `shape` (`[H, W]` or `[q]`).
pub fn random_mask_baseline(seed: u64, modality: Modality, n: usize, shape: &[usize]) -> Result<MaskSet> {
    if n == 0 || shape.is_empty() || shape.contains(&0) {
        return Err(invalid(format!(
            "random masks need N >= 1 and a non-empty shape, got N={n}, {shape:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(MaskSet {
        modality,
        masks: random_masks(&mut rng, n, shape),
    })
}

/// Width of the vision masker's hidden feature maps.
pub const VISION_CHANNELS: usize = 8;
/// Depth of the text masker.
pub const TEXT_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvParams {
    fn register(
        store: &mut ParamStore,
        name: &str,
        out: usize,
        inp: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.register(format!("{name}.w"), init_normal(rng, &[out, inp, k, k], inp * k * k))?,
            b: store.register(format!("{name}.b"), Tensor::zeros(vec![out]))?,
        })
    }
}

/// Two stride-2 convolutions down, two upsample-and-convolve stages up,
/// then a 1x1 head to `N` channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisionMasker {
    pub n_masks: usize,
    pub down1: ConvParams,
    pub down2: ConvParams,
    pub up1: ConvParams,
    pub up2: ConvParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl VisionMasker {
    pub fn new(store: &mut ParamStore, prefix: &str, n_masks: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_masks == 0 {
            return Err(invalid("vision mask count must be positive"));
        }
        let c = VISION_CHANNELS;
        Ok(Self {
            n_masks,
            down1: ConvParams::register(store, &format!("{prefix}.down1"), c, 1, 3, rng)?,
            down2: ConvParams::register(store, &format!("{prefix}.down2"), c, c, 3, rng)?,
            up1: ConvParams::register(store, &format!("{prefix}.up1"), c, c, 3, rng)?,
            up2: ConvParams::register(store, &format!("{prefix}.up2"), c, c, 3, rng)?,
            head_w: store.register(format!("{prefix}.head.w"), init_normal(rng, &[n_masks, c], c))?,
            head_b: store.register(format!("{prefix}.head.b"), Tensor::zeros(vec![n_masks]))?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in [&self.down1, &self.down2, &self.up1, &self.up2] {
            ids.extend([c.w, c.b]);
        }
        ids.extend([self.head_w, self.head_b]);
        ids
    }

    fn conv(tape: &mut Tape, store: &ParamStore, x: Var, p: &ConvParams, stride: usize) -> Result<Var> {
        let w = tape.param(store, p.w)?;
        let b = tape.param(store, p.b)?;
        let y = tape.conv2d(x, w, Some(b), stride, 1)?;
        tape.relu(y)
    }

    /// `images[B, H, W]` to masks `[B, N, H, W]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) {
            return Err(invalid(format!(
                "vision masker needs [B, H, W] with H, W divisible by 4, got {s:?}"
            )));
        }
        let x = tape.reshape(images, &[s[0], 1, s[1], s[2]])?;
        let x = Self::conv(tape, store, x, &self.down1, 2)?;
        let x = Self::conv(tape, store, x, &self.down2, 2)?;
        let x = tape.upsample_nearest(x, 2)?;
        let x = Self::conv(tape, store, x, &self.up1, 1)?;
        let x = tape.upsample_nearest(x, 2)?;
        let x = Self::conv(tape, store, x, &self.up2, 1)?;
        let w = tape.param(store, self.head_w)?;
        let b = tape.param(store, self.head_b)?;
        let logits = tape.conv1x1(x, w, Some(b))?;
        tape.softmax(logits, 1)
    }

    pub fn mask_image(&self, store: &ParamStore, image: &Tensor) -> Result<MaskSet> {
        let s = image.shape();
        if s.len() != 2 {
            return Err(invalid(format!("image must be a 2-D grid, got {s:?}")));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(image.clone().reshape(vec![1, s[0], s[1]])?)?;
        let m = self.forward(&mut tape, store, x)?;
        Ok(MaskSet {
            modality: Modality::Vision,
            masks: tape.value(m).clone().reshape(vec![self.n_masks, s[0], s[1]])?,
        })
    }
}

/// Shallow transformer over embedded tokens with a per-token head to `N`
/// channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextMasker {
    pub n_masks: usize,
    pub heads: usize,
    pub blocks: Vec<BlockParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl TextMasker {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        n_masks: usize,
        hidden: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_masks == 0 {
            return Err(invalid("text mask count must be positive"));
        }
        let blocks = (0..TEXT_LAYERS)
            .map(|k| BlockParams::register(store, &format!("{prefix}.block{}", k + 1), hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_masks,
            heads,
            blocks,
            head_w: store.register(format!("{prefix}.head.w"), init_normal(rng, &[hidden, n_masks], hidden))?,
            head_b: store.register(format!("{prefix}.head.b"), Tensor::zeros(vec![n_masks]))?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.ids()).collect();
        ids.extend([self.head_w, self.head_b]);
        ids
    }

    /// `embedded[B, q, h]` to masks `[B, N, q]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, embedded: Var) -> Result<Var> {
        let mut x = embedded;
        for b in &self.blocks {
            x = block_forward(tape, store, b, x, self.heads)?.tokens;
        }
        let logits = linear_layer(tape, store, x, self.head_w, self.head_b)?;
        let p = tape.softmax(logits, 2)?;
        tape.permute(p, &[0, 2, 1])
    }

    pub fn mask_text(&self, store: &ParamStore, embedded: &Tensor) -> Result<MaskSet> {
        let s = embedded.shape();
        if s.len() != 2 {
            return Err(invalid(format!("embedded text must be [q, h], got {s:?}")));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(embedded.clone().reshape(vec![1, s[0], s[1]])?)?;
        let m = self.forward(&mut tape, store, x)?;
        Ok(MaskSet {
            modality: Modality::Text,
            masks: tape.value(m).clone().reshape(vec![self.n_masks, s[0]])?,
        })
    }
}

/// Both mask generators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingModels {
    pub vision: VisionMasker,
    pub text: TextMasker,
}

impl MaskingModels {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.vision.param_ids();
        ids.extend(self.text.param_ids());
        ids
    }
}
