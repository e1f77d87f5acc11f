//! Dual-stream transformer encoders with patch and token embedders, mean
//! pooling and a normalized projection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::params::{init_normal, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{block_forward, linear_layer, BlockParams, MLP_RATIO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Vision => "vision",
            Modality::Text => "text",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Number of transformer blocks, `K`.
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub q_max: usize,
    pub proj_dim: usize,
    /// Side length of the square input images.
    pub image_size: usize,
    /// Add sinusoidal positional encodings after embedding.
    pub positional: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 32,
            heads: 4,
            patch_size: 4,
            vocab_size: 64,
            q_max: 12,
            proj_dim: 16,
            image_size: 32,
            positional: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(invalid(format!("layer count must be at least 2, got {}", self.layers)));
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.proj_dim < 2 {
            return Err(invalid(format!("proj_dim must be at least 2, got {}", self.proj_dim)));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(invalid(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.vocab_size < 2 || self.q_max == 0 {
            return Err(invalid("vocab_size must be at least 2 and q_max positive"));
        }
        Ok(())
    }

    /// Number of scalar parameters in one transformer block.
    pub fn block_param_count(&self) -> usize {
        let h = self.hidden;
        let f = MLP_RATIO * h;
        4 * (h * h + h) + 4 * h + (h * f + f) + (f * h + h)
    }

    /// Number of scalar parameters in a stack built from this config.
    pub fn stack_param_count(&self, modality: Modality) -> usize {
        let h = self.hidden;
        let embed = match modality {
            Modality::Vision => self.patch_size * self.patch_size * h + h,
            Modality::Text => self.vocab_size * h,
        };
        let head = h * h + h + h * self.proj_dim + self.proj_dim;
        embed + self.layers * self.block_param_count() + 2 * h + head
    }
}

/// Fixed sinusoidal encodings `[len, width]`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    Tensor::from_fn(vec![len, width], |i| {
        let (t, c) = ((i / width) as f64, i % width);
        let freq = 10000f64.powf(-((c - c % 2) as f64) / width as f64);
        if c % 2 == 0 {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Embedder {
    /// Linear projection of flattened `p x p` patches: `w[p*p, h]`, `b[h]`.
    Patch { w: ParamId, b: ParamId },
    /// Token table `f_emb[vocab, h]`.
    Token { table: ParamId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    pub modality: Modality,
    pub embedder: Embedder,
    pub blocks: Vec<BlockParams>,
    pub final_ln: (ParamId, ParamId),
    pub head: ProjectionHead,
}

/// Unit-norm projected representation.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub z: Vec<f64>,
}

/// Tape handles produced by [`EncoderStack::forward`].
pub struct StackOutput {
    /// Mean-pooled final-layer features `[B, h]`, before the projection head.
    pub pooled: Var,
    /// Normalized projections `[B, proj_dim]`.
    pub z: Var,
    /// Per-layer attention nodes; see [`Tape::attention_weights`].
    pub attention: Vec<Var>,
}

impl EncoderStack {
    pub fn new(
        config: &EncoderConfig,
        modality: Modality,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let embedder = Self::register_embedder(config, modality, store, prefix, rng)?;
        let blocks = (0..config.layers)
            .map(|k| BlockParams::register(store, &format!("{prefix}.block{}", k + 1), config.hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::finish(config, modality, store, prefix, rng, embedder, blocks)
    }

    /// A stack whose transformer blocks are the given (shared) blocks; only
    /// the embedder, final norm and projection head are fresh.
    pub fn with_shared_blocks(
        config: &EncoderConfig,
        modality: Modality,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
        blocks: Vec<BlockParams>,
    ) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.layers {
            return Err(invalid(format!(
                "expected {} shared blocks, got {}",
                config.layers,
                blocks.len()
            )));
        }
        let embedder = Self::register_embedder(config, modality, store, prefix, rng)?;
        Self::finish(config, modality, store, prefix, rng, embedder, blocks)
    }

    fn register_embedder(
        config: &EncoderConfig,
        modality: Modality,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Embedder> {
        let h = config.hidden;
        Ok(match modality {
            Modality::Vision => {
                let pp = config.patch_size * config.patch_size;
                Embedder::Patch {
                    w: store.register(format!("{prefix}.embed.w"), init_normal(rng, &[pp, h], pp))?,
                    b: store.register(format!("{prefix}.embed.b"), Tensor::zeros(vec![h]))?,
                }
            }
            Modality::Text => Embedder::Token {
                table: store.register(
                    format!("{prefix}.embed.table"),
                    init_normal(rng, &[config.vocab_size, h], 1),
                )?,
            },
        })
    }

    fn finish(
        config: &EncoderConfig,
        modality: Modality,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut impl Rng,
        embedder: Embedder,
        blocks: Vec<BlockParams>,
    ) -> Result<Self> {
        let (h, p) = (config.hidden, config.proj_dim);
        let final_ln = (
            store.register(format!("{prefix}.ln_f.gamma"), Tensor::full(vec![h], 1.0))?,
            store.register(format!("{prefix}.ln_f.beta"), Tensor::zeros(vec![h]))?,
        );
        let head = ProjectionHead {
            w1: store.register(format!("{prefix}.proj.w1"), init_normal(rng, &[h, h], h))?,
            b1: store.register(format!("{prefix}.proj.b1"), Tensor::zeros(vec![h]))?,
            w2: store.register(format!("{prefix}.proj.w2"), init_normal(rng, &[h, p], h))?,
            b2: store.register(format!("{prefix}.proj.b2"), Tensor::zeros(vec![p]))?,
        };
        Ok(Self {
            config: config.clone(),
            modality,
            embedder,
            blocks,
            final_ln,
            head,
        })
    }

    /// Every parameter id of the stack, without duplicates.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = match self.embedder {
            Embedder::Patch { w, b } => vec![w, b],
            Embedder::Token { table } => vec![table],
        };
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids.extend([self.final_ln.0, self.final_ln.1]);
        ids.extend([self.head.w1, self.head.b1, self.head.w2, self.head.b2]);
        ids
    }

    fn positions(&self, tape: &mut Tape, len: usize) -> Result<Option<Var>> {
        if !self.config.positional {
            return Ok(None);
        }
        tape.constant(sinusoidal_positions(len, self.config.hidden)).map(Some)
    }

    /// Patch-embeds `images[B, H, W]` into `[B, T, h]`.
    pub fn embed_images_on(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<Var> {
        let Embedder::Patch { w, b } = self.embedder else {
            return Err(invalid("embed_image called on a text encoder"));
        };
        let s = tape.shape(images).to_vec();
        let p = self.config.patch_size;
        if s.len() != 3 || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
            return Err(invalid(format!(
                "image dimensions {s:?} are not divisible by patch size {p}"
            )));
        }
        let (bsz, gh, gw) = (s[0], s[1] / p, s[2] / p);
        let r = tape.reshape(images, &[bsz, gh, p, gw, p])?;
        let r = tape.permute(r, &[0, 1, 3, 2, 4])?;
        let r = tape.reshape(r, &[bsz, gh * gw, p * p])?;
        let mut x = linear_layer(tape, store, r, w, b)?;
        if let Some(pe) = self.positions(tape, gh * gw)? {
            x = tape.add(x, pe)?;
        }
        Ok(x)
    }

    pub(crate) fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if ids.len() > self.config.q_max {
            return Err(invalid(format!(
                "sequence length {} exceeds q_max {}",
                ids.len(),
                self.config.q_max
            )));
        }
        if let Some((index, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                index,
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Embeds equal-length id sequences into `[B, q, h]`.
    pub fn embed_texts_on(&self, tape: &mut Tape, store: &ParamStore, seqs: &[&[usize]]) -> Result<Var> {
        let Embedder::Token { table } = self.embedder else {
            return Err(invalid("embed_text called on a vision encoder"));
        };
        let Some(first) = seqs.first() else {
            return Err(invalid("empty text batch"));
        };
        let q = first.len();
        let mut flat = Vec::with_capacity(q * seqs.len());
        for s in seqs {
            self.check_ids(s)?;
            if s.len() != q {
                return Err(invalid("text batch sequences must share one length"));
            }
            flat.extend_from_slice(s);
        }
        let t = tape.param(store, table)?;
        let rows = tape.gather_rows(t, &flat)?;
        let mut x = tape.reshape(rows, &[seqs.len(), q, self.config.hidden])?;
        if let Some(pe) = self.positions(tape, q)? {
            x = tape.add(x, pe)?;
        }
        Ok(x)
    }

    /// Runs the blocks, pools and projects `tokens[B, T, h]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<StackOutput> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.config.hidden {
            return Err(invalid(format!(
                "token width must equal hidden width {}, got shape {s:?}",
                self.config.hidden
            )));
        }
        let mut x = tokens;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let out = block_forward(tape, store, b, x, self.config.heads)?;
            x = out.tokens;
            attention.push(out.attention);
        }
        let g = tape.param(store, self.final_ln.0)?;
        let be = tape.param(store, self.final_ln.1)?;
        let x = tape.layer_norm(x, g, be)?;
        let pooled = tape.mean_axis(x, 1)?;
        let hdn = linear_layer(tape, store, pooled, self.head.w1, self.head.b1)?;
        let hdn = tape.relu(hdn)?;
        let proj = linear_layer(tape, store, hdn, self.head.w2, self.head.b2)?;
        let z = tape.l2_normalize(proj)?;
        Ok(StackOutput { pooled, z, attention })
    }

    /// Image `[H, W]` to tokens `[T, h]`.
    pub fn embed_image(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 2 {
            return Err(invalid(format!("image must be a 2-D grid, got {s:?}")));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(image.clone().reshape(vec![1, s[0], s[1]])?)?;
        let e = self.embed_images_on(&mut tape, store, x)?;
        squeeze_batch(tape.value(e))
    }

    /// Token ids to `[q, h]`.
    pub fn embed_text(&self, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let e = self.embed_texts_on(&mut tape, store, &[ids])?;
        squeeze_batch(tape.value(e))
    }

    /// Tokens `[T, h]` to a unit-norm representation.
    pub fn encode(&self, store: &ParamStore, tokens: &Tensor) -> Result<Representation> {
        let mut tape = Tape::inference();
        let x = tape.constant(unsqueeze_batch(tokens)?)?;
        let out = self.forward(&mut tape, store, x)?;
        Ok(Representation {
            z: tape.value(out.z).data().to_vec(),
        })
    }

    /// Attention grids `[T, T]` indexed by layer, then head.
    pub fn extract_attention(&self, store: &ParamStore, tokens: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::inference();
        let x = tape.constant(unsqueeze_batch(tokens)?)?;
        let out = self.forward(&mut tape, store, x)?;
        Ok(out
            .attention
            .iter()
            .map(|&a| {
                let v = tape.attention_weights(a).expect("attention node");
                (0..self.config.heads).map(|h| v.index_axis0(h)).collect()
            })
            .collect())
    }
}

fn unsqueeze_batch(tokens: &Tensor) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 {
        return Err(invalid(format!("token sequence must be [T, h], got {s:?}")));
    }
    tokens.clone().reshape(vec![1, s[0], s[1]])
}

fn squeeze_batch(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    t.clone().reshape(vec![s[1], s[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            patch_size: 4,
            vocab_size: 10,
            q_max: 6,
            proj_dim: 4,
            image_size: 8,
            positional: true,
        }
    }

    fn stack(cfg: &EncoderConfig, m: Modality, seed: u64) -> (ParamStore, EncoderStack) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = EncoderStack::new(cfg, m, &mut store, "enc", &mut rng).unwrap();
        (store, s)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { heads: 3, ..small() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { layers: 1, ..small() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { proj_dim: 1, ..small() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_count_matches_store() {
        for m in [Modality::Vision, Modality::Text] {
            for cfg in [small(), EncoderConfig::default()] {
                let (store, s) = stack(&cfg, m, 1);
                assert_eq!(store.count(&s.param_ids()), cfg.stack_param_count(m));
            }
        }
    }

    #[test]
    fn layers_are_shape_identical_across_modalities() {
        let cfg = small();
        let (sv, v) = stack(&cfg, Modality::Vision, 1);
        let (st, t) = stack(&cfg, Modality::Text, 2);
        for (bv, bt) in v.blocks.iter().zip(&t.blocks) {
            for (a, b) in bv.ids().iter().zip(bt.ids()) {
                assert_eq!(sv.get(*a).shape(), st.get(b).shape());
            }
        }
    }

    #[test]
    fn image_32_patch_4_gives_64_tokens() {
        let cfg = EncoderConfig::default();
        let (store, s) = stack(&cfg, Modality::Vision, 3);
        let e = s.embed_image(&store, &Tensor::zeros(vec![32, 32])).unwrap();
        assert_eq!(e.shape(), &[64, 32]);
    }

    #[test]
    fn indivisible_image_rejected() {
        let (store, s) = stack(&small(), Modality::Vision, 3);
        assert!(s.embed_image(&store, &Tensor::zeros(vec![10, 8])).is_err());
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_tokens() {
        let cfg = EncoderConfig {
            positional: false,
            ..small()
        };
        let (store, s) = stack(&cfg, Modality::Vision, 3);
        let e = s.embed_image(&store, &Tensor::zeros(vec![8, 8])).unwrap();
        assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn patch_embedding_matches_loop_oracle() {
        let cfg = EncoderConfig {
            positional: false,
            ..small()
        };
        let (store, s) = stack(&cfg, Modality::Vision, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_tensor(&mut rng, &[8, 8]);
        let got = s.embed_image(&store, &img).unwrap();
        let Embedder::Patch { w, b } = s.embedder else {
            unreachable!()
        };
        let (w, b) = (store.get(w), store.get(b));
        let p = 4;
        for gy in 0..2 {
            for gx in 0..2 {
                let t = gy * 2 + gx;
                for c in 0..8 {
                    let mut acc = b.data()[c];
                    for py in 0..p {
                        for px in 0..p {
                            acc += img.at(&[gy * p + py, gx * p + px]) * w.at(&[py * p + px, c]);
                        }
                    }
                    assert!((got.at(&[t, c]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn text_embedding_is_table_lookup_plus_positions() {
        let cfg = small();
        let (store, s) = stack(&cfg, Modality::Text, 5);
        let Embedder::Token { table } = s.embedder else {
            unreachable!()
        };
        let ids = [3usize, 1, 4];
        let got = s.embed_text(&store, &ids).unwrap();
        let pe = sinusoidal_positions(3, 8);
        for (t, &id) in ids.iter().enumerate() {
            for c in 0..8 {
                let want = store.get(table).at(&[id, c]) + pe.at(&[t, c]);
                assert!((got.at(&[t, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repeated_ids_embed_identically_without_positions() {
        let cfg = EncoderConfig {
            positional: false,
            ..small()
        };
        let (store, s) = stack(&cfg, Modality::Text, 5);
        let got = s.embed_text(&store, &[2, 2]).unwrap();
        assert_eq!(got.index_axis0(0), got.index_axis0(1));
    }

    #[test]
    fn text_input_errors() {
        let (store, s) = stack(&small(), Modality::Text, 5);
        assert!(s.embed_text(&store, &[]).is_err());
        match s.embed_text(&store, &[1, 2, 10]) {
            Err(Error::TokenOutOfRange { index, id, vocab }) => assert_eq!((index, id, vocab), (2, 10, 10)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(s.embed_text(&store, &[1; 7]).is_err());
    }

    #[test]
    fn positional_encoding_values() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe.at(&[0, 0]), 0.0);
        assert_eq!(pe.at(&[0, 1]), 1.0);
        assert!((pe.at(&[2, 0]) - 2f64.sin()).abs() < 1e-15);
        assert!((pe.at(&[2, 3]) - (2.0 * 0.01f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn representation_has_unit_norm() {
        let cfg = small();
        let (store, s) = stack(&cfg, Modality::Vision, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let tokens = random_tensor(&mut rng, &[5, 8]);
            let r = s.encode(&store, &tokens).unwrap();
            let n: f64 = r.z.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_pooling_is_permutation_invariant_without_positions() {
        let cfg = EncoderConfig {
            positional: false,
            ..small()
        };
        let (store, s) = stack(&cfg, Modality::Text, 11);
        let a = s.encode(&store, &s.embed_text(&store, &[1, 5, 7]).unwrap()).unwrap();
        let b = s.encode(&store, &s.embed_text(&store, &[7, 5, 1]).unwrap()).unwrap();
        for (x, y) in a.z.iter().zip(&b.z) {
            assert!((x - y).abs() < 1e-9);
        }
        let cfg = small();
        let (store, s) = stack(&cfg, Modality::Text, 11);
        let a = s.encode(&store, &s.embed_text(&store, &[1, 5, 7]).unwrap()).unwrap();
        let b = s.encode(&store, &s.embed_text(&store, &[7, 5, 1]).unwrap()).unwrap();
        assert!(a.z.iter().zip(&b.z).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn identical_parameters_give_identical_outputs() {
        let cfg = small();
        let (s1, e1) = stack(&cfg, Modality::Vision, 4);
        let (s2, e2) = stack(&cfg, Modality::Vision, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tokens = random_tensor(&mut rng, &[4, 8]);
        assert_eq!(e1.encode(&s1, &tokens).unwrap(), e2.encode(&s2, &tokens).unwrap());
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = small();
        let (store, s) = stack(&cfg, Modality::Vision, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let att = s.extract_attention(&store, &random_tensor(&mut rng, &[6, 8])).unwrap();
        assert_eq!(att.len(), 2);
        for layer in &att {
            assert_eq!(layer.len(), 2);
            for a in layer {
                for r in 0..6 {
                    let sum: f64 = (0..6).map(|c| a.at(&[r, c])).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let (store, s) = stack(&small(), Modality::Text, 2);
        let att = s
            .extract_attention(&store, &s.embed_text(&store, &[4]).unwrap())
            .unwrap();
        for layer in att {
            for a in layer {
                assert_eq!(a.data(), &[1.0]);
            }
        }
    }

    fn oracle_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let mu = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
        x.iter()
            .zip(g.iter().zip(b))
            .map(|(v, (g, b))| (v - mu) / (var + 1e-5).sqrt() * g + b)
            .collect()
    }

    fn oracle_affine(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
        let (k, n) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..n)
                    .map(|j| b.data()[j] + (0..k).map(|i| row[i] * w.at(&[i, j])).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn first_layer_attention_matches_loop_oracle() {
        let cfg = small();
        let (store, s) = stack(&cfg, Modality::Vision, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tokens = random_tensor(&mut rng, &[3, 8]);
        let att = s.extract_attention(&store, &tokens).unwrap();
        let blk = &s.blocks[0];
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|t| {
                oracle_layer_norm(
                    tokens.index_axis0(t).data(),
                    store.get(blk.ln1_g).data(),
                    store.get(blk.ln1_b).data(),
                )
            })
            .collect();
        let q = oracle_affine(&rows, store.get(blk.wq), store.get(blk.bq));
        let k = oracle_affine(&rows, store.get(blk.wk), store.get(blk.bk));
        let dh = 4;
        for head in 0..2 {
            for i in 0..3 {
                let scores: Vec<f64> = (0..3)
                    .map(|j| {
                        (0..dh).map(|c| q[i][head * dh + c] * k[j][head * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..3 {
                    let want = (scores[j] - m).exp() / z;
                    assert!((att[0][head].at(&[i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn encode_gradients_pass_grad_check() {
        let cfg = small();
        let (store, s) = stack(&cfg, Modality::Vision, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tokens = random_tensor(&mut rng, &[1, 2, 8]);
        let dir = random_tensor(&mut rng, &[1, 4]);
        let ids = s.param_ids();
        let ids: Vec<_> = ids
            .into_iter()
            .filter(|id| !store.name(*id).starts_with("enc.embed"))
            .collect();
        let report = grad_check(&store, &ids, 0, GradCheckOptions::default(), |t, st, _| {
            let x = t.constant(tokens.clone())?;
            let out = s.forward(t, st, x)?;
            let d = t.constant(dir.clone())?;
            let p = t.mul(out.z, d)?;
            t.sum(p)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn shared_blocks_reuse_ids() {
        let cfg = small();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = EncoderStack::new(&cfg, Modality::Vision, &mut store, "ev", &mut rng).unwrap();
        let t = EncoderStack::with_shared_blocks(&cfg, Modality::Text, &mut store, "et", &mut rng, v.blocks.clone())
            .unwrap();
        assert_eq!(v.blocks, t.blocks);
        assert_ne!(v.head, t.head);
    }
}
