//! Synthetic shapes-and-captions corpus with ground-truth regions, the
//! UCLD dataset file format and mask IoU.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contrastive::PairBatch;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Side length of every scene image.
pub const IMAGE_SIZE: usize = 32;
const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// Token strings by id. Id 0 is padding and id 1 is unknown.
pub const VOCAB: &[&str] = &[
    "<pad>", "<unk>", "dark", "dim", "light", "bright", "circle", "square", "triangle", "left", "of", "is", "there",
    "a", "what", "shape", "color", "size", "the", "object", "how", "many", "shapes", "are",
];
pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Number of answer classes: 12 open classes followed by yes and no.
pub const ANSWER_SPACE: usize = 14;
/// Number of classes reachable by open questions.
pub const OPEN_ANSWERS: usize = 12;
pub const YES: usize = 12;
pub const NO: usize = 13;

/// Human-readable answer labels by class id.
pub const ANSWERS: [&str; ANSWER_SPACE] = [
    "circle", "square", "triangle", "dark", "dim", "light", "bright", "one", "two", "three", "small", "large", "yes",
    "no",
];

const FILE_MAGIC: &[u8; 4] = b"UCLD";
const FILE_VERSION: u32 = 1;
const NOISE_AMPLITUDE: f64 = 0.1;
/// Open question mix over shape, color, count and size questions.
const OPEN_TYPE_WEIGHTS: [u32; 4] = [3, 4, 3, 2];

/// Token id of `word`, or [`UNK`].
pub fn token_id(word: &str) -> usize {
    VOCAB.iter().position(|w| *w == word).unwrap_or(UNK)
}

/// Space-separated token ids of `text`.
pub fn tokenize(text: &str) -> Vec<usize> {
    text.split_whitespace().map(token_id).collect()
}

/// Token string of `id`.
pub fn token_str(id: usize) -> &'static str {
    VOCAB.get(id).copied().unwrap_or(VOCAB[UNK])
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter().map(|&i| token_str(i)).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        ANSWERS[self.answer()]
    }

    pub fn answer(self) -> usize {
        self as usize
    }

    /// Whether pixel offset `(dx, dy)` from the centre is covered at half-extent `r`.
    pub fn covers(self, dx: i32, dy: i32, r: i32) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        }
    }
}

/// Intensity class of a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shade {
    Dark,
    Dim,
    Light,
    Bright,
}

impl Shade {
    pub const ALL: [Shade; 4] = [Shade::Dark, Shade::Dim, Shade::Light, Shade::Bright];

    pub fn intensity(self) -> f64 {
        let v: f32 = match self {
            Shade::Dark => 0.3,
            Shade::Dim => 0.5,
            Shade::Light => 0.7,
            Shade::Bright => 0.95,
        };
        v as f64
    }

    pub fn word(self) -> &'static str {
        ANSWERS[self.answer()]
    }

    pub fn answer(self) -> usize {
        3 + self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn half_extent(self) -> i32 {
        match self {
            Size::Small => 3,
            Size::Large => 5,
        }
    }

    pub fn answer(self) -> usize {
        match self {
            Size::Small => 10,
            Size::Large => 11,
        }
    }
}

/// One planted shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub shade: Shade,
    pub size: Size,
    /// Centre column.
    pub cx: i32,
    /// Centre row.
    pub cy: i32,
}

impl PlacedShape {
    fn bbox(&self) -> (i32, i32, i32, i32) {
        let r = self.size.half_extent();
        (self.cx - r, self.cy - r, self.cx + r, self.cy + r)
    }

    /// Boxes separated by at least one background pixel.
    fn clear_of(&self, other: &PlacedShape) -> bool {
        let (ax0, ay0, ax1, ay1) = self.bbox();
        let (bx0, by0, bx1, by1) = other.bbox();
        ax1 + 1 < bx0 || bx1 + 1 < ax0 || ay1 + 1 < by0 || by1 + 1 < ay0
    }

    /// Binary coverage mask, `[IMAGE_SIZE, IMAGE_SIZE]`.
    pub fn region(&self) -> Tensor {
        let r = self.size.half_extent();
        Tensor::from_fn(vec![IMAGE_SIZE, IMAGE_SIZE], |i| {
            let (y, x) = ((i / IMAGE_SIZE) as i32, (i % IMAGE_SIZE) as i32);
            f64::from(u8::from(self.kind.covers(x - self.cx, y - self.cy, r)))
        })
    }
}

/// Geometry of a scene before rendering. Shapes are ordered left to right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub shapes: Vec<PlacedShape>,
}

/// A question, its answer class and whether it is open-ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub question: Vec<usize>,
    pub answer: usize,
    pub open: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[IMAGE_SIZE, IMAGE_SIZE]`, values in `[0, 1]`, exactly representable in `f32`.
    pub image: Tensor,
    pub caption_ids: Vec<usize>,
    /// One binary `[IMAGE_SIZE, IMAGE_SIZE]` mask per shape, in caption order.
    pub gt_regions: Vec<Tensor>,
    pub qa_pairs: Vec<QaPair>,
}

/// Shapes, shades, sizes and positions of scene `seed`. The shape count
/// cycles through 1, 2, 3 with the seed; everything else is drawn from a
/// generator seeded by `seed`.
pub fn generate_layout(seed: u64) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = 1 + (seed % 3) as usize;
    let kinds = pick_distinct(&mut rng, &ShapeKind::ALL, count);
    let shades = pick_distinct(&mut rng, &Shade::ALL, count);
    'retry: loop {
        let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
        for (&kind, &shade) in kinds.iter().zip(&shades) {
            let size = if rng.random_bool(0.5) { Size::Small } else { Size::Large };
            let r = size.half_extent();
            let mut placed = None;
            for _ in 0..100 {
                let cand = PlacedShape {
                    kind,
                    shade,
                    size,
                    cx: rng.random_range(r..IMAGE_SIZE as i32 - r),
                    cy: rng.random_range(r..IMAGE_SIZE as i32 - r),
                };
                if shapes.iter().all(|s| s.clear_of(&cand) && s.cx != cand.cx) {
                    placed = Some(cand);
                    break;
                }
            }
            match placed {
                Some(p) => shapes.push(p),
                None => continue 'retry,
            }
        }
        shapes.sort_by_key(|s| s.cx);
        return Layout { shapes };
    }
}

fn pick_distinct<T: Copy>(rng: &mut impl Rng, pool: &[T], n: usize) -> Vec<T> {
    let mut items = pool.to_vec();
    for i in 0..n {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
    items.truncate(n);
    items
}

/// Caption tokens: shapes joined by "left of", in left-to-right order.
pub fn caption_for(layout: &Layout) -> Vec<usize> {
    let words: Vec<String> = layout
        .shapes
        .iter()
        .map(|s| format!("{} {}", s.shade.word(), s.kind.word()))
        .collect();
    tokenize(&words.join(" left of "))
}

/// Two closed presence questions followed by one open question.
fn questions_for(layout: &Layout, rng: &mut impl Rng) -> Vec<QaPair> {
    let mut qa = Vec::with_capacity(3);
    for _ in 0..2 {
        let (shade, kind, answer) = if rng.random_bool(0.5) {
            let s = layout.shapes[rng.random_range(0..layout.shapes.len())];
            (s.shade, s.kind, YES)
        } else {
            let absent: Vec<(Shade, ShapeKind)> = Shade::ALL
                .iter()
                .flat_map(|&c| ShapeKind::ALL.iter().map(move |&k| (c, k)))
                .filter(|&(c, k)| !layout.shapes.iter().any(|s| s.shade == c && s.kind == k))
                .collect();
            let (c, k) = absent[rng.random_range(0..absent.len())];
            (c, k, NO)
        };
        qa.push(QaPair {
            question: tokenize(&format!("is there a {} {}", shade.word(), kind.word())),
            answer,
            open: false,
        });
    }
    let total: u32 = OPEN_TYPE_WEIGHTS.iter().sum();
    let mut pick = rng.random_range(0..total);
    let kind = OPEN_TYPE_WEIGHTS
        .iter()
        .position(|&w| {
            if pick < w {
                true
            } else {
                pick -= w;
                false
            }
        })
        .expect("weights cover the range");
    let s = layout.shapes[rng.random_range(0..layout.shapes.len())];
    let (text, answer) = match kind {
        0 => (format!("what shape is the {} object", s.shade.word()), s.kind.answer()),
        1 => (format!("what color is the {}", s.kind.word()), s.shade.answer()),
        2 => ("how many shapes are there".to_string(), 6 + layout.shapes.len()),
        _ => (
            format!("what size is the {} {}", s.shade.word(), s.kind.word()),
            s.size.answer(),
        ),
    };
    qa.push(QaPair {
        question: tokenize(&text),
        answer,
        open: true,
    });
    qa
}

/// Renders `layout` over background noise drawn from `rng`.
pub fn render(layout: &Layout, rng: &mut impl Rng) -> (Tensor, Vec<Tensor>) {
    let mut image = Tensor::from_fn(vec![IMAGE_SIZE, IMAGE_SIZE], |_| {
        rng.random_range(0.0..NOISE_AMPLITUDE) as f32 as f64
    });
    let regions: Vec<Tensor> = layout.shapes.iter().map(PlacedShape::region).collect();
    for (s, reg) in layout.shapes.iter().zip(&regions) {
        for (p, &m) in image.data_mut().iter_mut().zip(reg.data()) {
            if m > 0.0 {
                *p = s.shade.intensity();
            }
        }
    }
    (image, regions)
}

/// The scene for `seed`. Pure function of the seed.
pub fn generate_scene(seed: u64) -> SceneSample {
    let layout = generate_layout(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let (image, gt_regions) = render(&layout, &mut rng);
    let qa_pairs = questions_for(&layout, &mut rng);
    SceneSample {
        image,
        caption_ids: caption_for(&layout),
        gt_regions,
        qa_pairs,
    }
}

/// Scenes for seeds `start..start + n`.
pub fn generate_corpus(start: u64, n: usize) -> Vec<SceneSample> {
    (start..start + n as u64).map(generate_scene).collect()
}

/// Image-caption pairs for the given sample indices.
pub fn pair_batch(samples: &[SceneSample], indices: &[usize]) -> Result<PairBatch> {
    let mut data = Vec::with_capacity(indices.len() * PIXELS);
    let mut texts = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| invalid(format!("sample index {i} out of range for {} samples", samples.len())))?;
        data.extend_from_slice(s.image.data());
        texts.push(s.caption_ids.clone());
    }
    Ok(PairBatch {
        images: Tensor::new(vec![indices.len(), IMAGE_SIZE, IMAGE_SIZE], data)?,
        texts,
    })
}

/// Uniformly sampled batch indices, without replacement inside a batch.
pub fn sample_indices(rng: &mut impl Rng, n_samples: usize, batch: usize) -> Result<Vec<usize>> {
    if batch > n_samples {
        return Err(invalid(format!(
            "batch of {batch} exceeds the {n_samples} available samples"
        )));
    }
    Ok(rand::seq::index::sample(rng, n_samples, batch).into_vec())
}

/// IoU between `mask` binarized at `threshold` and the binary `region`.
/// An empty union yields 0.
pub fn mask_iou(mask: &Tensor, region: &Tensor, threshold: f64) -> Result<f64> {
    if mask.shape() != region.shape() {
        return Err(Error::Shape {
            op: "mask_iou",
            lhs: mask.shape().to_vec(),
            rhs: region.shape().to_vec(),
        });
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&m, &r) in mask.data().iter().zip(region.data()) {
        let (a, b) = (m >= threshold, r > 0.5);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Serialises `samples` in the UCLD format.
pub fn encode_dataset(samples: &[SceneSample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FILE_MAGIC);
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(samples.len(), "sample count")?.to_le_bytes());
    for s in samples {
        if s.image.shape() != [IMAGE_SIZE, IMAGE_SIZE] {
            return Err(invalid(format!("image shape {:?} is not 32x32", s.image.shape())));
        }
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        put_ids(&mut out, &s.caption_ids)?;
        out.push(len_u8(s.gt_regions.len(), "region count")?);
        for r in &s.gt_regions {
            if r.len() != PIXELS {
                return Err(invalid("region is not 32x32"));
            }
            let mut bits = [0u8; PIXELS / 8];
            for (i, &v) in r.data().iter().enumerate() {
                if v > 0.5 {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bits);
        }
        out.push(len_u8(s.qa_pairs.len(), "QA count")?);
        for qa in &s.qa_pairs {
            put_ids(&mut out, &qa.question)?;
            out.extend_from_slice(&id_u16(qa.answer)?.to_le_bytes());
            out.push(u8::from(qa.open));
        }
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| invalid(format!("{what} {n} does not fit the file format")))
}

fn len_u8(n: usize, what: &str) -> Result<u8> {
    u8::try_from(n).map_err(|_| invalid(format!("{what} {n} does not fit the file format")))
}

fn id_u16(id: usize) -> Result<u16> {
    u16::try_from(id).map_err(|_| invalid(format!("id {id} does not fit in u16")))
}

fn put_ids(out: &mut Vec<u8>, ids: &[usize]) -> Result<()> {
    let n = u16::try_from(ids.len()).map_err(|_| invalid("token sequence longer than u16::MAX"))?;
    out.extend_from_slice(&n.to_le_bytes());
    for &id in ids {
        out.extend_from_slice(&id_u16(id)?.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn ids(&mut self, what: &str) -> Result<Vec<usize>> {
        let n = self.u16(what)? as usize;
        (0..n).map(|_| Ok(self.u16(what)? as usize)).collect()
    }
}

/// Parses a UCLD byte buffer. Errors carry the byte offset of the problem.
pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SceneSample>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != FILE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected UCLD".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FILE_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let raw = r.take(PIXELS * 4, "image")?;
        let image: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let caption_ids = r.ids("caption")?;
        let n_regions = r.u8("region count")?;
        let mut gt_regions = Vec::with_capacity(n_regions as usize);
        for _ in 0..n_regions {
            let bits = r.take(PIXELS / 8, "region")?;
            gt_regions.push(Tensor::from_fn(vec![IMAGE_SIZE, IMAGE_SIZE], |i| {
                f64::from((bits[i / 8] >> (i % 8)) & 1)
            }));
        }
        let n_qa = r.u8("QA count")?;
        let mut qa_pairs = Vec::with_capacity(n_qa as usize);
        for _ in 0..n_qa {
            let question = r.ids("question")?;
            let answer = r.u16("answer")? as usize;
            let at = r.pos;
            let open = match r.u8("QA flag")? {
                0 => false,
                1 => true,
                f => {
                    return Err(Error::Format {
                        offset: at as u64,
                        msg: format!("QA flag {f} is neither 0 nor 1"),
                    })
                }
            };
            qa_pairs.push(QaPair { question, answer, open });
        }
        samples.push(SceneSample {
            image: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], image)?,
            caption_ids,
            gt_regions,
            qa_pairs,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(samples)
}

/// Writes `samples` to `path` atomically.
pub fn write_dataset(samples: &[SceneSample], path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(samples)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    decode_dataset(&std::fs::read(path)?)
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| invalid(format!("`{}` has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)?;
    Ok(())
}
