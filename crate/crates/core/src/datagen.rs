//! Deterministic synthetic corpus: images of coloured shapes, captions from
//! a fixed 30-word grammar, the speech units those captions map to, and
//! noisy feature frames that quantize back to the units.
//!
//! Every word maps to a fixed unit string of length 2–4. Strings start with
//! one of [`START_UNITS`] and continue with body units only, and no two
//! words sharing a start unit share a second unit. The code is therefore
//! prefix-free and repetition removal never merges units across a word
//! boundary, so the deduplicated unit sequence identifies the caption.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::{save_codebook, squared_distance, Codebook};
use crate::error::{Error, Result};
use crate::features::{save_features, FeatureSequence, DEFAULT_FRAME_RATE_HZ};
use crate::image_units::{save_ppm, Image};
use crate::units::{dedup, save_units, UnitSequence};

pub const WORDS: [&str; 30] = [
    "one", "two", "three", "shape", "shapes", "with", "a", "and", "small", "big", "red", "green",
    "blue", "yellow", "magenta", "cyan", "white", "orange", "purple", "gray", "square", "circle",
    "triangle", "diamond", "cross", "ring", "left-of", "right-of", "above", "below",
];
pub const TEXT_VOCAB: usize = WORDS.len();
pub const UNIT_VOCAB: usize = 32;
/// Units that may begin a word's string; all others are body units.
pub const START_UNITS: u32 = 10;

const W_ONE: u32 = 0;
const W_SHAPE: u32 = 3;
const W_SHAPES: u32 = 4;
const W_WITH: u32 = 5;
const W_A: u32 = 6;
const W_AND: u32 = 7;
const W_SMALL: u32 = 8;
const W_COLOR0: u32 = 10;
const W_KIND0: u32 = 20;
const W_LEFT_OF: u32 = 26;
const W_RIGHT_OF: u32 = 27;
const W_ABOVE: u32 = 28;
const W_BELOW: u32 = 29;

const COLORS: [[u8; 3]; 10] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 255, 255],
    [255, 136, 0],
    [136, 0, 255],
    [136, 136, 136],
];

/// Unit string of word `w`.
pub fn word_units(w: u32) -> Vec<u32> {
    assert!((w as usize) < TEXT_VOCAB, "word id {w} out of range");
    let body = UNIT_VOCAB as u32 - START_UNITS;
    let len = if w < W_SMALL { 2 } else { 2 + w % 3 };
    let start = w % START_UNITS;
    let group = w / START_UNITS;
    let mut units = vec![start, START_UNITS + (group * 7 + start) % body];
    let mut next = (w * 5 + 3) % body;
    while units.len() < len as usize {
        let mut u = START_UNITS + next;
        if u == *units.last().unwrap() {
            u = START_UNITS + (next + 1) % body;
        }
        units.push(u);
        next = (next * 3 + w + 1) % body;
    }
    units
}

/// Splits a deduplicated unit sequence back into word ids.
pub fn units_to_words(units: &[u32]) -> Option<Vec<u32>> {
    let table: Vec<Vec<u32>> = (0..TEXT_VOCAB as u32).map(word_units).collect();
    let mut words = Vec::new();
    let mut rest = units;
    while !rest.is_empty() {
        let (w, code) = table
            .iter()
            .enumerate()
            .find(|(_, code)| rest.starts_with(code))?;
        words.push(w as u32);
        rest = &rest[code.len()..];
    }
    Some(words)
}

pub fn caption_text(words: &[u32]) -> String {
    words
        .iter()
        .map(|&w| WORDS[w as usize])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_caption(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|tok| {
            WORDS
                .iter()
                .position(|&w| w == tok)
                .map(|i| i as u32)
                .ok_or_else(|| Error::invalid(format!("word {tok:?} is not in the caption grammar")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

const KINDS: [ShapeKind; 6] = [
    ShapeKind::Square,
    ShapeKind::Circle,
    ShapeKind::Triangle,
    ShapeKind::Diamond,
    ShapeKind::Cross,
    ShapeKind::Ring,
];

/// One shape placed in a quadrant of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: usize,
    pub big: bool,
    /// `(row, col)` of the quadrant, each 0 or 1.
    pub quadrant: (usize, usize),
}

impl Shape {
    fn covers(&self, dy: f64, dx: f64, r: f64) -> bool {
        let (ay, ax) = (dy.abs(), dx.abs());
        match self.kind {
            ShapeKind::Square => ay.max(ax) <= 0.8 * r,
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Triangle => dy >= -0.8 * r && dy <= 0.8 * r && ax <= 0.5 * (dy + 0.8 * r),
            ShapeKind::Diamond => ay + ax <= r,
            ShapeKind::Cross => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (0.55 * r).powi(2)
            }
        }
    }

    fn words(&self) -> [u32; 4] {
        let kind = KINDS.iter().position(|&k| k == self.kind).unwrap() as u32;
        [
            W_A,
            W_SMALL + u32::from(self.big),
            W_COLOR0 + self.color as u32,
            W_KIND0 + kind,
        ]
    }
}

/// Draws the shapes on a black background. `size` must be even.
pub fn render(shapes: &[Shape], size: usize) -> Result<Image> {
    let mut bytes = vec![0u8; size * size * 3];
    let q = (size / 2) as f64;
    for s in shapes {
        let r = if s.big { 0.42 * q } else { 0.25 * q };
        let cy = s.quadrant.0 as f64 * q + q / 2.0;
        let cx = s.quadrant.1 as f64 * q + q / 2.0;
        for y in 0..size {
            for x in 0..size {
                if s.covers(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r) {
                    let i = (y * size + x) * 3;
                    bytes[i..i + 3].copy_from_slice(&COLORS[s.color]);
                }
            }
        }
    }
    Image::from_u8(size, size, 3, &bytes)
}

/// Caption words for a shape list (1–3 shapes).
pub fn describe(shapes: &[Shape]) -> Vec<u32> {
    let n = shapes.len() as u32;
    let mut words = vec![W_ONE + n - 1, if n == 1 { W_SHAPE } else { W_SHAPES }, W_WITH];
    words.extend(shapes[0].words());
    if let Some(second) = shapes.get(1) {
        let (a, b) = (shapes[0].quadrant, second.quadrant);
        let rel = if a.0 != b.0 {
            if a.0 < b.0 { W_ABOVE } else { W_BELOW }
        } else if a.1 < b.1 {
            W_LEFT_OF
        } else {
            W_RIGHT_OF
        };
        words.push(rel);
        words.extend(second.words());
    }
    if let Some(third) = shapes.get(2) {
        words.push(W_AND);
        words.extend(third.words());
    }
    words
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataGenConfig {
    pub seed: u64,
    pub n_items: usize,
    pub image_size: usize,
    pub patch: usize,
    pub feature_dim: usize,
    /// Per-coordinate uniform noise bound. `None` uses a tenth of half the
    /// minimum inter-centroid distance.
    pub noise: Option<f64>,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            seed: 0,
            n_items: 64,
            image_size: 32,
            patch: 4,
            feature_dim: 16,
            noise: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: usize,
    pub shapes: Vec<Shape>,
    pub image: Image,
    /// Word ids.
    pub caption: Vec<u32>,
    /// Units with per-word repetition, one per feature frame.
    pub raw_units: UnitSequence,
    /// `raw_units` with repetitions removed; the training target.
    pub units: UnitSequence,
    pub features: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: DataGenConfig,
    /// Centroids the feature frames were drawn around.
    pub speech_codebook: Codebook,
    pub noise: f64,
    pub items: Vec<Item>,
}

/// Smallest distance between two distinct centroids.
pub fn min_centroid_distance(cb: &Codebook) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..cb.k() {
        for j in i + 1..cb.k() {
            best = best.min(squared_distance(cb.centroid(i), cb.centroid(j)));
        }
    }
    best.sqrt()
}

fn speech_codebook(seed: u64, dim: usize) -> Result<Codebook> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5350_4545_4348);
    let centroids = (0..UNIT_VOCAB * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Codebook::new(UNIT_VOCAB, dim, centroids)
}

pub fn gen_corpus(cfg: &DataGenConfig) -> Result<Corpus> {
    if cfg.n_items == 0 {
        return Err(Error::invalid("n_items must be at least 1"));
    }
    if cfg.patch == 0 || !cfg.image_size.is_multiple_of(cfg.patch) || !cfg.image_size.is_multiple_of(2) || cfg.image_size < 8 {
        return Err(Error::invalid(format!(
            "image size {} must be even, at least 8 and divisible by patch {}",
            cfg.image_size, cfg.patch
        )));
    }
    if cfg.feature_dim == 0 {
        return Err(Error::invalid("feature_dim must be at least 1"));
    }
    let codebook = speech_codebook(cfg.seed, cfg.feature_dim)?;
    let noise = match cfg.noise {
        Some(n) if n >= 0.0 && n.is_finite() => n,
        Some(_) => return Err(Error::invalid("noise must be nonnegative")),
        None => 0.1 * min_centroid_distance(&codebook) / 2.0,
    };
    let items = (0..cfg.n_items)
        .map(|id| gen_item(cfg, &codebook, noise, id))
        .collect::<Result<_>>()?;
    Ok(Corpus {
        config: cfg.clone(),
        speech_codebook: codebook,
        noise,
        items,
    })
}

fn gen_item(cfg: &DataGenConfig, codebook: &Codebook, noise: f64, id: usize) -> Result<Item> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id as u64 + 1);

    let n_shapes = rng.gen_range(1..=3);
    let mut quadrants = [(0, 0), (0, 1), (1, 0), (1, 1)];
    quadrants.shuffle(&mut rng);
    let shapes: Vec<Shape> = quadrants[..n_shapes]
        .iter()
        .map(|&quadrant| Shape {
            kind: KINDS[rng.gen_range(0..KINDS.len())],
            color: rng.gen_range(0..COLORS.len()),
            big: rng.gen(),
            quadrant,
        })
        .collect();
    let image = render(&shapes, cfg.image_size)?;
    let caption = describe(&shapes);

    let mut raw = Vec::new();
    for &w in &caption {
        let repeat = rng.gen_range(1..=3);
        for u in word_units(w) {
            raw.extend(std::iter::repeat_n(u, repeat));
        }
    }
    let mut frames = Vec::with_capacity(raw.len() * cfg.feature_dim);
    for &u in &raw {
        for &c in codebook.centroid(u as usize) {
            let jitter = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
            frames.push(c + jitter as f32);
        }
    }
    let raw_units = UnitSequence::new(raw, UNIT_VOCAB as u32)?;
    let units = dedup(&raw_units);
    Ok(Item {
        id,
        shapes,
        image,
        caption,
        raw_units,
        units,
        features: FeatureSequence::new(frames, cfg.feature_dim, DEFAULT_FRAME_RATE_HZ)?,
    })
}

/// Index sets of a train / validation / test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` and cuts it by `fractions` (train, val, test).
/// Validation and test sizes are floored; the remainder goes to train.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| f.is_nan() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must be nonnegative and sum to 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * fractions[1]).floor() as usize;
    let n_test = (n as f64 * fractions[2]).floor() as usize;
    let n_train = n - n_val - n_test;
    Ok(Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub caption: Vec<u32>,
    pub units: PathBuf,
    pub features: PathBuf,
}

pub const MANIFEST_HEADER: &str = "# id\timage\tcaption\tunits\tfeatures";

/// Writes every item under `dir` and returns the manifest path. Paths in
/// the manifest are relative to `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "units", "features"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    save_codebook(&corpus.speech_codebook, dir.join("speech_codebook.ucb"))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for item in &corpus.items {
        let id = format!("item{:05}", item.id);
        let image = format!("images/{id}.ppm");
        let units = format!("units/{id}.ucu");
        let features = format!("features/{id}.ufm");
        save_ppm(&item.image, dir.join(&image))?;
        save_units(&item.units, dir.join(&units))?;
        save_features(&item.features, dir.join(&features))?;
        manifest.push_str(&format!(
            "{id}\t{image}\t{}\t{units}\t{features}\n",
            caption_text(&item.caption)
        ));
    }
    let path = dir.join("manifest.tsv");
    let mut f = fs::File::create(&path)?;
    f.write_all(manifest.as_bytes())?;
    Ok(path)
}

/// Reads a corpus manifest, resolving paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::format(
                "corpus manifest",
                format!("line {}: expected 5 tab-separated fields, found {}", i + 1, fields.len()),
            ));
        }
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            image: base.join(fields[1]),
            caption: parse_caption(fields[2])?,
            units: base.join(fields[3]),
            features: base.join(fields[4]),
        });
    }
    Ok(out)
}
