//! Image units: images cut into `P × P` patches, each replaced by the id of
//! its nearest codebook patch.
//!
//! Patches are taken row-major over the grid and flattened row-major
//! (row, column, channel) within the patch. Flattening a [`PatchGrid`]
//! row-major gives the token sequence the decoder consumes.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, DEFAULT_FRAME_RATE_HZ};
use crate::quantizer::{KMeans, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::units::{bit_width, UnitSequence};

pub const DEFAULT_PATCH: usize = 8;
pub const DEFAULT_IMAGE_UNITS: usize = 8192;
pub const TOY_PATCH: usize = 4;
pub const TOY_IMAGE_UNITS: usize = 64;

/// `H × W × C` image with pixels in `[0, 1]`, stored row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: height * width * channels,
                found: pixels.len(),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Maps 8-bit samples to `[0, 1]` by `v / 255`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    fn check_patch(&self, patch: usize) -> Result<(usize, usize)> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::invalid(format!(
                "patch size {patch} does not divide {}x{}",
                self.height, self.width
            )));
        }
        Ok((self.height / patch, self.width / patch))
    }
}

/// Image-unit ids on the downsampled lattice, plus the source geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    units: UnitSequence,
}

impl PatchGrid {
    pub fn new(geometry: GridGeometry, units: UnitSequence) -> Result<Self> {
        geometry.validate()?;
        if units.len() != geometry.grid_h * geometry.grid_w {
            return Err(Error::DimensionMismatch {
                expected: geometry.grid_h * geometry.grid_w,
                found: units.len(),
            });
        }
        Ok(PatchGrid {
            grid_h: geometry.grid_h,
            grid_w: geometry.grid_w,
            patch: geometry.patch,
            height: geometry.height,
            width: geometry.width,
            units,
        })
    }

    /// Row-major flattening of the grid.
    pub fn units(&self) -> &UnitSequence {
        &self.units
    }

    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.units.tokens()[row * self.grid_w + col]
    }

    pub fn codebook_size(&self) -> u32 {
        self.units.vocab_size()
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            patch: self.patch,
            height: self.height,
            width: self.width,
        }
    }

    /// `grid_h · grid_w · ceil(log2 N_i)`.
    pub fn bit_cost(&self) -> u64 {
        self.units.packed_bits()
    }
}

/// Geometry sidecar stored next to a grid's unit stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
}

impl GridGeometry {
    fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.grid_h * self.patch != self.height
            || self.grid_w * self.patch != self.width
        {
            return Err(Error::invalid(format!("inconsistent grid geometry {self:?}")));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "grid_h={}\ngrid_w={}\npatch={}\nheight={}\nwidth={}\n",
            self.grid_h, self.grid_w, self.patch, self.height, self.width
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = crate::config::KeyValues::parse(text)?;
        let get = |k: &str| -> Result<usize> {
            kv.get_parsed(k)?
                .ok_or_else(|| Error::format("grid geometry", format!("missing {k}")))
        };
        let g = GridGeometry {
            grid_h: get("grid_h")?,
            grid_w: get("grid_w")?,
            patch: get("patch")?,
            height: get("height")?,
            width: get("width")?,
        };
        g.validate()?;
        Ok(g)
    }
}

/// One row per patch, each of dimension `P² · C`.
pub fn patchify(img: &Image, patch: usize) -> Result<FeatureSequence> {
    let (gh, gw) = img.check_patch(patch)?;
    let c = img.channels;
    let mut rows = Vec::with_capacity(img.pixels.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * img.width + gx * patch) * c;
                rows.extend_from_slice(&img.pixels[start..start + patch * c]);
            }
        }
    }
    FeatureSequence::new(rows, patch * patch * c, DEFAULT_FRAME_RATE_HZ)
}

/// K-means over the pooled patches of every image in `images`.
pub fn fit_image_codebook(images: &[Image], n_units: usize, patch: usize, seed: u64) -> Result<Codebook> {
    let mut pooled = Vec::new();
    let mut dim = None;
    for img in images {
        let p = patchify(img, patch)?;
        if *dim.get_or_insert(p.dim()) != p.dim() {
            return Err(Error::invalid("images in the corpus have differing channel counts"));
        }
        pooled.extend_from_slice(p.as_flat());
    }
    let dim = dim.ok_or_else(|| Error::invalid("empty image corpus"))?;
    let n = pooled.len() / dim;
    if n < n_units {
        return Err(Error::invalid(format!(
            "{n} patches are not enough for {n_units} image units"
        )));
    }
    Ok(KMeans::new(n_units)
        .seed(seed)
        .max_iters(DEFAULT_MAX_ITERS)
        .tol(DEFAULT_TOL)
        .fit(&pooled, dim)?
        .codebook)
}

pub fn encode_image(img: &Image, cb: &Codebook, patch: usize) -> Result<PatchGrid> {
    let (gh, gw) = img.check_patch(patch)?;
    let expected = patch * patch * img.channels;
    if cb.dim() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: cb.dim(),
        });
    }
    let patches = patchify(img, patch)?;
    let vocab = u32::try_from(cb.k()).map_err(|_| Error::invalid("codebook too large"))?;
    let tokens = patches.frames().map(|p| cb.nearest(p).0).collect();
    PatchGrid::new(
        GridGeometry {
            grid_h: gh,
            grid_w: gw,
            patch,
            height: img.height,
            width: img.width,
        },
        UnitSequence::new(tokens, vocab)?,
    )
}

/// Tiles each cell's centroid patch back into an image, clamped to `[0, 1]`.
pub fn decode_image(grid: &PatchGrid, cb: &Codebook) -> Result<Image> {
    let p = grid.patch;
    if !cb.dim().is_multiple_of(p * p) {
        return Err(Error::invalid("codebook dim is not a multiple of patch area"));
    }
    let c = cb.dim() / (p * p);
    let mut pixels = vec![0f32; grid.height * grid.width * c];
    for (cell, &id) in grid.units.tokens().iter().enumerate() {
        if id as usize >= cb.k() {
            return Err(Error::OutOfRange {
                what: "image unit",
                value: id.into(),
                limit: cb.k() as u64,
            });
        }
        let (gy, gx) = (cell / grid.grid_w, cell % grid.grid_w);
        let centroid = cb.centroid(id as usize);
        for py in 0..p {
            let y = gy * p + py;
            let dst = (y * grid.width + gx * p) * c;
            for (d, &s) in pixels[dst..dst + p * c]
                .iter_mut()
                .zip(&centroid[py * p * c..(py + 1) * p * c])
            {
                *d = s.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(grid.height, grid.width, c, pixels)
}

/// Mean squared pixel error.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.pixels.len() != b.pixels.len() {
        return Err(Error::DimensionMismatch {
            expected: a.pixels.len(),
            found: b.pixels.len(),
        });
    }
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(sum / a.pixels.len() as f64)
}

/// Bits to store a grid of `height/patch × width/patch` units.
pub fn grid_bits(height: usize, width: usize, patch: usize, n_units: u64) -> u64 {
    ((height / patch) * (width / patch)) as u64 * u64::from(bit_width(n_units))
}

// ---- binary PPM (P6, maxval 255) ----

pub fn write_ppm<W: Write>(img: &Image, mut sink: W) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::invalid("PPM output needs 3 channels"));
    }
    write!(sink, "P6\n{} {}\n255\n", img.width, img.height)?;
    sink.write_all(&img.to_u8())?;
    Ok(())
}

pub fn read_ppm<R: Read>(source: R) -> Result<Image> {
    let mut r = BufReader::new(source);
    let magic = ppm_token(&mut r)?;
    if magic != "P6" {
        return Err(Error::format("PPM", format!("expected P6, found {magic:?}")));
    }
    let mut header = [0usize; 3];
    for v in &mut header {
        let tok = ppm_token(&mut r)?;
        *v = tok
            .parse()
            .map_err(|_| Error::format("PPM", format!("bad header value {tok:?}")))?;
    }
    let [width, height, maxval] = header;
    if maxval != 255 {
        return Err(Error::format("PPM", format!("only maxval 255 is supported, got {maxval}")));
    }
    // ppm_token consumed exactly one whitespace byte after maxval.
    let mut bytes = vec![0u8; width * height * 3];
    r.read_exact(&mut bytes)
        .map_err(|e| crate::units::truncated("PPM raster", e))?;
    Image::from_u8(height, width, 3, &bytes)
}

/// Reads one whitespace-delimited header token, skipping `#` comments, and
/// consumes the single whitespace byte that ends it.
fn ppm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format("PPM", "truncated header"));
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(b as char);
        }
    }
}

pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_ppm(img, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    read_ppm(fs::File::open(path)?)
}
