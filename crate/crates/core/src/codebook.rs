//! Centroid tables shared by the speech and image quantizers, plus the
//! `UCB1` file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::units::truncated;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"UCB1";
pub const CODEBOOK_VERSION: u8 = 1;
const HEADER_LEN: usize = 13;

/// `k` centroids of dimension `dim`, stored row-major in 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f32>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::invalid("codebook needs k >= 1 and dim >= 1"));
        }
        if centroids.len() != k * dim {
            return Err(Error::DimensionMismatch {
                expected: k * dim,
                found: centroids.len(),
            });
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        Ok(Codebook { k, dim, centroids })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("codebook rows have differing lengths"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, id: usize) -> &[f32] {
        &self.centroids[id * self.dim..(id + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Index of the centroid nearest to `point` in squared Euclidean
    /// distance, with ties going to the lowest id, and that distance.
    pub fn nearest(&self, point: &[f32]) -> (u32, f64) {
        debug_assert_eq!(point.len(), self.dim);
        let mut best = (0u32, f64::INFINITY);
        for (id, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = squared_distance(point, c);
            if d < best.1 {
                best = (id as u32, d);
            }
        }
        best
    }

    /// Serialized size in bytes.
    pub fn file_len(&self) -> usize {
        HEADER_LEN + self.centroids.len() * 4
    }
}

pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

pub fn write_codebook<W: Write>(cb: &Codebook, mut sink: W) -> Result<()> {
    let k = u32::try_from(cb.k).map_err(|_| Error::invalid("k exceeds u32"))?;
    let dim = u32::try_from(cb.dim).map_err(|_| Error::invalid("dim exceeds u32"))?;
    sink.write_all(CODEBOOK_MAGIC)?;
    sink.write_all(&[CODEBOOK_VERSION])?;
    sink.write_all(&k.to_le_bytes())?;
    sink.write_all(&dim.to_le_bytes())?;
    for v in &cb.centroids {
        sink.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_codebook<R: Read>(mut source: R) -> Result<Codebook> {
    let mut header = [0u8; HEADER_LEN];
    source
        .read_exact(&mut header)
        .map_err(|e| truncated("codebook header", e))?;
    if &header[0..4] != CODEBOOK_MAGIC {
        return Err(Error::format("codebook", "bad magic"));
    }
    if header[4] != CODEBOOK_VERSION {
        return Err(Error::format(
            "codebook",
            format!("unsupported version {}", header[4]),
        ));
    }
    let k = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    if k == 0 || dim == 0 {
        return Err(Error::format("codebook", "k and dim must be nonzero"));
    }
    let mut payload = vec![0u8; k * dim * 4];
    source
        .read_exact(&mut payload)
        .map_err(|e| truncated("codebook payload", e))?;
    let centroids: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("codebook", "non-finite centroid entry"));
    }
    Codebook::new(k, dim, centroids)
}

pub fn save_codebook(cb: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_codebook(cb, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    read_codebook(BufReader::new(File::open(path)?))
}
