//! Continuous frame sequences fed to the speech quantizer, and the `UFM1`
//! binary / delimited-text readers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::units::truncated;

pub const FEATURES_MAGIC: &[u8; 4] = b"UFM1";

/// Frame rate assumed when a file does not carry one: 16 kHz audio
/// downsampled by 320.
pub const DEFAULT_FRAME_RATE_HZ: f64 = 50.0;

/// `T × dim` matrix of finite frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<f32>,
    dim: usize,
    frame_rate_hz: f64,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, dim: usize, frame_rate_hz: f64) -> Result<Self> {
        if !(frame_rate_hz > 0.0 && frame_rate_hz.is_finite()) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        if dim == 0 && !frames.is_empty() {
            return Err(Error::invalid("nonempty feature sequence with dim 0"));
        }
        if dim > 0 && !frames.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: frames.len() % dim,
            });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature frames must be finite"));
        }
        Ok(FeatureSequence {
            frames,
            dim,
            frame_rate_hz,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], frame_rate_hz: f64) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("feature rows have differing lengths"));
        }
        Self::new(rows.concat(), dim, frame_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.frames.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on a zero chunk size.
        self.frames.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.frames
    }

    /// Duration covered by the frames, in seconds.
    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.frame_rate_hz
    }
}

pub fn write_features<W: Write>(feats: &FeatureSequence, mut sink: W) -> Result<()> {
    let t = u32::try_from(feats.len()).map_err(|_| Error::invalid("too many frames"))?;
    let dim = u32::try_from(feats.dim).map_err(|_| Error::invalid("dim exceeds u32"))?;
    sink.write_all(FEATURES_MAGIC)?;
    sink.write_all(&t.to_le_bytes())?;
    sink.write_all(&dim.to_le_bytes())?;
    for v in &feats.frames {
        sink.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features<R: Read>(mut source: R) -> Result<FeatureSequence> {
    let mut header = [0u8; 12];
    source
        .read_exact(&mut header)
        .map_err(|e| truncated("feature file header", e))?;
    if &header[0..4] != FEATURES_MAGIC {
        return Err(Error::format("feature file", "bad magic"));
    }
    let t = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; t * dim * 4];
    source
        .read_exact(&mut payload)
        .map_err(|e| truncated("feature file payload", e))?;
    let frames = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FeatureSequence::new(frames, dim, DEFAULT_FRAME_RATE_HZ)
}

/// Parses one frame per line; values separated by whitespace or commas.
/// Blank lines and `#` comments are skipped.
pub fn parse_features_text(text: &str) -> Result<FeatureSequence> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f32>().map_err(|_| {
                    Error::format("feature text", format!("line {}: bad number {s:?}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    FeatureSequence::from_rows(&rows, DEFAULT_FRAME_RATE_HZ)
}

pub fn save_features(feats: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_features(feats, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a `UFM1` file, or delimited text when the magic is absent.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.starts_with(FEATURES_MAGIC) {
        read_features(&bytes[..])
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::format("feature text", "not UTF-8"))?;
        parse_features_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_roundtrip() {
        let f = FeatureSequence::from_rows(&[vec![1.0, 2.0], vec![-3.5, 0.25]], 50.0).unwrap();
        let mut buf = Vec::new();
        write_features(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 16);
        assert_eq!(read_features(&buf[..]).unwrap(), f);
    }

    #[test]
    fn text_parsing() {
        let f = parse_features_text("# two frames\n1, 2 3\n\n4 5,6\n").unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.dim(), 3);
        assert_eq!(f.frame(1), &[4.0, 5.0, 6.0]);
        assert!(parse_features_text("1 2\n3\n").is_err());
        assert!(parse_features_text("1 x\n").is_err());
        assert!(parse_features_text("").unwrap().is_empty());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(FeatureSequence::new(vec![f32::NAN], 1, 50.0).is_err());
    }

    #[test]
    fn duration_follows_frame_rate() {
        let f = FeatureSequence::new(vec![0.0; 100], 1, 50.0).unwrap();
        assert_eq!(f.duration_s(), 2.0);
    }
}
