//! Discrete unit sequences: repetition removal and the bit-packed `UCU1`
//! stream format.
//!
//! Unit ids are 0-based. A stream stores every token in exactly
//! [`bit_width`]`(vocab_size)` bits, which is also the width the bit budget
//! in [`crate::bits`] charges per unit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const UNITS_MAGIC: &[u8; 4] = b"UCU1";
pub const UNITS_VERSION: u8 = 1;

/// Number of bits needed to store one id drawn from `vocab_size` symbols,
/// `ceil(log2(vocab_size))`. A one-symbol vocabulary costs zero bits.
pub fn bit_width(vocab_size: u64) -> u32 {
    if vocab_size <= 1 {
        0
    } else {
        64 - (vocab_size - 1).leading_zeros()
    }
}

/// An ordered sequence of discrete unit ids over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UnitSequence {
    tokens: Vec<u32>,
    vocab_size: u32,
    deduplicated: bool,
}

impl UnitSequence {
    /// Checks that every token is below `vocab_size`.
    pub fn new(tokens: Vec<u32>, vocab_size: u32) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be at least 1"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::OutOfRange {
                what: "unit id",
                value: bad.into(),
                limit: vocab_size.into(),
            });
        }
        Ok(UnitSequence {
            tokens,
            vocab_size,
            deduplicated: false,
        })
    }

    pub fn empty(vocab_size: u32) -> Result<Self> {
        Self::new(Vec::new(), vocab_size)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.tokens
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whether this sequence went through [`dedup`]. Never inferred from the
    /// contents: `[1, 2, 3]` read from disk is not marked.
    pub fn is_deduplicated(&self) -> bool {
        self.deduplicated
    }

    /// Marks a sequence as having had repetitions removed. Fails if it still
    /// holds adjacent duplicates.
    pub fn mark_deduplicated(mut self) -> Result<Self> {
        if has_adjacent_repeats(&self.tokens) {
            return Err(Error::invalid(
                "sequence has adjacent repeats and cannot be marked deduplicated",
            ));
        }
        self.deduplicated = true;
        Ok(self)
    }

    pub fn dedup(&self) -> UnitSequence {
        dedup(self)
    }

    /// Size of the packed payload in bits.
    pub fn packed_bits(&self) -> u64 {
        self.tokens.len() as u64 * u64::from(bit_width(self.vocab_size.into()))
    }
}

fn has_adjacent_repeats(tokens: &[u32]) -> bool {
    tokens.windows(2).any(|w| w[0] == w[1])
}

/// Collapses every run of identical adjacent units into a single unit.
pub fn dedup(seq: &UnitSequence) -> UnitSequence {
    let mut tokens = seq.tokens.clone();
    tokens.dedup();
    UnitSequence {
        tokens,
        vocab_size: seq.vocab_size,
        deduplicated: true,
    }
}

/// Writes a `UCU1` stream: magic, version byte, little-endian `u32`
/// vocab size and length, then LSB-first packed tokens padded with zero bits
/// to a byte boundary.
pub fn write_units<W: Write>(seq: &UnitSequence, mut sink: W) -> Result<()> {
    let len = u32::try_from(seq.len())
        .map_err(|_| Error::invalid("unit stream longer than u32::MAX tokens"))?;
    sink.write_all(UNITS_MAGIC)?;
    sink.write_all(&[UNITS_VERSION])?;
    sink.write_all(&seq.vocab_size.to_le_bytes())?;
    sink.write_all(&len.to_le_bytes())?;

    let width = bit_width(seq.vocab_size.into());
    let mut packer = BitPacker::default();
    for &t in &seq.tokens {
        packer.push(t, width);
    }
    sink.write_all(&packer.finish())?;
    Ok(())
}

/// Reads a `UCU1` stream. The returned sequence is not marked deduplicated.
pub fn read_units<R: Read>(mut source: R) -> Result<UnitSequence> {
    let mut header = [0u8; 13];
    source
        .read_exact(&mut header)
        .map_err(|e| truncated("unit stream header", e))?;
    if &header[0..4] != UNITS_MAGIC {
        return Err(Error::format("unit stream", "bad magic"));
    }
    if header[4] != UNITS_VERSION {
        return Err(Error::format(
            "unit stream",
            format!("unsupported version {}", header[4]),
        ));
    }
    let vocab_size = u32::from_le_bytes(header[5..9].try_into().unwrap());
    let len = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    if vocab_size == 0 {
        return Err(Error::format("unit stream", "vocab_size is zero"));
    }

    let width = bit_width(vocab_size.into());
    let payload_bytes = (len as u64 * u64::from(width)).div_ceil(8) as usize;
    let mut payload = vec![0u8; payload_bytes];
    source
        .read_exact(&mut payload)
        .map_err(|e| truncated("unit stream payload", e))?;

    let mut reader = BitReader::new(&payload);
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..len {
        let t = reader.take(width);
        if t >= vocab_size {
            return Err(Error::OutOfRange {
                what: "unit id",
                value: t.into(),
                limit: vocab_size.into(),
            });
        }
        tokens.push(t);
    }
    Ok(UnitSequence {
        tokens,
        vocab_size,
        deduplicated: false,
    })
}

pub fn save_units(seq: &UnitSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_units(seq, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_units(path: impl AsRef<Path>) -> Result<UnitSequence> {
    read_units(BufReader::new(File::open(path)?))
}

pub(crate) fn truncated(what: &'static str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format(what, "truncated")
    } else {
        Error::Io(e)
    }
}

#[derive(Default)]
struct BitPacker {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitPacker {
    fn push(&mut self, value: u32, width: u32) {
        if width == 0 {
            return;
        }
        self.acc |= u64::from(value) << self.filled;
        self.filled += width;
        while self.filled >= 8 {
            self.bytes.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push(self.acc as u8);
        }
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    filled: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader {
            bytes,
            pos: 0,
            acc: 0,
            filled: 0,
        }
    }

    fn take(&mut self, width: u32) -> u32 {
        if width == 0 {
            return 0;
        }
        while self.filled < width {
            // Length was validated against the payload size up front.
            self.acc |= u64::from(self.bytes[self.pos]) << self.filled;
            self.pos += 1;
            self.filled += 8;
        }
        let value = (self.acc & ((1u64 << width) - 1)) as u32;
        self.acc >>= width;
        self.filled -= width;
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(tokens: &[u32], vocab: u32) -> UnitSequence {
        UnitSequence::new(tokens.to_vec(), vocab).unwrap()
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(seq(&[1, 1, 2, 2, 2, 3], 4).dedup().tokens(), &[1, 2, 3]);
        assert!(seq(&[], 4).dedup().is_empty());
        assert_eq!(seq(&[5], 6).dedup().tokens(), &[5]);
        let d = seq(&[1, 1], 4).dedup();
        assert!(d.is_deduplicated());
        assert_eq!(d.vocab_size(), 4);
    }

    #[test]
    fn bit_widths() {
        assert_eq!(bit_width(1), 0);
        assert_eq!(bit_width(2), 1);
        assert_eq!(bit_width(200), 8);
        assert_eq!(bit_width(256), 8);
        assert_eq!(bit_width(257), 9);
        assert_eq!(bit_width(8192), 13);
        assert_eq!(bit_width(1 << 32), 32);
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        assert!(UnitSequence::new(vec![3], 3).is_err());
        assert!(UnitSequence::new(vec![], 0).is_err());
    }

    #[test]
    fn roundtrip_and_payload_size() {
        let s = seq(&[1, 2, 3], 200);
        let mut buf = Vec::new();
        write_units(&s, &mut buf).unwrap();
        assert_eq!(read_units(&buf[..]).unwrap(), s);

        let fifty = seq(&[7; 50], 200);
        assert_eq!(fifty.packed_bits(), 400);
        let mut buf = Vec::new();
        write_units(&fifty, &mut buf).unwrap();
        assert_eq!(buf.len(), 13 + 400 / 8);
    }

    #[test]
    fn decode_rejects_token_at_vocab_size() {
        // vocab 200 packs 8 bits; write the byte 200 directly.
        let mut buf = Vec::new();
        buf.extend_from_slice(UNITS_MAGIC);
        buf.push(UNITS_VERSION);
        buf.extend_from_slice(&200u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(200);
        assert!(matches!(
            read_units(&buf[..]),
            Err(Error::OutOfRange { value: 200, .. })
        ));
    }

    #[test]
    fn decode_rejects_bad_headers_and_truncation() {
        let mut buf = Vec::new();
        write_units(&seq(&[1, 2, 3, 4], 200), &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_units(&bad_magic[..]), Err(Error::Format { .. })));

        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(matches!(read_units(&bad_version[..]), Err(Error::Format { .. })));

        assert!(matches!(read_units(&buf[..buf.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(read_units(&buf[..7]), Err(Error::Format { .. })));
    }

    #[test]
    fn marking_requires_no_repeats() {
        assert!(seq(&[1, 1], 3).mark_deduplicated().is_err());
        assert!(seq(&[1, 2, 1], 3).mark_deduplicated().unwrap().is_deduplicated());
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent_and_shrinking(tokens in proptest::collection::vec(0u32..5, 0..60)) {
            let s = seq(&tokens, 5);
            let once = s.dedup();
            let twice = once.dedup();
            prop_assert_eq!(twice.tokens(), once.tokens());
            prop_assert!(once.len() <= s.len());
            prop_assert!(!has_adjacent_repeats(once.tokens()));
            prop_assert_eq!(once.len() == s.len(), !has_adjacent_repeats(&tokens));
        }

        #[test]
        fn packed_stream_roundtrips(vocab in 1u32..100_000, raw in proptest::collection::vec(any::<u32>(), 0..80)) {
            let s = seq(&raw.iter().map(|t| t % vocab).collect::<Vec<_>>(), vocab);
            let mut buf = Vec::new();
            write_units(&s, &mut buf).unwrap();
            prop_assert_eq!(buf.len() as u64, 13 + s.packed_bits().div_ceil(8));
            prop_assert_eq!(read_units(&buf[..]).unwrap(), s);
        }
    }
}
