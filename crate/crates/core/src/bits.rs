//! Storage budget of raw signals versus discrete units.
//!
//! All counts are exact integers. Ratios are kept as reduced fractions and
//! only turned into percentages for display.

use std::fmt;

use num_rational::Ratio;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::units::bit_width;

/// `H · W · C · depth`.
pub fn bits_raw_image(height: u64, width: u64, channels: u64, depth: u64) -> u64 {
    height * width * channels * depth
}

/// `(H/P)(W/P) · ceil(log2 N_i)`.
pub fn bits_image_units(height: u64, width: u64, patch: u64, n_units: u64) -> Result<u64> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::invalid(format!(
            "patch {patch} does not divide {height}x{width}"
        )));
    }
    Ok((height / patch) * (width / patch) * u64::from(bit_width(n_units)))
}

fn count(duration_s: f64, rate: u64) -> Result<u64> {
    if !(duration_s >= 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid("duration must be a nonnegative number of seconds"));
    }
    Ok((duration_s * rate as f64).round() as u64)
}

/// `duration · sr · depth`.
pub fn bits_raw_audio(duration_s: f64, sample_rate: u64, depth: u64) -> Result<u64> {
    Ok(count(duration_s, sample_rate)? * depth)
}

/// `duration · fps · dims · depth`.
pub fn bits_mel(duration_s: f64, fps: u64, dims: u64, depth: u64) -> Result<u64> {
    Ok(count(duration_s, fps)? * dims * depth)
}

/// Number of units before repetition removal, `floor(duration · sr / factor)`.
pub fn speech_unit_count(duration_s: f64, sample_rate: u64, factor: u64) -> Result<u64> {
    if factor == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    Ok(count(duration_s, sample_rate)? / factor)
}

/// Unit bits for `observed_len` units if given, otherwise for the
/// pre-dedup count implied by the duration.
pub fn bits_speech_units(
    duration_s: f64,
    sample_rate: u64,
    factor: u64,
    n_units: u64,
    observed_len: Option<u64>,
) -> Result<u64> {
    let len = match observed_len {
        Some(len) => len,
        None => speech_unit_count(duration_s, sample_rate, factor)?,
    };
    Ok(len * u64::from(bit_width(n_units)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageBitsConfig {
    pub height: u64,
    pub width: u64,
    pub channels: u64,
    pub depth: u64,
    pub patch: u64,
    pub n_units: u64,
}

impl Default for ImageBitsConfig {
    fn default() -> Self {
        ImageBitsConfig {
            height: 224,
            width: 224,
            channels: 3,
            depth: 8,
            patch: 8,
            n_units: 8192,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioBitsConfig {
    pub duration_s: f64,
    pub sample_rate: u64,
    pub depth: u64,
    pub mel_fps: u64,
    pub mel_dims: u64,
    pub mel_depth: u64,
    pub factor: u64,
    pub n_units: u64,
}

impl Default for AudioBitsConfig {
    fn default() -> Self {
        AudioBitsConfig {
            duration_s: 1.0,
            sample_rate: 16_000,
            depth: 16,
            mel_fps: 100,
            mel_dims: 80,
            mel_depth: 32,
            factor: 320,
            n_units: 200,
        }
    }
}

/// Side-by-side storage cost of each representation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitsReport {
    pub raw_image_bits: u64,
    pub image_unit_bits: u64,
    pub raw_audio_bits: u64,
    pub mel_bits: u64,
    pub speech_unit_bits_prededup: u64,
    pub speech_unit_bits_postdedup: u64,
    /// `None` when the reference size is zero.
    pub image_ratio: Option<Ratio<u64>>,
    pub speech_ratio_vs_raw: Option<Ratio<u64>>,
    pub speech_ratio_vs_mel: Option<Ratio<u64>>,
}

fn ratio(num: u64, den: u64) -> Option<Ratio<u64>> {
    (den != 0).then(|| Ratio::new(num, den))
}

/// Builds the report. `dedup_len`, when given, is the measured unit count
/// after repetition removal and may not exceed the pre-dedup count.
pub fn report(image: &ImageBitsConfig, audio: &AudioBitsConfig, dedup_len: Option<u64>) -> Result<BitsReport> {
    let raw_image_bits = bits_raw_image(image.height, image.width, image.channels, image.depth);
    let image_unit_bits = bits_image_units(image.height, image.width, image.patch, image.n_units)?;
    let raw_audio_bits = bits_raw_audio(audio.duration_s, audio.sample_rate, audio.depth)?;
    let mel_bits = bits_mel(audio.duration_s, audio.mel_fps, audio.mel_dims, audio.mel_depth)?;
    let pre_len = speech_unit_count(audio.duration_s, audio.sample_rate, audio.factor)?;
    let post_len = dedup_len.unwrap_or(pre_len);
    if post_len > pre_len {
        return Err(Error::invalid(format!(
            "deduplicated length {post_len} exceeds pre-dedup length {pre_len}"
        )));
    }
    let width = u64::from(bit_width(audio.n_units));
    let pre = pre_len * width;
    let post = post_len * width;
    Ok(BitsReport {
        raw_image_bits,
        image_unit_bits,
        raw_audio_bits,
        mel_bits,
        speech_unit_bits_prededup: pre,
        speech_unit_bits_postdedup: post,
        image_ratio: ratio(image_unit_bits, raw_image_bits),
        speech_ratio_vs_raw: ratio(pre, raw_audio_bits),
        speech_ratio_vs_mel: ratio(pre, mel_bits),
    })
}

/// Percentage rounded half-up to one decimal, e.g. `"0.8%"`.
pub fn percent_1dp(r: Ratio<u64>) -> String {
    let num = u128::from(*r.numer());
    let den = u128::from(*r.denom());
    // tenths of a percent
    let tenths = (num * 2000 + den) / (2 * den);
    format!("{}.{}%", tenths / 10, tenths % 10)
}

fn fmt_ratio(r: Option<Ratio<u64>>) -> (String, String, String) {
    match r {
        Some(r) => (
            format!("{}/{}", r.numer(), r.denom()),
            format!("{:.6}", *r.numer() as f64 / *r.denom() as f64),
            percent_1dp(r),
        ),
        None => ("n/a".into(), "n/a".into(), "n/a".into()),
    }
}

impl BitsReport {
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("raw_image_bits", self.raw_image_bits);
        kv.set("image_unit_bits", self.image_unit_bits);
        kv.set("raw_audio_bits", self.raw_audio_bits);
        kv.set("mel_bits", self.mel_bits);
        kv.set("speech_unit_bits_prededup", self.speech_unit_bits_prededup);
        kv.set("speech_unit_bits_postdedup", self.speech_unit_bits_postdedup);
        for (name, r) in [
            ("image_ratio", self.image_ratio),
            ("speech_ratio_vs_raw", self.speech_ratio_vs_raw),
            ("speech_ratio_vs_mel", self.speech_ratio_vs_mel),
        ] {
            let (exact, real, pct) = fmt_ratio(r);
            kv.set(name, real);
            kv.set(format!("{name}_exact"), exact);
            kv.set(format!("{name}_percent"), pct);
        }
        kv
    }
}

impl fmt::Display for BitsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28}{:>14}", "representation", "bits")?;
        for (name, bits) in [
            ("raw image", self.raw_image_bits),
            ("image units", self.image_unit_bits),
            ("raw audio", self.raw_audio_bits),
            ("mel spectrogram", self.mel_bits),
            ("speech units (pre-dedup)", self.speech_unit_bits_prededup),
            ("speech units (post-dedup)", self.speech_unit_bits_postdedup),
        ] {
            writeln!(f, "{name:<28}{bits:>14}")?;
        }
        for (name, r) in [
            ("image units / raw image", self.image_ratio),
            ("speech units / raw audio", self.speech_ratio_vs_raw),
            ("speech units / mel", self.speech_ratio_vs_mel),
        ] {
            let (exact, _, pct) = fmt_ratio(r);
            writeln!(f, "{name:<28}{pct:>14}  ({exact})")?;
        }
        Ok(())
    }
}
