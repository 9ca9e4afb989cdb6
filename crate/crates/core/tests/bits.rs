use im2sp::bits::{bits_image_units, bits_mel, bits_raw_audio, bits_raw_image, bits_speech_units, percent_1dp, report, AudioBitsConfig, ImageBitsConfig};
use im2sp::datagen::{gen_corpus, DataGenConfig};

#[test]
fn small_cases() {
    assert_eq!(bits_raw_image(1, 1, 1, 8), 8);
    assert_eq!(bits_raw_image(32, 32, 3, 8), 24_576);
    assert_eq!(bits_image_units(8, 8, 8, 2).unwrap(), 1);
    assert_eq!(bits_mel(1.0, 100, 80, 32).unwrap(), 256_000);
    assert!(bits_image_units(10, 10, 3, 2).is_err());
}

#[test]
fn zero_duration_costs_nothing() {
    assert_eq!(bits_raw_audio(0.0, 16_000, 16).unwrap(), 0);
    assert_eq!(bits_mel(0.0, 100, 80, 32).unwrap(), 0);
    assert_eq!(bits_speech_units(0.0, 16_000, 320, 200, None).unwrap(), 0);
    let r = report(&ImageBitsConfig::default(), &AudioBitsConfig { duration_s: 0.0, ..Default::default() }, None).unwrap();
    assert_eq!((r.raw_audio_bits, r.mel_bits, r.speech_unit_bits_prededup), (0, 0, 0));
    assert_eq!(r.speech_ratio_vs_raw, None);
}

#[test]
fn default_report_percentages() {
    let r = report(&ImageBitsConfig::default(), &AudioBitsConfig::default(), None).unwrap();
    assert_eq!(percent_1dp(r.image_ratio.unwrap()), "0.8%");
    assert_eq!(percent_1dp(r.speech_ratio_vs_raw.unwrap()), "0.2%");
    assert_eq!(r.speech_unit_bits_postdedup, r.speech_unit_bits_prededup);
}

#[test]
fn costs_scale_linearly_with_duration() {
    for d in [1.0, 2.0, 7.0] {
        assert_eq!(bits_raw_audio(d, 16_000, 16).unwrap(), d as u64 * 256_000);
        assert_eq!(bits_speech_units(d, 16_000, 320, 200, None).unwrap(), d as u64 * 400);
    }
    assert!(report(&ImageBitsConfig::default(), &AudioBitsConfig::default(), Some(51)).is_err());
}

#[test]
fn corpus_dedup_shrinks_unit_bits() {
    let corpus = gen_corpus(&DataGenConfig { n_items: 8, ..Default::default() }).unwrap();
    let pre: u64 = corpus.items.iter().map(|i| i.raw_units.packed_bits()).sum();
    let post: u64 = corpus.items.iter().map(|i| i.units.packed_bits()).sum();
    assert!(post < pre, "{post} vs {pre}");
}
