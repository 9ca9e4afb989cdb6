use im2sp::datagen::{gen_corpus, min_centroid_distance, DataGenConfig};
use im2sp::quantizer::{assign, encode_speech};

#[test]
fn noise_inside_the_margin_is_recovered_exactly() {
    // Uniform noise bounded by s per coordinate moves a frame at most s·√D,
    // so s·√D < dmin/2 keeps every frame nearest to its own centroid.
    for seed in 0..4 {
        let base = gen_corpus(&DataGenConfig { seed, n_items: 1, ..Default::default() }).unwrap();
        let dmin = min_centroid_distance(&base.speech_codebook);
        let d = base.config.feature_dim as f64;
        let noise = 0.99 * dmin / 2.0 / d.sqrt();
        let corpus = gen_corpus(&DataGenConfig { seed, n_items: 12, noise: Some(noise), ..Default::default() }).unwrap();
        for item in &corpus.items {
            assert_eq!(assign(&corpus.speech_codebook, &item.features).unwrap(), item.raw_units);
            assert_eq!(encode_speech(&item.features, &corpus.speech_codebook).unwrap(), item.units);
        }
    }
}

#[test]
fn default_noise_is_a_tenth_of_the_half_gap() {
    let corpus = gen_corpus(&DataGenConfig::default()).unwrap();
    let want = 0.1 * min_centroid_distance(&corpus.speech_codebook) / 2.0;
    assert!((corpus.noise - want).abs() < 1e-12);
    assert_eq!(corpus.items.len(), 64);
}
