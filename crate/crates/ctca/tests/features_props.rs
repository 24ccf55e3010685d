use ctca::features::{mel_filterbank, speed_perturb, FeatureConfig, Waveform};
use ctca::synth::{render, synth_corpus, SynthConfig};
use proptest::prelude::*;

fn wave(samples: Vec<f64>) -> Waveform {
    Waveform::new(samples, 16000).unwrap()
}

/// Frequency of the largest bin of a naive DFT over `x`.
fn dominant_hz(x: &[f64], rate: f64) -> (f64, f64) {
    let n = x.len();
    let power = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            re += v * a.cos();
            im += v * a.sin();
        }
        re * re + im * im
    };
    let k = (1..n / 2).max_by(|&a, &b| power(a).total_cmp(&power(b))).unwrap();
    (k as f64 * rate / n as f64, rate / n as f64)
}

#[test]
fn faster_tone_has_scaled_pitch() {
    let rate = 16000.0;
    let tone = wave((0..4000).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / rate).sin()).collect());
    let fast = speed_perturb(&tone, 1.1).unwrap();
    let (hz, bin) = dominant_hz(&fast.samples, rate);
    assert!((hz - 484.0).abs() <= bin, "{hz} Hz, bin {bin}");
}

#[test]
fn nearest_neighbour_separates_two_clean_words() {
    let cfg = SynthConfig {
        vocab: 2,
        train: 12,
        dev: 0,
        test: 0,
        words_min: 1,
        words_max: 1,
        snr_db: f64::INFINITY,
        ..Default::default()
    };
    let corpus = synth_corpus(&cfg, 3).unwrap();
    let items: Vec<(Vec<f64>, &str)> = corpus
        .train
        .iter()
        .map(|u| {
            let f = mel_filterbank(&render(&cfg, 3, &u.id, &u.transcript).unwrap(), &FeatureConfig::default()).unwrap();
            let mut mean = vec![0.0; f.dims()[1]];
            for t in 0..f.rows() {
                for (m, v) in mean.iter_mut().zip(f.row_slice(t)) {
                    *m += v / f.rows() as f64;
                }
            }
            (mean, u.transcript.as_str())
        })
        .collect();
    assert!(items.iter().any(|i| i.1 != items[0].1), "both words drawn");
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    for (i, (x, word)) in items.iter().enumerate() {
        let nearest = items
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .min_by(|a, b| dist(x, &a.1 .0).total_cmp(&dist(x, &b.1 .0)))
            .unwrap();
        assert_eq!(nearest.1 .1, *word);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frame_count_follows_window_and_hop(len in 400usize..6000, seed in any::<u64>()) {
        let samples = (0..len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 1000.0 - 0.5).collect();
        let f = mel_filterbank(&wave(samples), &FeatureConfig::default()).unwrap();
        prop_assert_eq!(f.rows(), (len - 400) / 160 + 1);
        prop_assert_eq!(f.dims()[1], 80);
        prop_assert!(f.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn perturb_there_and_back_keeps_length(len in 1usize..3000, factor in 0.5f64..=2.0) {
        let w = wave(vec![0.25; len]);
        let back = speed_perturb(&speed_perturb(&w, factor).unwrap(), 1.0 / factor).unwrap();
        prop_assert!(back.len().abs_diff(len) <= 1, "{} vs {}", back.len(), len);
        prop_assert_eq!(back.sample_rate, 16000);
    }

    #[test]
    fn sign_flip_leaves_features_unchanged(samples in prop::collection::vec(-1.0f64..1.0, 400..1200)) {
        let cfg = FeatureConfig::default();
        let a = mel_filterbank(&wave(samples.clone()), &cfg).unwrap();
        let b = mel_filterbank(&wave(samples.iter().map(|v| -v).collect()), &cfg).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{} vs {}", x, y);
        }
    }
}
