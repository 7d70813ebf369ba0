use darkspec::darksynth::{DarkSynthesizer, SynthesisConfig};
use darkspec::metrics::validate_report_with_bins;
use darkspec::photon::{collect_variance_pairs, default_bin_width, fit_gain, synthesize_noisy};
use darkspec::ptb::{decode_ptb, encode_ptb};
use darkspec::sensorsim::{generate_dark, generate_noisy_pair, SimConfig};

fn small() -> SimConfig {
    SimConfig {
        height: 96,
        width: 96,
        seed: 2,
        ..Default::default()
    }
}

#[test]
fn synthetic_dark_survives_storage_and_validates() {
    let cfg = small();
    let (dark, meta, _) = generate_dark(&cfg, 1).unwrap();
    let synth = DarkSynthesizer::new(&dark, SynthesisConfig { sigma: 20.0, seed: 4, ..Default::default() }).unwrap();
    let frame = synth.frame(0).unwrap();
    let (back, back_meta) = decode_ptb(&encode_ptb(&frame, &meta).unwrap()).unwrap();
    assert_eq!(back_meta.iso, meta.iso);
    for (a, b) in back.data().iter().zip(frame.data()) {
        assert!((a - b).abs() <= 1e-6 * b.abs());
    }
    // 96x96 planes are too small for the default 256 bins.
    let report = validate_report_with_bins(&dark, &back, 20.0, 64).unwrap();
    assert!(report.max_kld() < 0.05, "{}", report.max_kld());
    assert!(report.icc_offdiag_delta.unwrap().abs() < 0.1);
}

#[test]
fn noisy_synthesis_uses_estimated_gain() {
    let cfg = SimConfig { height: 128, width: 128, ..small() };
    let m = cfg.meta();
    let pairs: Vec<_> = (0..2).map(|i| generate_noisy_pair(&cfg, 10 + i).unwrap()).collect();
    let gain = fit_gain(&collect_variance_pairs(&pairs, &m, default_bin_width(&m)).unwrap(), cfg.iso).unwrap();
    assert!((gain.gain / cfg.g_true - 1.0).abs() < 0.1, "{}", gain.gain);
    let (dark, _, _) = generate_dark(&cfg, 20).unwrap();
    let clean = &pairs[0].0;
    let a = synthesize_noisy(clean, &gain, &dark, &m, 1.0, true, 3).unwrap();
    assert_eq!(a, synthesize_noisy(clean, &gain, &dark, &m, 1.0, true, 3).unwrap());
    assert_ne!(a, synthesize_noisy(clean, &gain, &dark, &m, 1.0, true, 4).unwrap());
    // Lower light at the same output level means more shot noise.
    let var = |img: &darkspec::tensor::PlanarImage| {
        let d: Vec<f64> = img.data().iter().zip(clean.data()).map(|(y, x)| y - x).collect();
        darkspec::metrics::sample_moments(&d).variance
    };
    let dim = synthesize_noisy(clean, &gain, &dark, &m, 4.0, false, 3).unwrap();
    assert!(var(&dim) > 2.0 * var(&a));
}
