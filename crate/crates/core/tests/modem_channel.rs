use num_complex::Complex64;
use poisonlink::channel::{
    self, noise_variance, Channel, ChannelConfig, ChannelKind, TapTable,
};
use poisonlink::modem::{self, SymbolLabel};
use poisonlink::seeds;
use poisonlink::Error;
use proptest::prelude::*;

fn classes(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, n)
}

proptest! {
    #[test]
    fn joint_label_round_trips(per_user in (1usize..6).prop_flat_map(classes)) {
        let j = modem::joint_of(&per_user).unwrap();
        prop_assert!(j < 4usize.pow(per_user.len() as u32));
        prop_assert_eq!(modem::users_of(j, per_user.len()).unwrap(), per_user.clone());
        let label = SymbolLabel::new(per_user.clone()).unwrap();
        prop_assert_eq!(SymbolLabel::from_joint(label.joint(), per_user.len()).unwrap(), label);
    }

    #[test]
    fn hard_decision_survives_small_noise(c in 0u8..4, nr in -0.7f64..0.7, ni in -0.7f64..0.7) {
        let x = modem::qpsk_point(c).unwrap();
        prop_assert!((x.norm_sqr() - 1.0).abs() < 1e-12);
        prop_assert_eq!(modem::demodulate_hard(x + Complex64::new(nr, ni)), c);
    }

    #[test]
    fn real_features_round_trip(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..6)) {
        let y: Vec<Complex64> = v.iter().map(|&(r, i)| Complex64::new(r, i)).collect();
        let f = modem::real_features(&y);
        prop_assert_eq!(f.len(), 2 * y.len());
        prop_assert_eq!(&f[..y.len()], &y.iter().map(|c| c.re).collect::<Vec<_>>()[..]);
        prop_assert_eq!(modem::from_real_features(&f).unwrap(), y);
    }

    #[test]
    fn tap_csv_round_trips(
        n_rx in 1usize..4,
        n_tx in 1usize..4,
        blocks in 1usize..6,
        seed in any::<u64>(),
    ) {
        let t = channel::drifting_taps(n_rx, n_tx, blocks, seed);
        prop_assert_eq!(t.rows.len(), blocks);
        prop_assert!(t.rows.iter().all(|r| r.len() == 2 * n_rx * n_tx));
        prop_assert_eq!(TapTable::parse_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn synthetic_tap_magnitudes_stay_in_range(seed in any::<u64>(), b in 0usize..500) {
        let ch = Channel::new(ChannelConfig::new(ChannelKind::LinearTimeVarying, 10.0, seed)).unwrap();
        let h = ch.taps_at(b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let decay = 0.8f64.powi((i as i32 - j as i32).abs());
                let m = h.h(i, j).norm();
                prop_assert!(m >= 0.2 * decay - 1e-12 && m <= decay + 1e-12);
            }
        }
    }
}

#[test]
fn out_of_range_labels_are_rejected() {
    assert!(matches!(modem::qpsk_point(4), Err(Error::Range(_))));
    assert!(modem::joint_of(&[0, 7]).is_err());
    assert!(modem::users_of(256, 4).is_err());
    assert!(modem::from_real_features(&[1.0, 2.0, 3.0]).is_err());
}

/// Residuals `y − Hx` of a linear channel have per-entry complex variance
/// σ² = 10^(−snr/10), split evenly between real and imaginary parts.
#[test]
fn noise_power_matches_snr() {
    for snr in [0.0, 10.0, 14.0] {
        let ch = Channel::new(ChannelConfig::new(ChannelKind::LinearStatic, snr, 4)).unwrap();
        let real = ch.taps_at(0).unwrap();
        let mut rng = seeds::stream(1, "noise-test", 0);
        let (mut re, mut im, mut n) = (0.0, 0.0, 0usize);
        for _ in 0..20_000 {
            let x = modem::modulate(&[0, 1, 2, 3]).unwrap();
            let clean = real.apply(&x);
            let y = ch.transmit(&x, &real, &mut rng).y;
            for (a, b) in y.iter().zip(&clean) {
                let d = a - b;
                re += d.re * d.re;
                im += d.im * d.im;
                n += 1;
            }
        }
        let s2 = noise_variance(snr);
        let (re, im) = (re / n as f64, im / n as f64);
        assert!(((re + im) / s2 - 1.0).abs() < 0.02, "snr {snr}: total {}", re + im);
        assert!((re / im - 1.0).abs() < 0.03, "snr {snr}: re/im split {re}/{im}");
    }
}

#[test]
fn channel_is_a_function_of_its_seed() {
    let cfg = ChannelConfig::new(ChannelKind::NonlinearTimeVarying, 12.0, 77);
    let a = Channel::new(cfg.clone()).unwrap();
    let b = Channel::new(cfg.clone()).unwrap();
    let other = Channel::new(ChannelConfig { seed: 78, ..cfg }).unwrap();
    let mut r1 = seeds::stream(3, "block", 5);
    let mut r2 = seeds::stream(3, "block", 5);
    let x = a.generate_block(5, 50, 100, &mut r1).unwrap();
    let y = b.generate_block(5, 50, 100, &mut r2).unwrap();
    assert_eq!(x, y);
    assert_ne!(a.taps_at(5).unwrap(), other.taps_at(5).unwrap());
}

#[test]
fn tap_file_channel_reads_rows_in_order() {
    let table = channel::drifting_taps(4, 4, 3, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("taps.csv");
    channel::write_tap_file(&path, &table).unwrap();
    let mut cfg = ChannelConfig::new(ChannelKind::TapFile, 10.0, 0);
    cfg.tap_file = Some(path);
    let ch = Channel::new(cfg).unwrap();
    for b in 0..3 {
        let h = ch.taps_at(b).unwrap();
        for e in 0..16 {
            assert_eq!(h.h_re[e], table.rows[b][2 * e]);
            assert_eq!(h.h_im[e], table.rows[b][2 * e + 1]);
        }
    }
    assert!(ch.taps_at(3).is_err());
}

#[test]
fn malformed_tap_files_report_a_line() {
    let bad_header = "blk,h00_re,h00_im\n0,1,0\n";
    assert!(matches!(TapTable::parse_csv(bad_header), Err(Error::Parse { line: 1, .. })));
    let bad_row = "block,h00_re,h00_im\n0,1,0\n1,abc,0\n";
    match TapTable::parse_csv(bad_row) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn bundled_taps_cover_a_full_run() {
    let t = channel::load_tap_file(std::path::Path::new("bundled:cost2100")).unwrap();
    assert_eq!((t.n_rx, t.n_tx), (4, 4));
    assert!(t.blocks() >= 100);
}
