use poisonlink::channel::{Channel, ChannelConfig, ChannelKind};
use poisonlink::numerics::Tensor;
use poisonlink::receivers::{
    self, BlackBoxMlpNet, DeepSicNet, Detector, DetectorKind, Dims, ParamBlob, RES_BLOCKS,
};
use poisonlink::seeds;
use poisonlink::training::{online_adapt, OnlineConfig, PilotSet};
use poisonlink::Error;
use proptest::prelude::*;

const DIMS: Dims = Dims { n_tx: 4, n_rx: 4 };

fn linear_layer(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

#[test]
fn deepsic_layout() {
    let mut rng = seeds::stream(1, "test", 0);
    let d = Detector::new(DetectorKind::DeepSic, DIMS, &mut rng);
    let net = d.as_deepsic().unwrap();
    assert_eq!(net.subnet_count(), 12);
    // features plus the other users' soft vectors
    assert_eq!(DeepSicNet::in_dim(DIMS), 8 + 4 * 3);
    for p in net.params().chunks(4) {
        assert_eq!(p[0].shape(), &[20, 64]);
        assert_eq!(p[1].shape(), &[64]);
        assert_eq!(p[2].shape(), &[64, 4]);
        assert_eq!(p[3].shape(), &[4]);
    }
    let expected = 12 * (linear_layer(20, 64) + linear_layer(64, 4));
    assert_eq!(d.parameter_count(), expected);
    assert_eq!(expected, 19_248);
}

#[test]
fn mlp_layout() {
    let mut rng = seeds::stream(1, "test", 0);
    let d = Detector::new(DetectorKind::BlackBoxMlp, DIMS, &mut rng);
    assert_eq!(BlackBoxMlpNet::layer_widths(DIMS), [8, 60, 60, 60, 256]);
    let shapes: Vec<Vec<usize>> = d.params().iter().map(|p| p.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![vec![8, 60], vec![60], vec![60, 60], vec![60], vec![60, 60], vec![60], vec![60, 256], vec![256]]
    );
    assert_eq!(
        d.parameter_count(),
        linear_layer(8, 60) + 2 * linear_layer(60, 60) + linear_layer(60, 256)
    );
}

#[test]
fn residual_layout_has_bias_free_convolutions() {
    for c in [8, 16, 32] {
        let mut rng = seeds::stream(1, "test", 0);
        let d = Detector::residual(DIMS, c, RES_BLOCKS, &mut rng);
        let net = d.as_residual().unwrap();
        assert_eq!(net.residual_blocks(), 10);
        let convs = net.conv_shapes();
        assert_eq!(convs.len(), 1 + 2 * 10);
        assert_eq!(convs[0], vec![9, c]);
        assert!(convs[1..].iter().all(|s| s == &vec![9 * c, c]));
        // stem conv + BN, two conv + BN per block, linear head; nothing else
        let bn = 2 * c;
        let expected = (9 * c + bn) + 10 * 2 * (9 * c * c + bn) + linear_layer(c, 256);
        assert_eq!(d.parameter_count(), expected, "width {c}");
        let names = d.param_names();
        assert!(names.iter().filter(|n| n.contains("conv")).all(|n| !n.contains("bias")));
    }
}

fn random_rows(n: usize, seed: u64) -> Tensor {
    let mut rng = seeds::stream(seed, "rows", 0);
    Tensor::uniform(vec![n, 8], 1.5, &mut rng)
}

fn all_kinds(seed: u64) -> Vec<Detector> {
    let mut rng = seeds::stream(seed, "init", 0);
    vec![
        Detector::new(DetectorKind::DeepSic, DIMS, &mut rng),
        Detector::new(DetectorKind::BlackBoxMlp, DIMS, &mut rng),
        Detector::residual(DIMS, 8, 3, &mut rng),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_are_probability_simplexes(seed in any::<u64>(), n in 1usize..6) {
        let x = random_rows(n, seed);
        for d in all_kinds(seed) {
            let p = d.predict(&x).unwrap();
            prop_assert_eq!((p.batch, p.n_tx), (n, 4));
            for b in 0..n {
                for u in 0..4 {
                    let row = p.get(b, u);
                    prop_assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    /// Inference is per-sample: a row decodes the same alone or in a batch.
    #[test]
    fn inference_is_row_independent(seed in any::<u64>(), n in 2usize..8) {
        let x = random_rows(n, seed);
        for d in all_kinds(seed) {
            let batch = d.predict(&x).unwrap();
            let last = Tensor::new(vec![1, 8], x.row(n - 1).to_vec()).unwrap();
            let alone = d.predict(&last).unwrap();
            for u in 0..4 {
                for (a, b) in alone.get(0, u).iter().zip(batch.get(n - 1, u)) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deepsic_decodes_per_user_argmax(seed in any::<u64>()) {
        let x = random_rows(5, seed);
        let d = &all_kinds(seed)[0];
        prop_assert_eq!(d.decode(&x).unwrap(), receivers::hard_decisions(&d.predict(&x).unwrap()));
    }
}

#[test]
fn snapshot_round_trips_through_bytes() {
    for mut d in all_kinds(3) {
        // move the batch-norm running stats off their initial values
        let x = random_rows(16, 4);
        let labels = d.decode(&x).unwrap();
        d.accumulate_grads(&x, &labels).unwrap();

        let blob = d.snapshot();
        let back = ParamBlob::from_bytes(&blob.to_bytes()).unwrap();
        assert_eq!(back, blob);
        let mut shell = match d.kind() {
            DetectorKind::ResidualConv => {
                let mut rng = seeds::stream(0, "other", 0);
                Detector::residual(DIMS, 8, 3, &mut rng)
            }
            k => Detector::shell(k, DIMS),
        };
        shell.restore(&back).unwrap();
        let probe = random_rows(7, 5);
        assert_eq!(shell.predict(&probe).unwrap(), d.predict(&probe).unwrap());
        assert_eq!(back.distance(&shell.snapshot()).unwrap(), 0.0);
    }
}

#[test]
fn unloaded_and_mismatched_detectors_fail_loudly() {
    let shell = Detector::shell(DetectorKind::DeepSic, DIMS);
    assert!(matches!(shell.decode(&random_rows(2, 1)), Err(Error::State(_))));

    let mut rng = seeds::stream(1, "init", 0);
    let mlp = Detector::new(DetectorKind::BlackBoxMlp, DIMS, &mut rng);
    let mut sic = Detector::new(DetectorKind::DeepSic, DIMS, &mut rng);
    assert!(matches!(sic.restore(&mlp.snapshot()), Err(Error::Compatibility(_))));

    let mut bytes = mlp.snapshot().to_bytes();
    bytes.truncate(bytes.len() - 3);
    assert!(ParamBlob::from_bytes(&bytes).is_err());
}

#[test]
fn online_training_fits_a_linear_block() {
    let ch = Channel::new(ChannelConfig::new(ChannelKind::LinearStatic, 14.0, 2)).unwrap();
    let mut rng = seeds::stream(2, "block", 0);
    let block = ch.generate_block(0, 400, 2000, &mut rng).unwrap();
    let pilots = PilotSet::from_block(&block);
    let cfg = OnlineConfig {
        epochs: 150,
        ..OnlineConfig::default()
    };
    let mut init = seeds::stream(2, "init", 0);
    let mut d = Detector::new(DetectorKind::DeepSic, DIMS, &mut init);
    let report = online_adapt(&mut d, &pilots, &cfg).unwrap();
    assert_eq!(report.losses.len(), 150);
    assert!(report.losses[149] < 0.5 * report.losses[0]);
    let decoded = d.decode(&block.info_rx).unwrap();
    let acc = receivers::accuracy(&decoded, &block.info_labels);
    assert!(acc > 0.8, "DeepSIC accuracy {acc}");
}
