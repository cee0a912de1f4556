//! Measures how well a surrogate's steepest L2 step transfers to each
//! victim architecture: the first-order loss gain against the white-box
//! optimum, and the cosine between the two input gradients.
//!
//!     cargo run --release --example transferability -- [points]

use poisonlink::attack::transfer_diagnostic;
use poisonlink::channel::{Channel, ChannelConfig, ChannelKind};
use poisonlink::receivers::{Detector, DetectorKind, Dims};
use poisonlink::seeds;
use poisonlink::training::{joint_train, online_adapt, JointConfig, OnlineConfig, PilotSet};

fn main() -> poisonlink::Result<()> {
    let points: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let ch_cfg = ChannelConfig::new(ChannelKind::LinearTimeVarying, 14.0, 6);
    let ch = Channel::new(ch_cfg.clone())?;
    let dims = Dims { n_tx: 4, n_rx: 4 };

    let joint = JointConfig { symbols_per_snr: 1000, epochs: 10, ..JointConfig::default() };
    let surrogate = joint_train(&ch_cfg, &joint, 6)?.detector;

    let block = ch.generate_block(0, 200, points, &mut seeds::stream(6, "block", 0))?;
    let pilots = PilotSet::from_block(&block);
    let cfg = OnlineConfig { epochs: 40, ..OnlineConfig::default() };
    let mut init = seeds::stream(6, "init", 0);
    let mut targets = vec![
        Detector::new(DetectorKind::DeepSic, dims, &mut init),
        Detector::new(DetectorKind::BlackBoxMlp, dims, &mut init),
        Detector::residual(dims, 8, 10, &mut init),
    ];
    for t in &mut targets {
        online_adapt(t, &pilots, &cfg)?;
    }

    for t in &targets {
        let (mut gain, mut bound, mut cosine, mut n) = (0.0, 0.0, 0.0, 0);
        for i in 0..points {
            match transfer_diagnostic(&surrogate, t, block.info_rx.row(i), &block.info_labels[i], 0.3) {
                Ok(d) => {
                    gain += d.actual;
                    bound += d.bound;
                    cosine += d.cosine;
                    n += 1;
                }
                Err(_) => continue,
            }
        }
        println!(
            "{:>13}: mean gain {:+.4} of a white-box {:.4}, mean cosine {:+.3} over {n} points",
            t.kind().name(),
            gain / n as f64,
            bound / n as f64,
            cosine / n as f64
        );
    }
    Ok(())
}
