//! Tracks a drifting linear channel with DeepSIC, retraining on each
//! block's pilots and decoding the information symbols that follow.
//!
//!     cargo run --release --example online_training -- [blocks] [epochs]

use poisonlink::channel::{Channel, ChannelConfig, ChannelKind};
use poisonlink::harness::ser;
use poisonlink::receivers::{Detector, DetectorKind, Dims};
use poisonlink::seeds;
use poisonlink::training::{online_adapt, OnlineConfig, PilotSet};

fn main() -> poisonlink::Result<()> {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().ok());
    let blocks = args.next().flatten().unwrap_or(10);
    let epochs = args.next().flatten().unwrap_or(50);

    let ch = Channel::new(ChannelConfig::new(ChannelKind::LinearTimeVarying, 12.0, 3))?;
    let mut init = seeds::stream(3, "init", 0);
    let mut detector = Detector::new(DetectorKind::DeepSic, Dims { n_tx: 4, n_rx: 4 }, &mut init);
    let cfg = OnlineConfig { epochs, ..OnlineConfig::default() };
    println!("DeepSIC with {} parameters, {epochs} epochs per block", detector.parameter_count());

    for b in 0..blocks {
        let mut rng = seeds::stream(3, "block", b as u64);
        let block = ch.generate_block(b, 200, 2000, &mut rng)?;
        let report = online_adapt(&mut detector, &PilotSet::from_block(&block), &cfg)?;
        let decisions = detector.decode(&block.info_rx)?;
        println!(
            "block {b:>2}: pilot loss {:.4} -> {:.4}, SER {:.4}",
            report.losses[0],
            report.losses.last().unwrap(),
            ser(&decisions, &block.info_labels)?
        );
    }
    Ok(())
}
