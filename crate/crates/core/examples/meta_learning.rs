//! Runs plain online training and online meta-learning side by side on the
//! same drifting channel. The meta learner keeps a window of past pilot
//! blocks and takes first-order MAML steps before each online phase.
//!
//!     cargo run --release --example meta_learning -- [blocks]

use poisonlink::channel::{Channel, ChannelConfig, ChannelKind};
use poisonlink::harness::{cumulative, ser};
use poisonlink::receivers::{Detector, DetectorKind, Dims};
use poisonlink::seeds;
use poisonlink::training::{meta_adapt, online_adapt, OnlineConfig, PilotBuffer, PilotSet};

fn main() -> poisonlink::Result<()> {
    let blocks = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let ch = Channel::new(ChannelConfig::new(ChannelKind::LinearTimeVarying, 12.0, 4))?;
    let dims = Dims { n_tx: 4, n_rx: 4 };
    let cfg = OnlineConfig { epochs: 30, meta_epochs: 10, ..OnlineConfig::default() };

    // same starting weights for both
    let mut online = Detector::new(DetectorKind::DeepSic, dims, &mut seeds::stream(4, "init", 0));
    let mut meta = online.clone();
    let mut buffer = PilotBuffer::new(cfg.meta_window);
    let (mut ser_online, mut ser_meta) = (Vec::new(), Vec::new());

    for b in 0..blocks {
        let block = ch.generate_block(b, 100, 2000, &mut seeds::stream(4, "block", b as u64))?;
        let pilots = PilotSet::from_block(&block);

        online_adapt(&mut online, &pilots, &cfg)?;
        let mut rng = seeds::stream(4, "meta", b as u64);
        let report = meta_adapt(&mut meta, &buffer, &pilots, &cfg, &mut rng)?;
        buffer.push(pilots);

        ser_online.push(ser(&online.decode(&block.info_rx)?, &block.info_labels)?);
        ser_meta.push(ser(&meta.decode(&block.info_rx)?, &block.info_labels)?);
        println!(
            "block {b:>2}: online {:.4}  meta {:.4}  ({} meta-epochs)",
            ser_online[b],
            ser_meta[b],
            report.meta_losses.len()
        );
    }
    println!(
        "cumulative SER: online {:.4}, meta {:.4}",
        cumulative(&ser_online).last().unwrap(),
        cumulative(&ser_meta).last().unwrap()
    );
    Ok(())
}
