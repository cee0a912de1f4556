//! A miniature poisoning experiment through the harness: every receiver
//! runs a clean and a poisoned arm over a few blocks, and the results are
//! persisted and read back.
//!
//!     cargo run --release --example small_experiment -- [results.csv]

use poisonlink::attack::AttackConfig;
use poisonlink::channel::{ChannelConfig, ChannelKind};
use poisonlink::harness::{self, ExperimentConfig, ReceiverKind};
use poisonlink::training::{JointConfig, OnlineConfig};

fn main() -> poisonlink::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("small_experiment.csv"));
    let cfg = ExperimentConfig {
        name: "small".into(),
        channel: ChannelConfig::new(ChannelKind::LinearTimeVarying, 14.0, 0),
        receivers: ReceiverKind::ALL.to_vec(),
        blocks: 5,
        reps: 1,
        l_pilot: 200,
        l_info: 1000,
        seed: 9,
        resnet_channels: 8,
        online: OnlineConfig { epochs: 20, ..OnlineConfig::default() },
        joint: JointConfig { symbols_per_snr: 500, epochs: 5, ..JointConfig::default() },
        attack: Some(AttackConfig { iters: 50, ..AttackConfig::default() }),
    };
    let run = harness::run_experiment(&cfg)?;
    for rec in run.averaged() {
        println!(
            "{:>16} {:>8}: cumulative SER {:.4}",
            rec.receiver.label(),
            if rec.poisoned { "poisoned" } else { "clean" },
            rec.final_ser()
        );
    }
    for kind in ReceiverKind::ALL {
        match run.degradation_db(kind) {
            Ok(db) => println!("{:>16}: {db:+.2} dB", kind.label()),
            Err(e) => println!("{:>16}: {e}", kind.label()),
        }
    }
    harness::persist(&run, &path)?;
    let back = harness::load(&path)?;
    println!("persisted {} records to {} (reload matches: {})", back.records.len(), path.display(), back == run);
    Ok(())
}
