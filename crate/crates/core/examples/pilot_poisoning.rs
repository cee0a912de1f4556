//! Black-box pilot poisoning end to end: train a surrogate MLP offline,
//! craft PGD perturbations against it, and let a victim DeepSIC retrain on
//! clean and poisoned pilots from the same starting weights.
//!
//!     cargo run --release --example pilot_poisoning -- [poison.csv]

use poisonlink::attack::{inject, pgd_poison, AttackConfig};
use poisonlink::channel::{Channel, ChannelConfig, ChannelKind};
use poisonlink::harness::{degradation_db, ser};
use poisonlink::receivers::{Detector, DetectorKind, Dims};
use poisonlink::seeds;
use poisonlink::training::{joint_train, online_adapt, JointConfig, OnlineConfig, PilotSet};

fn main() -> poisonlink::Result<()> {
    let out = std::env::args().nth(1);
    let ch_cfg = ChannelConfig::new(ChannelKind::LinearTimeVarying, 14.0, 5);
    let ch = Channel::new(ch_cfg.clone())?;

    let joint = JointConfig { symbols_per_snr: 1000, epochs: 10, ..JointConfig::default() };
    let surrogate = joint_train(&ch_cfg, &joint, 5)?;
    println!(
        "surrogate trained on {} symbols, loss {:.3} -> {:.3}",
        surrogate.dataset_size,
        surrogate.epoch_losses[0],
        surrogate.epoch_losses.last().unwrap()
    );

    let block = ch.generate_block(0, 200, 5000, &mut seeds::stream(5, "block", 0))?;
    let attack = AttackConfig::default();
    let poison = pgd_poison(
        &surrogate.detector,
        &block.pilot_rx,
        &block.pilot_labels,
        &attack,
        &mut seeds::stream(5, "attack", 0),
    )?;
    println!(
        "PGD: surrogate loss {:.3} -> {:.3}, max |delta| {:.3}, clip [{:.3}, {:.3}]",
        poison.loss_trace[0],
        poison.loss_trace.last().unwrap(),
        poison.delta().max_abs(),
        poison.i_min,
        poison.i_max
    );
    if let Some(path) = out {
        poison.save_csv(0, path.as_ref())?;
        println!("poisoned pilots written to {path}");
    }
    let poisoned = inject(&block, &poison)?;

    let cfg = OnlineConfig { epochs: 100, ..OnlineConfig::default() };
    let start = Detector::new(DetectorKind::DeepSic, Dims { n_tx: 4, n_rx: 4 }, &mut seeds::stream(5, "init", 0));
    let mut rates = Vec::new();
    for (arm, b) in [("clean", &block), ("poisoned", &poisoned)] {
        let mut victim = start.clone();
        online_adapt(&mut victim, &PilotSet::from_block(b), &cfg)?;
        let s = ser(&victim.decode(&b.info_rx)?, &b.info_labels)?;
        println!("{arm:>8} pilots: SER {s:.4}");
        rates.push(s);
    }
    match degradation_db(rates[0], rates[1]) {
        Ok(db) => println!("degradation {db:+.2} dB"),
        Err(e) => println!("degradation undefined: {e}"),
    }
    Ok(())
}
