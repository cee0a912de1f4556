//! Writes a drifting 4x4 tap table to CSV, reads it back and pushes a block
//! through it.
//!
//!     cargo run --example tap_file_channel -- [out.csv] [blocks]

use std::path::PathBuf;

use poisonlink::channel::{self, Channel, ChannelConfig, ChannelKind};
use poisonlink::seeds;

fn main() -> poisonlink::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("drifting_taps.csv"));
    let blocks: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);

    let table = channel::drifting_taps(4, 4, blocks, 2100);
    channel::write_tap_file(&out, &table)?;
    println!("wrote {} blocks of taps to {}", table.blocks(), out.display());

    let mut cfg = ChannelConfig::new(ChannelKind::TapFile, 14.0, 0);
    cfg.tap_file = Some(out);
    let ch = Channel::new(cfg)?;
    for b in [0, blocks / 2, blocks - 1] {
        let h = ch.taps_at(b)?;
        println!("block {b:>3}: |h00| = {:.3}, |h01| = {:.3}", h.h(0, 0).norm(), h.h(0, 1).norm());
    }
    let mut rng = seeds::stream(7, "example", 0);
    let block = ch.generate_block(0, 200, 1000, &mut rng)?;
    println!("block 0: {} pilots, {} information symbols", block.l_pilot(), block.l_info());
    Ok(())
}
