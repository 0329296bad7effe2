//! Small target/reference count ablation through the command layer: writes
//! a corpus, retrains per cell and prints the WordAcc grid.
//!
//! cargo run --release --example ablation -- [work_dir]

use std::path::PathBuf;

use groupcap::cli::{cmd_ablate, cmd_datagen};
use groupcap::config::RunConfig;

fn main() -> groupcap::Result<()> {
    let work = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("groupcap-ablation"));
    let mut config = RunConfig::default();
    config.apply_overrides(&["n_samples=600", "epochs=8"])?;
    cmd_datagen(&config, &work.join("data"))?;
    let cells = [(5, 0), (1, 15), (5, 15)];
    let table = cmd_ablate(&config, &work.join("data"), &work.join("ckpt"), &cells, &work.join("ablation"))?;
    print!("{table}");
    Ok(())
}
