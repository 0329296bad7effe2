//! Trains with and without unrelated images in the target group and tests
//! each model at several noise levels.
//!
//! cargo run --release --example noise_robustness -- [work_dir]

use std::path::PathBuf;

use groupcap::cli::{cmd_datagen, cmd_noise};
use groupcap::config::RunConfig;

fn main() -> groupcap::Result<()> {
    let work = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("groupcap-noise"));
    let mut config = RunConfig::default();
    config.apply_overrides(&["n_samples=600", "epochs=8"])?;
    cmd_datagen(&config, &work.join("data"))?;
    let grid = cmd_noise(&config, &work.join("data"), &work.join("ckpt"), &[0, 2], &[0, 1, 2, 3], &work.join("noise"))?;
    print!("{grid}");
    Ok(())
}
