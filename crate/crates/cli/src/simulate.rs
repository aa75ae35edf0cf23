//! The `simulate` command: episodes straight to CSV.

use std::path::Path;

use zia_core::rng;
use zia_core::signals::{gen_episode, write_episode_csv, ScenarioConfig};

use crate::error::Result;
use crate::report::write_atomically;

/// File name of episode `i`.
pub fn episode_file(i: usize) -> String {
    format!("episode_{i:03}.csv")
}

/// Writes `count` episodes of `scenario` to `dir`, episode `i` seeded from
/// the `simulation` stream at index `i`.
pub fn simulate(scenario: &ScenarioConfig, count: usize, seed: u64, dir: &Path) -> Result<()> {
    scenario.validate()?;
    write_atomically(dir, |stage| {
        for i in 0..count {
            let sc = ScenarioConfig {
                seed: rng::derive_indexed(seed, "simulation", i as u64),
                ..scenario.clone()
            };
            let trace = gen_episode::<f64>(&sc)?;
            let file = std::fs::File::create(stage.join(episode_file(i)))?;
            write_episode_csv(&trace, std::io::BufWriter::new(file))?;
        }
        Ok(())
    })
}
