use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;
use tririg::camera::CameraSet;
use tririg::operator::NoiseStd;
use tririg::sim::TaskId;

use crate::CliError;

/// Values a `--config` JSON file may supply. Flags given on the command line
/// win over the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<String>,
    pub episodes: Option<usize>,
    pub seeds: Option<String>,
    pub cameras: Option<String>,
    pub noise_std: Option<f64>,
    pub out: Option<PathBuf>,
    pub port: Option<u16>,
    pub host: Option<String>,
    pub rollouts: Option<usize>,
    pub chunk_size: Option<usize>,
    pub query_period: Option<usize>,
    pub decay: Option<f64>,
    pub policy: Option<String>,
    pub probe: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::User(format!("config {}: {e}", path.display())))
    }
}

pub fn pick<T>(flag: Option<T>, config: Option<T>) -> Option<T> {
    flag.or(config)
}

pub fn parse_task(s: &str) -> Result<TaskId, CliError> {
    TaskId::from_str(s).map_err(CliError::User)
}

pub fn parse_cameras(s: &str) -> Result<CameraSet, CliError> {
    CameraSet::from_str(s).map_err(|e| CliError::User(format!("--cameras: {e}")))
}

/// `7`, `3,5,9` or a half-open range `0..50`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::User(format!("--seeds: cannot parse '{s}' (use 7, 1,2,3 or 0..50)"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|t| t.trim().parse::<u64>().map_err(|_| bad())).collect()
}

/// `--episodes` and `--seeds` together must agree on the count.
pub fn resolve_seeds(episodes: Option<usize>, seeds: Option<&str>) -> Result<Vec<u64>, CliError> {
    match (episodes, seeds) {
        (None, None) => Err(CliError::User("give --episodes or --seeds".into())),
        (Some(n), None) => Ok((0..n as u64).collect()),
        (n, Some(s)) => {
            let seeds = parse_seeds(s)?;
            if let Some(n) = n {
                if n != seeds.len() {
                    return Err(CliError::User(format!("--episodes {n} but --seeds lists {}", seeds.len())));
                }
            }
            let mut sorted = seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != seeds.len() {
                return Err(CliError::User("--seeds repeats a seed".into()));
            }
            Ok(seeds)
        }
    }
}

/// `--noise-std` sets the translation std in meters; rotation noise is
/// scaled in the default 1 m : 2 rad proportion.
pub fn noise(std: Option<f64>) -> Result<NoiseStd, CliError> {
    match std {
        None => Ok(NoiseStd::default()),
        Some(s) if s.is_finite() && s >= 0.0 => {
            let d = NoiseStd::default();
            Ok(NoiseStd {
                meters: s,
                radians: s * d.radians / d.meters,
            })
        }
        Some(s) => Err(CliError::User(format!("--noise-std must be a non-negative number, got {s}"))),
    }
}
