//! Settings for `train` and `eval`: a flat config file, optionally
//! overridden from the command line.

use std::path::{Path, PathBuf};

use dualskip_core::{ArchSpec, Error, FlatConfig, Result, TrainConfig};

const RUN_KEYS: &[&str] = &[
    "data",
    "val_data",
    "out_dir",
    "tile_size",
    "train_fraction",
    "mask_positive",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub raw: FlatConfig,
    pub arch: Option<ArchSpec>,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub tile_size: usize,
    pub train_fraction: f64,
    pub mask_positive: u8,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut raw = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                FlatConfig::parse(&text)?
            }
            None => FlatConfig::new(),
        };
        for (k, v) in overrides {
            raw.set(k.clone(), v.clone());
        }
        let known: Vec<&str> = RUN_KEYS
            .iter()
            .chain(ArchSpec::CONFIG_KEYS)
            .chain(TrainConfig::CONFIG_KEYS)
            .copied()
            .collect();
        raw.reject_unknown(&known)?;
        let arch = match raw.get("family") {
            Some(_) => Some(ArchSpec::from_config(&raw)?),
            None => None,
        };
        let train_fraction = raw.get_parsed("train_fraction")?.unwrap_or(0.7);
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!("train_fraction {train_fraction} outside [0, 1]")));
        }
        let tile_size = raw.get_parsed("tile_size")?.unwrap_or(256);
        if tile_size == 0 {
            return Err(Error::Config("tile_size must be positive".into()));
        }
        Ok(RunConfig {
            train: TrainConfig::from_config(&raw)?,
            data: raw.get("data").map(PathBuf::from),
            val_data: raw.get("val_data").map(PathBuf::from),
            out_dir: raw.get("out_dir").map_or_else(|| PathBuf::from("run"), PathBuf::from),
            tile_size,
            train_fraction,
            mask_positive: raw.get_parsed("mask_positive")?.unwrap_or(255),
            arch,
            raw,
        })
    }
}
