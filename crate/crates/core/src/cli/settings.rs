use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::Vocabulary;
use crate::features::FeatureConfig;
use crate::kv::{parse_list, KeyValues};
use crate::{Error, Result};

/// Values from the optional `--config` file, consulted for any flag that
/// was not given on the command line.
pub struct Settings {
    file: KeyValues,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::new(),
        };
        Ok(Self { file })
    }

    pub fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file.parse_opt(key),
        }
    }

    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn path(&self, flag: Option<&PathBuf>, key: &str) -> Result<PathBuf> {
        match flag {
            Some(p) => Ok(p.clone()),
            None => self
                .file
                .get(key)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("`--{}` is required", key.replace('_', "-")))),
        }
    }

    pub fn list<T: FromStr>(&self, flag: Option<&String>, key: &str) -> Result<Option<Vec<T>>> {
        let text = match flag {
            Some(t) => t.clone(),
            None => match self.file.get(key) {
                Some(t) => t.to_string(),
                None => return Ok(None),
            },
        };
        parse_list(&text)
            .map(Some)
            .map_err(|_| Error::Config(format!("bad list for `{key}`: `{text}`")))
    }
}

/// Rejects values that a flag parser would have refused.
pub fn require(ok: bool, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

pub fn features_to_kv(cfg: &FeatureConfig, sample_rate: u32, kv: &mut KeyValues) {
    kv.set("feature.window_ms", cfg.window_ms);
    kv.set("feature.overlap", cfg.overlap_fraction);
    kv.set("feature.mel_bands", cfg.num_mel_bands);
    kv.set("feature.fmin", cfg.fmin);
    kv.set("feature.fmax", cfg.fmax);
    if let Some(n) = cfg.fft_size {
        kv.set("feature.fft_size", n);
    }
    kv.set("feature.log_floor", cfg.log_floor);
    kv.set("feature.sample_rate", sample_rate);
}

pub fn features_from_kv(kv: &KeyValues) -> Result<(FeatureConfig, u32)> {
    let cfg = FeatureConfig {
        window_ms: kv.parse_req("feature.window_ms")?,
        overlap_fraction: kv.parse_req("feature.overlap")?,
        num_mel_bands: kv.parse_req("feature.mel_bands")?,
        fmin: kv.parse_req("feature.fmin")?,
        fmax: kv.parse_req("feature.fmax")?,
        fft_size: kv.parse_opt("feature.fft_size")?,
        log_floor: kv.parse_req("feature.log_floor")?,
    };
    cfg.validate()?;
    Ok((cfg, kv.parse_req("feature.sample_rate")?))
}

pub fn vocabulary_from_kv(kv: &KeyValues) -> Result<Vocabulary> {
    let labels = kv
        .require("vocabulary")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    Vocabulary::new(labels)
}
