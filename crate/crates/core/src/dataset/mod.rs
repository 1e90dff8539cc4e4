//! Labelled clips: a seeded synthetic generator with known ground truth,
//! and loading of WAV files listed in a manifest.

mod manifest;
mod synth;

pub use manifest::{load_clip, load_manifest, write_dataset, DatasetManifest, ManifestEntry};
pub use synth::{
    default_classes, overlapping_classes, render_event, Archetype, SynthClass, SynthSpec,
};

use rayon::prelude::*;

use crate::features::{AudioClip, FeatureConfig, FeatureMatrix, MbeExtractor};
use crate::metrics::{EventList, LabelSet};
use crate::{Error, Result};

/// Ordered class names; a class's index is its position.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    labels: Vec<String>,
}

impl Vocabulary {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.contains([',', '\t', '\n']) {
                return Err(Error::invalid(format!("bad class name `{l}`")));
            }
            if labels[..i].contains(l) {
                return Err(Error::invalid(format!("class `{l}` listed twice")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Accepts a class name or a numeric index.
    pub fn resolve(&self, name_or_index: &str) -> Result<usize> {
        match name_or_index.parse::<usize>() {
            Ok(i) if i < self.len() => Ok(i),
            Ok(_) => Err(Error::UnknownLabel(name_or_index.to_string())),
            Err(_) => self.index(name_or_index),
        }
    }
}

/// Audio with its weak labels and, for evaluation splits, its events.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub name: String,
    pub clip: AudioClip,
    pub weak: LabelSet,
    pub strong: Option<EventList>,
}

/// A clip reduced to features, ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub name: String,
    pub features: FeatureMatrix,
    pub weak: LabelSet,
    /// Withheld from training; only read by evaluation.
    pub strong: Option<EventList>,
    pub duration_s: f64,
}

/// Extracts features for every clip in parallel, preserving order.
pub fn to_examples(clips: &[LabeledClip], cfg: &FeatureConfig) -> Result<Vec<Example>> {
    let Some(first) = clips.first() else {
        return Ok(Vec::new());
    };
    let sr = first.clip.sample_rate();
    if let Some(c) = clips.iter().find(|c| c.clip.sample_rate() != sr) {
        return Err(Error::Format(format!(
            "`{}` is sampled at {} Hz, expected {sr} Hz",
            c.name,
            c.clip.sample_rate()
        )));
    }
    let extractor = MbeExtractor::new(cfg, sr)?;
    clips
        .par_iter()
        .map(|c| {
            Ok(Example {
                name: c.name.clone(),
                features: extractor.extract(&c.clip)?,
                weak: c.weak.clone(),
                strong: c.strong.clone(),
                duration_s: c.clip.duration_s(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_lookup() {
        let v = Vocabulary::new(vec!["car".into(), "train".into()]).unwrap();
        assert_eq!(v.index("train").unwrap(), 1);
        assert!(matches!(v.index("bus"), Err(Error::UnknownLabel(_))));
        assert_eq!(v.resolve("0").unwrap(), 0);
        assert_eq!(v.resolve("car").unwrap(), 0);
        assert!(v.resolve("2").is_err());
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocabulary::new(vec!["a,b".into()]).is_err());
    }
}
