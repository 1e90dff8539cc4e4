use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{LabeledClip, Vocabulary};
use crate::features::AudioClip;
use crate::metrics::{Event, EventList};
use crate::{Error, Result};

const FADE_S: f64 = 0.01;
// Partials summed to make band-limited noise.
const NOISE_PARTIALS: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Archetype {
    /// Pure tone at the centre frequency.
    Tone,
    /// Linear sweep across the band.
    Chirp,
    /// Random-phase partials spread over the band.
    Noise,
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Archetype::Tone => "tone",
            Archetype::Chirp => "chirp",
            Archetype::Noise => "noise",
        })
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tone" => Ok(Archetype::Tone),
            "chirp" => Ok(Archetype::Chirp),
            "noise" => Ok(Archetype::Noise),
            _ => Err(Error::invalid(format!("unknown archetype `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthClass {
    pub name: String,
    pub archetype: Archetype,
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    /// Event duration range in seconds.
    pub duration_s: (f64, f64),
    /// Peak amplitude range.
    pub amplitude: (f64, f64),
}

impl SynthClass {
    pub fn validate(&self, sample_rate: u32, clip_s: f64) -> Result<()> {
        let nyquist = f64::from(sample_rate) / 2.0;
        if !(self.center_hz > 0.0) || self.center_hz + self.bandwidth_hz / 2.0 >= nyquist {
            return Err(Error::Config(format!(
                "class `{}` reaches {} Hz, above the {nyquist} Hz Nyquist limit",
                self.name,
                self.center_hz + self.bandwidth_hz / 2.0
            )));
        }
        if self.bandwidth_hz < 0.0 || self.bandwidth_hz >= 2.0 * self.center_hz {
            return Err(Error::Config(format!("class `{}` has a bad bandwidth", self.name)));
        }
        let (lo, hi) = self.duration_s;
        if !(lo > 0.0 && lo <= hi && hi <= clip_s) {
            return Err(Error::Config(format!(
                "class `{}` duration range {lo}..{hi} s does not fit a {clip_s} s clip",
                self.name
            )));
        }
        let (alo, ahi) = self.amplitude;
        if !(alo >= 0.0 && alo <= ahi) {
            return Err(Error::Config(format!("class `{}` has a bad amplitude range", self.name)));
        }
        Ok(())
    }
}

fn classes_between(n: usize, lo_hz: f64, hi_hz: f64, archetypes: &[Archetype], bw: &dyn Fn(Archetype) -> f64) -> Vec<SynthClass> {
    (0..n)
        .map(|i| {
            let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let center_hz = (lo_hz * (hi_hz / lo_hz).powf(frac)).round();
            let archetype = archetypes[i % archetypes.len()];
            SynthClass {
                name: format!("{archetype}_{center_hz:.0}"),
                archetype,
                center_hz,
                bandwidth_hz: bw(archetype) * center_hz,
                duration_s: (0.5, 3.0),
                amplitude: (0.2, 0.45),
            }
        })
        .collect()
}

/// `n` classes with well separated spectra: centres log-spaced from
/// 400 Hz to 12 kHz, archetypes cycling tone, chirp, noise.
pub fn default_classes(n: usize) -> Vec<SynthClass> {
    let arch = [Archetype::Tone, Archetype::Chirp, Archetype::Noise];
    classes_between(n, 400.0, 12_000.0, &arch, &|a| match a {
        Archetype::Tone => 0.0,
        Archetype::Chirp => 0.5,
        Archetype::Noise => 0.3,
    })
}

/// A harder preset: wide noise bands crowded into 800 Hz to 1.6 kHz.
pub fn overlapping_classes(n: usize) -> Vec<SynthClass> {
    classes_between(n, 800.0, 1600.0, &[Archetype::Noise, Archetype::Chirp], &|_| 0.8)
}

/// Renders one event of `duration_s` seconds starting at `onset_s`
/// inside a clip of `clip_s` seconds, with raised-cosine fades of 10 ms.
/// Returns only the event's own samples.
pub fn render_event<R: Rng + ?Sized>(
    class: &SynthClass,
    onset_s: f64,
    duration_s: f64,
    amplitude: f64,
    clip_s: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if onset_s < 0.0 || !(duration_s > 0.0) || onset_s + duration_s > clip_s + 1e-9 {
        return Err(Error::invalid(format!(
            "event {onset_s}+{duration_s} s does not fit in a {clip_s} s clip"
        )));
    }
    let sr = f64::from(sample_rate);
    let n = (duration_s * sr).round() as usize;
    let lo = class.center_hz - class.bandwidth_hz / 2.0;
    let mut out: Vec<f64> = match class.archetype {
        Archetype::Tone => {
            let phase = rng.random_range(0.0..2.0 * PI);
            (0..n)
                .map(|i| (2.0 * PI * class.center_hz * i as f64 / sr + phase).sin())
                .collect()
        }
        Archetype::Chirp => {
            let rate = class.bandwidth_hz / duration_s;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (2.0 * PI * (lo * t + 0.5 * rate * t * t)).sin()
                })
                .collect()
        }
        Archetype::Noise => {
            let partials: Vec<(f64, f64)> = (0..NOISE_PARTIALS)
                .map(|_| {
                    let f = lo + rng.random::<f64>() * class.bandwidth_hz;
                    (2.0 * PI * f / sr, rng.random_range(0.0..2.0 * PI))
                })
                .collect();
            let mut wave: Vec<f64> = (0..n)
                .map(|i| partials.iter().map(|(w, p)| (w * i as f64 + p).sin()).sum::<f64>())
                .collect();
            // Unit peak, like the other archetypes.
            let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                wave.iter_mut().for_each(|v| *v /= peak);
            }
            wave
        }
    };
    let fade = ((FADE_S * sr).round() as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 * (1.0 - (PI * i as f64 / fade as f64).cos());
        out[i] *= g;
        out[n - 1 - i] *= g;
    }
    out.iter_mut().for_each(|v| *v *= amplitude);
    Ok(out)
}

/// Parameters of a synthetic dataset. Every clip is a pure function of
/// the generator settings and its index.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_clips: usize,
    pub classes: Vec<SynthClass>,
    pub clip_s: f64,
    pub sample_rate: u32,
    pub polyphony_max: usize,
    /// Background noise level relative to a mid-range event, in dB.
    pub noise_db: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_clips: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_clips,
            classes: default_classes(num_classes),
            clip_s: 10.0,
            sample_rate: 44_100,
            polyphony_max: 2,
            noise_db: -40.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.polyphony_max == 0 {
            return Err(Error::Config("polyphony_max must be at least 1".into()));
        }
        if !(self.clip_s > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("clip length and sample rate must be positive".into()));
        }
        for c in &self.classes {
            c.validate(self.sample_rate, self.clip_s)?;
        }
        self.vocabulary().map(|_| ())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.classes.iter().map(|c| c.name.clone()).collect())
    }

    pub fn clip_name(index: usize) -> String {
        format!("clip_{index:04}")
    }

    /// Renders clip `index`.
    pub fn clip(&self, index: usize) -> Result<LabeledClip> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let sr = f64::from(self.sample_rate);
        let len = (self.clip_s * sr).round() as usize;

        let mid_amp = self
            .classes
            .iter()
            .map(|c| 0.5 * (c.amplitude.0 + c.amplitude.1))
            .sum::<f64>()
            / self.classes.len() as f64;
        let noise_std = mid_amp / 2f64.sqrt() * 10f64.powf(self.noise_db / 20.0);
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut samples: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();

        let count = rng.random_range(1..=self.polyphony_max).min(self.classes.len());
        let picked = sample(&mut rng, self.classes.len(), count).into_vec();
        let mut events = Vec::with_capacity(count);
        for class_idx in picked {
            let class = &self.classes[class_idx];
            let (dlo, dhi) = class.duration_s;
            let duration = if dhi > dlo { rng.random_range(dlo..dhi) } else { dlo };
            let (alo, ahi) = class.amplitude;
            let amplitude = if ahi > alo { rng.random_range(alo..ahi) } else { alo };
            // Snap the onset to a sample so the annotation matches the audio.
            let latest = self.clip_s - duration;
            let onset = (rng.random_range(0.0..=latest) * sr).floor() / sr;
            let wave = render_event(class, onset, duration, amplitude, self.clip_s, self.sample_rate, &mut rng)?;
            let start = (onset * sr).round() as usize;
            for (dst, v) in samples[start..].iter_mut().zip(&wave) {
                *dst += v;
            }
            let offset = (start + wave.len()) as f64 / sr;
            events.push(Event::new(class_idx, onset, offset.min(self.clip_s))?);
        }
        events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class.cmp(&b.class)));
        let strong = EventList::new(events, self.classes.len())?;
        let clip = AudioClip::new(samples.iter().map(|&v| v as f32).collect(), self.sample_rate)?;
        Ok(LabeledClip {
            name: Self::clip_name(index),
            clip,
            weak: strong.classes(),
            strong: Some(strong),
        })
    }

    /// All clips, rendered in parallel.
    pub fn generate(&self) -> Result<Vec<LabeledClip>> {
        self.validate()?;
        (0..self.num_clips).into_par_iter().map(|i| self.clip(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_mbe, FeatureConfig};

    #[test]
    fn tone_peaks_in_its_mel_band() {
        let class = SynthClass {
            name: "t".into(),
            archetype: Archetype::Tone,
            center_hz: 1000.0,
            bandwidth_hz: 0.0,
            duration_s: (1.0, 1.0),
            amplitude: (0.5, 0.5),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let wave = render_event(&class, 0.0, 1.0, 0.5, 1.0, 44_100, &mut rng).unwrap();
        let clip = AudioClip::new(wave.iter().map(|&v| v as f32).collect(), 44_100).unwrap();
        let cfg = FeatureConfig::default();
        let feats = extract_mbe(&clip, &cfg).unwrap();
        let bank = crate::features::mel_filterbank(&cfg, 44_100).unwrap();
        let row = feats.row(feats.frames() / 2);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let edges = bank.edges_hz();
        assert!(edges[argmax] < 1000.0 && 1000.0 < edges[argmax + 2], "band {argmax}");
    }

    #[test]
    fn zero_amplitude_is_silent_and_placement_checked() {
        let class = &default_classes(3)[2];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = render_event(class, 1.0, 0.5, 0.0, 10.0, 8000, &mut rng).unwrap();
        assert_eq!(w.len(), 4000);
        assert!(w.iter().all(|&v| v == 0.0));
        assert!(render_event(class, 9.8, 0.5, 0.1, 10.0, 8000, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_waveform() {
        let class = &default_classes(3)[2];
        let a = render_event(class, 0.0, 0.3, 0.3, 1.0, 16000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = render_event(class, 0.0, 0.3, 0.3, 1.0, 16000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    fn small_spec(polyphony: usize) -> SynthSpec {
        SynthSpec {
            clip_s: 4.0,
            sample_rate: 16_000,
            polyphony_max: polyphony,
            classes: default_classes(4)
                .into_iter()
                .map(|c| SynthClass {
                    center_hz: c.center_hz.min(6000.0),
                    ..c
                })
                .collect(),
            ..SynthSpec::new(12, 4, 7)
        }
    }

    #[test]
    fn generation_is_reproducible_and_consistent() {
        let spec = small_spec(3);
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a, b);
        for c in &a {
            let strong = c.strong.as_ref().unwrap();
            assert_eq!(c.weak, strong.classes());
            assert!((1..=3).contains(&strong.len()));
            assert!(strong.events().iter().all(|e| e.offset <= 4.0));
        }
        assert_eq!(spec.clip(5).unwrap(), a[5]);
    }

    #[test]
    fn polyphony_one_never_overlaps() {
        for c in small_spec(1).generate().unwrap() {
            let ev = c.strong.unwrap();
            for (i, a) in ev.events().iter().enumerate() {
                for b in &ev.events()[i + 1..] {
                    assert!(!a.overlaps(b));
                }
            }
        }
    }

    #[test]
    fn class_above_nyquist_is_rejected() {
        let mut spec = small_spec(1);
        spec.classes[3].center_hz = 7900.0;
        spec.classes[3].bandwidth_hz = 1000.0;
        assert!(matches!(spec.generate(), Err(Error::Config(_))));
    }
}
