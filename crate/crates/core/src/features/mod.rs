//! Log mel-band energy features.
//!
//! Audio is framed with a Hamming window (tail zero-padded so that
//! `T = ceil(samples / hop)`), each frame's power spectrum is weighted by
//! triangular mel filters and the natural log of each band energy, floored
//! at `log_floor`, forms one row of the feature matrix.

mod matrix_file;
mod wav;

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub use matrix_file::{read_matrix, write_matrix, MATRIX_MAGIC};
pub use wav::{read_wav, write_wav};

use crate::autodiff::Array;
use crate::{Error, Result};

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("audio sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub overlap_fraction: f64,
    pub num_mel_bands: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// `None` picks the smallest power of two holding one window.
    pub fft_size: Option<usize>,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_ms: 40.0,
            overlap_fraction: 0.5,
            num_mel_bands: 40,
            fmin: 0.0,
            fmax: 22050.0,
            fft_size: None,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_ms > 0.0) {
            return Err(Error::invalid("window length must be positive"));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "overlap fraction must lie in (0, 1), got {}",
                self.overlap_fraction
            )));
        }
        if self.num_mel_bands == 0 {
            return Err(Error::invalid("at least one mel band is required"));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::invalid(format!(
                "need 0 <= fmin < fmax, got {} and {}",
                self.fmin, self.fmax
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::invalid("log floor must be positive"));
        }
        Ok(())
    }

    pub fn window_len(&self, sample_rate: u32) -> Result<usize> {
        let n = (self.window_ms * f64::from(sample_rate) / 1000.0).round() as usize;
        if n == 0 {
            return Err(Error::invalid("window is shorter than one sample"));
        }
        Ok(n)
    }

    pub fn hop_len(&self, sample_rate: u32) -> Result<usize> {
        let hop = (self.window_len(sample_rate)? as f64 * (1.0 - self.overlap_fraction)).round() as usize;
        Ok(hop.max(1))
    }

    pub fn fft_len(&self, sample_rate: u32) -> Result<usize> {
        let win = self.window_len(sample_rate)?;
        match self.fft_size {
            Some(n) if n < win => Err(Error::invalid(format!(
                "fft size {n} is shorter than the {win}-sample window"
            ))),
            Some(n) => Ok(n),
            None => Ok(win.next_power_of_two()),
        }
    }

    /// Number of frames for a clip of `num_samples` samples.
    pub fn num_frames(&self, num_samples: usize, sample_rate: u32) -> Result<usize> {
        Ok(num_samples.div_ceil(self.hop_len(sample_rate)?))
    }
}

/// `T × F` log mel-band energies, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    bands: usize,
    values: Vec<f64>,
    frame_hop_s: f64,
}

impl FeatureMatrix {
    pub fn new(frames: usize, bands: usize, values: Vec<f64>, frame_hop_s: f64) -> Result<Self> {
        if values.len() != frames * bands {
            return Err(Error::shape(format!(
                "{frames}×{bands} feature matrix given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature value".into()));
        }
        Ok(Self {
            frames,
            bands,
            values,
            frame_hop_s,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame_hop_s(&self) -> f64 {
        self.frame_hop_s
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.bands..(t + 1) * self.bands]
    }

    pub fn get(&self, t: usize, b: usize) -> f64 {
        self.values[t * self.bands + b]
    }

    /// `[1, T, F]` network input.
    pub fn to_batch(&self) -> Array {
        Array::from_vec(&[1, self.frames, self.bands], self.values.clone()).expect("consistent shape")
    }
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2πk/(n-1))`.
pub fn hamming_window(n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(Error::invalid("window length must be at least 1")),
        1 => Ok(vec![1.0]),
        _ => {
            let denom = (n - 1) as f64;
            Ok((0..n)
                .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / denom).cos())
                .collect())
        }
    }
}

/// Splits a clip into Hamming-windowed frames of one window length each,
/// zero-padding the tail so the last frame is complete.
pub fn frame_signal(clip: &AudioClip, cfg: &FeatureConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if clip.is_empty() {
        return Err(Error::invalid("cannot frame an empty clip"));
    }
    let sr = clip.sample_rate();
    let win = cfg.window_len(sr)?;
    let hop = cfg.hop_len(sr)?;
    let window = hamming_window(win)?;
    let frames = cfg.num_frames(clip.samples().len(), sr)?;
    let samples = clip.samples();
    Ok((0..frames)
        .map(|t| {
            let start = t * hop;
            (0..win)
                .map(|k| {
                    let s = samples.get(start + k).copied().unwrap_or(0.0);
                    f64::from(s) * window[k]
                })
                .collect()
        })
        .collect())
}

/// `|DFT(frame)|²` for bins `0..=fft_size/2`, zero-padding the frame.
pub fn power_spectrum(frame: &[f64], fft_size: usize) -> Result<Vec<f64>> {
    if fft_size == 0 || frame.len() > fft_size {
        return Err(Error::invalid(format!(
            "frame of {} samples does not fit fft size {fft_size}",
            frame.len()
        )));
    }
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    Ok(power_spectrum_with(&*fft, frame, &mut buf))
}

fn power_spectrum_with(fft: &dyn Fft<f64>, frame: &[f64], buf: &mut [Complex<f64>]) -> Vec<f64> {
    for (dst, i) in buf.iter_mut().zip(0..) {
        *dst = Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0);
    }
    fft.process(buf);
    buf[..buf.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peaks and edges equally spaced on the mel
/// scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `bands × (fft_size/2 + 1)`
    weights: Vec<Vec<f64>>,
    /// `bands + 2` edge frequencies; filter `b` spans `edges[b]..edges[b+2]`.
    edges_hz: Vec<f64>,
    bin_hz: f64,
}

impl MelFilterbank {
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn num_bands(&self) -> usize {
        self.weights.len()
    }

    pub fn num_bins(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.edges_hz[band + 1]
    }

    pub fn edges_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    /// Bins whose frequency lies in the closed span of filter `band`.
    pub fn support(&self, band: usize) -> Range<usize> {
        let lo = (self.edges_hz[band] / self.bin_hz).ceil() as usize;
        let hi = ((self.edges_hz[band + 2] / self.bin_hz).floor() as usize + 1).min(self.num_bins());
        lo.min(hi)..hi
    }

    /// Band energies for one power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

pub fn mel_filterbank(cfg: &FeatureConfig, sample_rate: u32) -> Result<MelFilterbank> {
    cfg.validate()?;
    let nyquist = f64::from(sample_rate) / 2.0;
    if cfg.fmax > nyquist {
        return Err(Error::invalid(format!(
            "fmax {} Hz exceeds the Nyquist frequency {nyquist} Hz",
            cfg.fmax
        )));
    }
    let fft_size = cfg.fft_len(sample_rate)?;
    let bins = fft_size / 2 + 1;
    let bin_hz = f64::from(sample_rate) / fft_size as f64;
    let bands = cfg.num_mel_bands;
    let (mel_lo, mel_hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges_hz: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (bands + 1) as f64))
        .collect();

    let weights = (0..bands)
        .map(|b| {
            let (left, center, right) = (edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]);
            let mut row: Vec<f64> = (0..bins)
                .map(|j| {
                    let f = j as f64 * bin_hz;
                    let rising = (f - left) / (center - left);
                    let falling = (right - f) / (right - center);
                    rising.min(falling).clamp(0.0, 1.0)
                })
                .collect();
            // A filter narrower than one bin would otherwise be empty.
            if row.iter().all(|&w| w == 0.0) {
                let nearest = ((center / bin_hz).round() as usize).min(bins - 1);
                row[nearest] = 1.0;
            }
            row
        })
        .collect();
    Ok(MelFilterbank {
        weights,
        edges_hz,
        bin_hz,
    })
}

/// Reusable extractor holding the window, filterbank and FFT plan for one
/// sample rate.
pub struct MbeExtractor {
    cfg: FeatureConfig,
    sample_rate: u32,
    filterbank: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
    fft_size: usize,
}

impl MbeExtractor {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        let filterbank = mel_filterbank(cfg, sample_rate)?;
        let fft_size = cfg.fft_len(sample_rate)?;
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            filterbank,
            fft: FftPlanner::new().plan_fft_forward(fft_size),
            fft_size,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::invalid(format!(
                "extractor built for {} Hz given a {} Hz clip",
                self.sample_rate,
                clip.sample_rate()
            )));
        }
        let frames = frame_signal(clip, &self.cfg)?;
        let bands = self.cfg.num_mel_bands;
        let mut values = Vec::with_capacity(frames.len() * bands);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for frame in &frames {
            let power = power_spectrum_with(&*self.fft, frame, &mut buf);
            values.extend(
                self.filterbank
                    .apply(&power)
                    .into_iter()
                    .map(|e| e.max(self.cfg.log_floor).ln()),
            );
        }
        let hop = self.cfg.hop_len(self.sample_rate)? as f64 / f64::from(self.sample_rate);
        FeatureMatrix::new(frames.len(), bands, values, hop)
    }
}

pub fn extract_mbe(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    MbeExtractor::new(cfg, clip.sample_rate())?.extract(clip)
}

/// Extracts features for many clips in parallel; results keep input order.
pub fn extract_many(clips: &[AudioClip], cfg: &FeatureConfig) -> Result<Vec<FeatureMatrix>> {
    clips.par_iter().map(|c| extract_mbe(c, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamming_known_values() {
        let w = hamming_window(5).unwrap();
        assert!((w[0] - 0.08).abs() < 1e-12);
        assert!((w[4] - 0.08).abs() < 1e-12);
        assert!((w[2] - 1.0).abs() < 1e-12);
        assert!((w[1] - 0.54).abs() < 1e-12);
        assert_eq!(hamming_window(1).unwrap(), vec![1.0]);
        assert!(hamming_window(0).is_err());
    }

    #[test]
    fn hamming_is_symmetric() {
        let w = hamming_window(1764).unwrap();
        for k in 0..1764 {
            assert!((w[k] - w[1763 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn default_framing_parameters() {
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.window_len(44100).unwrap(), 1764);
        assert_eq!(cfg.hop_len(44100).unwrap(), 882);
        assert_eq!(cfg.fft_len(44100).unwrap(), 2048);
    }

    #[test]
    fn frame_counts() {
        let cfg = FeatureConfig::default();
        let count = |n: usize| {
            frame_signal(&AudioClip::new(vec![0.0; n], 44100).unwrap(), &cfg)
                .unwrap()
                .len()
        };
        assert_eq!(count(441_000), 500);
        assert_eq!(count(882), 1);
        assert_eq!(count(441_001), 501);
        assert!(frame_signal(&AudioClip::new(vec![], 44100).unwrap(), &cfg).is_err());
    }

    #[test]
    fn frames_are_windowed_and_padded() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::new(vec![1.0; 1000], 44100).unwrap();
        let frames = frame_signal(&clip, &cfg).unwrap();
        let w = hamming_window(1764).unwrap();
        assert_eq!(frames.len(), 2);
        assert!((frames[0][10] - w[10]).abs() < 1e-12);
        // second frame starts at 882; samples beyond 1000 are padding
        assert!((frames[1][100] - w[100]).abs() < 1e-12);
        assert_eq!(frames[1][200], 0.0);
    }

    #[test]
    fn clip_validation() {
        assert!(AudioClip::new(vec![0.0], 0).is_err());
        assert!(AudioClip::new(vec![f32::NAN], 8000).is_err());
    }

    #[test]
    fn fmax_above_nyquist_is_rejected() {
        let cfg = FeatureConfig::default();
        assert!(matches!(mel_filterbank(&cfg, 16000), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn first_filter_starts_at_dc() {
        let cfg = FeatureConfig {
            fft_size: Some(2048),
            ..FeatureConfig::default()
        };
        let fb = mel_filterbank(&cfg, 44100).unwrap();
        assert_eq!(fb.support(0).start, 0);
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::new(vec![0.0; 44100], 44100).unwrap();
        let m = extract_mbe(&clip, &cfg).unwrap();
        assert!(m.values().iter().all(|&v| v == cfg.log_floor.ln()));
    }
}
