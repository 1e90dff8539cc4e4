use super::{Event, EventList};
use crate::autodiff::Array;
use crate::{Error, Result};

/// Optional post-processing for frame-to-event decoding; all off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecodeOptions {
    /// Odd window length (frames) of a per-class median filter on the
    /// binarized activity; 0 or 1 disables it.
    pub median_frames: usize,
    /// Merge same-class events separated by at most this many seconds.
    pub fill_gaps_s: f64,
    /// Drop events shorter than this many seconds.
    pub min_duration_s: f64,
}

fn median_filter(active: &[bool], width: usize) -> Vec<bool> {
    let half = width / 2;
    let n = active.len();
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(n);
            // Frames outside the clip count as inactive.
            let on = active[lo..hi].iter().filter(|&&a| a).count();
            2 * on > width
        })
        .collect()
}

/// Turns a `[T, C]` probability grid into events: each maximal run of
/// frames at or above `threshold` becomes one event from the run's first
/// frame start to its last frame end.
pub fn decode_events(
    grid: &Array,
    threshold: f64,
    frame_hop_s: f64,
    opts: &DecodeOptions,
) -> Result<EventList> {
    if grid.rank() != 2 {
        return Err(Error::shape(format!("decode expects [T, C], got {:?}", grid.shape())));
    }
    if opts.median_frames > 1 && opts.median_frames.is_multiple_of(2) {
        return Err(Error::invalid("median filter width must be odd"));
    }
    let (t, c) = (grid.shape()[0], grid.shape()[1]);
    let mut events = Vec::new();
    for class in 0..c {
        let mut active: Vec<bool> = (0..t).map(|i| grid.data()[i * c + class] >= threshold).collect();
        if opts.median_frames > 1 {
            active = median_filter(&active, opts.median_frames);
        }
        let mut runs: Vec<(usize, usize)> = Vec::new();
        let mut start = None;
        for (i, &a) in active.iter().chain([&false]).enumerate() {
            match (a, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        let mut spans: Vec<(f64, f64)> = Vec::new();
        for (s, e) in runs {
            let (on, off) = (s as f64 * frame_hop_s, e as f64 * frame_hop_s);
            match spans.last_mut() {
                Some(last) if on - last.1 <= opts.fill_gaps_s && opts.fill_gaps_s > 0.0 => last.1 = off,
                _ => spans.push((on, off)),
            }
        }
        for (on, off) in spans {
            if off - on >= opts.min_duration_s {
                events.push(Event::new(class, on, off)?);
            }
        }
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class.cmp(&b.class)));
    EventList::new(events, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t: usize, c: usize, on: &[(usize, usize)]) -> Array {
        let mut g = Array::zeros(&[t, c]);
        for &(frame, class) in on {
            g.data_mut()[frame * c + class] = 0.8;
        }
        g
    }

    #[test]
    fn run_becomes_event() {
        let on: Vec<_> = (10..20).map(|f| (f, 0)).collect();
        let ev = decode_events(&grid(50, 2, &on), 0.5, 0.02, &DecodeOptions::default()).unwrap();
        assert_eq!(ev.len(), 1);
        let e = ev.events()[0];
        assert_eq!(e.class, 0);
        assert!((e.onset - 0.2).abs() < 1e-12 && (e.offset - 0.4).abs() < 1e-12);
    }

    #[test]
    fn below_threshold_is_empty() {
        let g = Array::filled(&[30, 3], 0.49);
        assert!(decode_events(&g, 0.5, 0.02, &DecodeOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn run_touching_the_end_is_closed() {
        let ev = decode_events(&grid(5, 1, &[(3, 0), (4, 0)]), 0.5, 1.0, &DecodeOptions::default()).unwrap();
        assert_eq!((ev.events()[0].onset, ev.events()[0].offset), (3.0, 5.0));
    }

    #[test]
    fn post_processing_options() {
        // Frames 0-4 and 6-9 active with a one-frame hole, plus an isolated frame 15.
        let on: Vec<_> = (0..5).chain(6..10).chain([15]).map(|f| (f, 0)).collect();
        let g = grid(20, 1, &on);
        let plain = decode_events(&g, 0.5, 0.1, &DecodeOptions::default()).unwrap();
        assert_eq!(plain.len(), 3);
        let median = DecodeOptions { median_frames: 3, ..Default::default() };
        assert_eq!(decode_events(&g, 0.5, 0.1, &median).unwrap().len(), 1);
        let gaps = DecodeOptions { fill_gaps_s: 0.15, ..Default::default() };
        assert_eq!(decode_events(&g, 0.5, 0.1, &gaps).unwrap().len(), 2);
        let min = DecodeOptions { min_duration_s: 0.2, ..Default::default() };
        assert_eq!(decode_events(&g, 0.5, 0.1, &min).unwrap().len(), 2);
        let even = DecodeOptions { median_frames: 4, ..Default::default() };
        assert!(decode_events(&g, 0.5, 0.1, &even).is_err());
    }
}
