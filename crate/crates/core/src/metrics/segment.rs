use super::EventList;
use crate::{Error, Result};

// Slack for segment-boundary arithmetic on times like 50 · 0.02 s.
const TIME_EPS: f64 = 1e-9;

/// Number of segments covering `duration_s`; a trailing partial segment
/// counts as a whole one.
pub fn num_segments(duration_s: f64, segment_s: f64) -> Result<usize> {
    if !(segment_s > 0.0) {
        return Err(Error::invalid(format!("segment length must be positive, got {segment_s}")));
    }
    if !(duration_s >= 0.0) {
        return Err(Error::invalid(format!("duration must be non-negative, got {duration_s}")));
    }
    Ok((duration_s / segment_s - TIME_EPS).ceil().max(0.0) as usize)
}

/// `K × C` binary activity: `get(k, c)` is true when class `c` is active
/// anywhere in segment `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActivityGrid {
    segments: usize,
    classes: usize,
    active: Vec<bool>,
}

impl ActivityGrid {
    pub fn new(segments: usize, classes: usize) -> Self {
        Self {
            segments,
            classes,
            active: vec![false; segments * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::shape("activity rows have different lengths"));
        }
        Ok(Self {
            segments: rows.len(),
            classes,
            active: rows.concat(),
        })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, segment: usize, class: usize) -> bool {
        self.active[segment * self.classes + class]
    }

    pub fn set(&mut self, segment: usize, class: usize, value: bool) {
        self.active[segment * self.classes + class] = value;
    }

    pub fn row(&self, segment: usize) -> &[bool] {
        &self.active[segment * self.classes..(segment + 1) * self.classes]
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Rasterizes events onto segments: a class is active in segment `k` when
/// one of its events overlaps `[k·seg, (k+1)·seg)` by a positive amount.
/// Events reaching past `duration_s` are clipped.
pub fn segment_activity_from_events(
    events: &EventList,
    num_classes: usize,
    segment_s: f64,
    duration_s: f64,
) -> Result<ActivityGrid> {
    let k = num_segments(duration_s, segment_s)?;
    let mut grid = ActivityGrid::new(k, num_classes);
    for e in events.events() {
        if e.class >= num_classes {
            return Err(Error::invalid(format!("event class {} outside {num_classes}", e.class)));
        }
        let offset = e.offset.min(duration_s);
        if e.onset >= offset {
            continue;
        }
        let first = (e.onset / segment_s + TIME_EPS).floor() as usize;
        let last = ((offset / segment_s - TIME_EPS).ceil() as usize).min(k);
        for seg in first..last.max(first + 1).min(k) {
            grid.set(seg, e.class, true);
        }
    }
    Ok(grid)
}

/// Reduces frame-level activity (`frames × classes`, row-major) to
/// segments: a segment is active when any frame starting inside it is.
pub fn segment_activity_from_frames(
    frames: &[bool],
    num_classes: usize,
    frame_hop_s: f64,
    segment_s: f64,
    duration_s: f64,
) -> Result<ActivityGrid> {
    if num_classes == 0 || !frames.len().is_multiple_of(num_classes) {
        return Err(Error::shape(format!(
            "{} frame values do not split into {num_classes} classes",
            frames.len()
        )));
    }
    let k = num_segments(duration_s, segment_s)?;
    let mut grid = ActivityGrid::new(k, num_classes);
    if k == 0 {
        return Ok(grid);
    }
    for (t, row) in frames.chunks_exact(num_classes).enumerate() {
        let seg = ((t as f64 * frame_hop_s / segment_s + TIME_EPS).floor() as usize).min(k - 1);
        for (c, &on) in row.iter().enumerate() {
            if on {
                grid.set(seg, c, true);
            }
        }
    }
    Ok(grid)
}

/// Per-segment counts with substitutions, deletions and insertions derived
/// from the false negatives and false positives of that segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SegmentCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Active reference labels.
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub i: usize,
}

impl SegmentCounts {
    pub fn from_row(reference: &[bool], predicted: &[bool]) -> Self {
        let mut c = SegmentCounts::default();
        for (&r, &p) in reference.iter().zip(predicted) {
            match (r, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => {}
            }
            c.n += usize::from(r);
        }
        c.s = c.fn_.min(c.fp);
        c.d = c.fn_.saturating_sub(c.fp);
        c.i = c.fp.saturating_sub(c.fn_);
        c
    }
}

pub fn segment_counts(reference: &ActivityGrid, predicted: &ActivityGrid) -> Result<Vec<SegmentCounts>> {
    if reference.segments != predicted.segments || reference.classes != predicted.classes {
        return Err(Error::shape(format!(
            "reference is {}×{}, prediction is {}×{}",
            reference.segments, reference.classes, predicted.segments, predicted.classes
        )));
    }
    Ok((0..reference.segments)
        .map(|k| SegmentCounts::from_row(reference.row(k), predicted.row(k)))
        .collect())
}

/// Running sums of segment counts over any number of segments and clips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SegmentTotals {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub i: usize,
}

impl SegmentTotals {
    pub fn add(&mut self, c: &SegmentCounts) {
        self.tp += c.tp;
        self.fp += c.fp;
        self.fn_ += c.fn_;
        self.n += c.n;
        self.s += c.s;
        self.d += c.d;
        self.i += c.i;
    }

    pub fn add_grids(&mut self, reference: &ActivityGrid, predicted: &ActivityGrid) -> Result<()> {
        for c in segment_counts(reference, predicted)? {
            self.add(&c);
        }
        Ok(())
    }

    /// F-score in percent; zero when there is nothing to count.
    pub fn f(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            100.0 * (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn er(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::EmptyReference);
        }
        Ok((self.s + self.d + self.i) as f64 / self.n as f64)
    }
}

pub fn segment_f(reference: &ActivityGrid, predicted: &ActivityGrid) -> Result<f64> {
    let mut t = SegmentTotals::default();
    t.add_grids(reference, predicted)?;
    Ok(t.f())
}

pub fn segment_er(reference: &ActivityGrid, predicted: &ActivityGrid) -> Result<f64> {
    let mut t = SegmentTotals::default();
    t.add_grids(reference, predicted)?;
    t.er()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Event;

    fn events(v: &[(usize, f64, f64)]) -> EventList {
        EventList::new(
            v.iter().map(|&(c, a, b)| Event::new(c, a, b).unwrap()).collect(),
            4,
        )
        .unwrap()
    }

    #[test]
    fn segment_count_for_ten_seconds() {
        assert_eq!(num_segments(10.0, 1.0).unwrap(), 10);
        assert_eq!(num_segments(10.02, 1.0).unwrap(), 11);
        assert!(num_segments(10.0, 0.0).is_err());
    }

    #[test]
    fn short_event_marks_one_segment() {
        let g = segment_activity_from_events(&events(&[(0, 0.2, 0.3)]), 4, 1.0, 10.0).unwrap();
        assert_eq!(g.count_active(), 1);
        assert!(g.get(0, 0));
    }

    #[test]
    fn boundary_crossing_event() {
        let g = segment_activity_from_events(&events(&[(1, 0.9, 1.1)]), 4, 1.0, 10.0).unwrap();
        assert!(g.get(0, 1) && g.get(1, 1));
        assert_eq!(g.count_active(), 2);
    }

    #[test]
    fn event_ending_on_boundary_does_not_spill() {
        let g = segment_activity_from_events(&events(&[(2, 1.0, 2.0)]), 4, 1.0, 10.0).unwrap();
        assert_eq!(g.count_active(), 1);
        assert!(g.get(1, 2));
    }

    #[test]
    fn events_past_the_end_are_clipped() {
        let g = segment_activity_from_events(&events(&[(0, 8.5, 14.0)]), 4, 1.0, 10.0).unwrap();
        assert_eq!(g.count_active(), 2);
    }

    #[test]
    fn frames_reduce_by_any_active() {
        // 100 frames at 20 ms = 2 s; frame 49 is the last frame of segment 0
        let mut frames = vec![false; 100];
        frames[49] = true;
        let g = segment_activity_from_frames(&frames, 1, 0.02, 1.0, 2.0).unwrap();
        assert!(g.get(0, 0) && !g.get(1, 0));
        frames[49] = false;
        frames[50] = true;
        let g = segment_activity_from_frames(&frames, 1, 0.02, 1.0, 2.0).unwrap();
        assert!(!g.get(0, 0) && g.get(1, 0));
    }

    #[test]
    fn hand_counted_substitution() {
        // reference {A, B}, prediction {A, C}
        let r = ActivityGrid::from_rows(&[vec![true, true, false]]).unwrap();
        let p = ActivityGrid::from_rows(&[vec![true, false, true]]).unwrap();
        let c = segment_counts(&r, &p).unwrap()[0];
        assert_eq!((c.tp, c.fp, c.fn_, c.s, c.d, c.i, c.n), (1, 1, 1, 1, 0, 0, 2));
        assert_eq!(segment_f(&r, &p).unwrap(), 50.0);
        assert_eq!(segment_er(&r, &p).unwrap(), 0.5);
    }

    #[test]
    fn empty_prediction_is_all_deletions() {
        let r = ActivityGrid::from_rows(&[vec![true, true, true, false]]).unwrap();
        let p = ActivityGrid::new(1, 4);
        assert_eq!(segment_er(&r, &p).unwrap(), 1.0);
        assert_eq!(segment_f(&r, &p).unwrap(), 0.0);
    }

    #[test]
    fn identical_grids() {
        let r = ActivityGrid::from_rows(&[vec![true, false], vec![false, true]]).unwrap();
        assert_eq!(segment_er(&r, &r).unwrap(), 0.0);
        assert_eq!(segment_f(&r, &r).unwrap(), 100.0);
    }

    #[test]
    fn empty_reference_has_no_error_rate() {
        let r = ActivityGrid::new(3, 2);
        assert!(matches!(segment_er(&r, &r), Err(Error::EmptyReference)));
    }

    #[test]
    fn shape_mismatch() {
        assert!(segment_f(&ActivityGrid::new(2, 2), &ActivityGrid::new(3, 2)).is_err());
    }
}
