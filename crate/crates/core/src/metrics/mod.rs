//! Weak-label precision / recall / F-score and segment-based F-score and
//! error rate.
//!
//! Both metric families are micro-averaged: counts are summed over all
//! clips, classes and segments before any ratio is taken.

mod annotations;
mod decode;
mod evaluate;
mod segment;
mod weak;

pub use annotations::{
    read_strong_annotations, read_weak_annotations, write_strong_annotations,
    write_weak_annotations, StrongRecord, WeakRecord,
};
pub use decode::{decode_events, DecodeOptions};
pub use evaluate::{
    evaluate_annotations, evaluate_split, evaluate_strong_grids, format_report, AnnotationSet, SplitReport,
    StrongScores,
};
pub use segment::{
    num_segments, segment_activity_from_events, segment_activity_from_frames, segment_counts,
    segment_er, segment_f, ActivityGrid, SegmentCounts, SegmentTotals,
};
pub use weak::{harmonic_f, weak_prf, Prf, WeakCounts};

use std::collections::BTreeSet;

use crate::{Error, Result};

/// Class indices active in a clip.
pub type LabelSet = BTreeSet<usize>;

/// A single annotated (or decoded) sound event.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub class: usize,
    pub onset: f64,
    pub offset: f64,
}

impl Event {
    pub fn new(class: usize, onset: f64, offset: f64) -> Result<Self> {
        if !(onset.is_finite() && offset.is_finite()) || onset < 0.0 || onset >= offset {
            return Err(Error::invalid(format!(
                "event needs 0 <= onset < offset, got {onset}..{offset}"
            )));
        }
        Ok(Self {
            class,
            onset,
            offset,
        })
    }

    pub fn overlaps(&self, other: &Event) -> bool {
        self.onset < other.offset && other.onset < self.offset
    }
}

/// Events of one clip.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventList {
    events: Vec<Event>,
}

impl EventList {
    pub fn new(events: Vec<Event>, num_classes: usize) -> Result<Self> {
        if let Some(e) = events.iter().find(|e| e.class >= num_classes) {
            return Err(Error::invalid(format!(
                "event class {} outside {num_classes} classes",
                e.class
            )));
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Set of classes that occur at least once.
    pub fn classes(&self) -> LabelSet {
        self.events.iter().map(|e| e.class).collect()
    }
}
