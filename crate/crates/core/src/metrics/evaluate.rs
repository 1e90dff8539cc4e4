use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;

use super::{
    segment_activity_from_events, segment_activity_from_frames, Event, EventList, LabelSet, Prf,
    SegmentTotals, StrongRecord, WeakCounts, WeakRecord,
};
use crate::autodiff::Array;
use crate::dataset::Example;
use crate::model::SedModel;
use crate::train::weak_from_strong;
use crate::{Error, Result};

/// Segment-based scores for the strong predictions of a split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongScores {
    pub er: f64,
    /// Percent.
    pub f: f64,
    pub totals: SegmentTotals,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitReport {
    pub clips: usize,
    pub weak: Prf,
    /// Absent when some clip lacks a strong reference.
    pub strong: Option<StrongScores>,
    pub notice: Option<String>,
}

impl SplitReport {
    /// Header matching [`SplitReport::csv_row`].
    pub const CSV_HEADER: &'static str = "weak_p,weak_r,weak_f,strong_er,strong_f";

    pub fn csv_row(&self) -> String {
        let (er, f) = match &self.strong {
            Some(s) => (format!("{:.6}", s.er), format!("{:.6}", s.f)),
            None => (String::new(), String::new()),
        };
        format!(
            "{:.6},{:.6},{:.6},{er},{f}",
            self.weak.precision, self.weak.recall, self.weak.f
        )
    }
}

/// Human-readable report: weak P, R, F then strong ER, F.
pub fn format_report(report: &SplitReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "clips: {}", report.clips);
    let _ = writeln!(
        out,
        "{:>8} {:>8} {:>8} | {:>9} {:>9}",
        "weak P", "weak R", "weak F", "strong ER", "strong F"
    );
    let (er, f) = match &report.strong {
        Some(s) => (format!("{:.2}", s.er), format!("{:.1}", s.f)),
        None => ("n/a".to_string(), "n/a".to_string()),
    };
    let _ = writeln!(
        out,
        "{:>8.1} {:>8.1} {:>8.1} | {er:>9} {f:>9}",
        report.weak.precision, report.weak.recall, report.weak.f
    );
    if let Some(n) = &report.notice {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

fn check_grid(grid: &Array, clip: &Example, classes: usize) -> Result<()> {
    if grid.shape() != [clip.features.frames(), classes] {
        return Err(Error::shape(format!(
            "prediction for `{}` is {:?}, expected [{}, {classes}]",
            clip.name,
            grid.shape(),
            clip.features.frames()
        )));
    }
    Ok(())
}

/// Scores per-clip `[T, C]` strong probability grids against the clips'
/// references. Weak predictions are derived from the strong grids.
pub fn evaluate_strong_grids(
    clips: &[Example],
    grids: &[Array],
    num_classes: usize,
    segment_s: f64,
    threshold: f64,
) -> Result<SplitReport> {
    if clips.len() != grids.len() {
        return Err(Error::shape(format!("{} grids for {} clips", grids.len(), clips.len())));
    }
    let mut weak = WeakCounts::default();
    let mut totals = SegmentTotals::default();
    let have_strong = clips.iter().all(|c| c.strong.is_some());
    for (clip, grid) in clips.iter().zip(grids) {
        check_grid(grid, clip, num_classes)?;
        weak.add_clip(&weak_from_strong(grid, threshold)?, &clip.weak);
        if let (true, Some(reference)) = (have_strong, &clip.strong) {
            let active: Vec<bool> = grid.data().iter().map(|&p| p >= threshold).collect();
            let pred = segment_activity_from_frames(
                &active,
                num_classes,
                clip.features.frame_hop_s(),
                segment_s,
                clip.duration_s,
            )?;
            let refg =
                segment_activity_from_events(reference, num_classes, segment_s, clip.duration_s)?;
            totals.add_grids(&refg, &pred)?;
        }
    }
    let (strong, notice) = if have_strong {
        let scores = StrongScores {
            er: totals.er()?,
            f: totals.f(),
            totals,
        };
        (Some(scores), None)
    } else {
        let msg = "strong references missing for some clips; strong metrics omitted".to_string();
        warn!("{msg}");
        (None, Some(msg))
    };
    Ok(SplitReport {
        clips: clips.len(),
        weak: weak.prf(),
        strong,
        notice,
    })
}

/// Runs `model` over every clip in inference mode and scores the result.
pub fn evaluate_split<M: SedModel + ?Sized>(
    model: &mut M,
    clips: &[Example],
    segment_s: f64,
    threshold: f64,
) -> Result<SplitReport> {
    let grids = clips
        .iter()
        .map(|c| model.predict(&c.features).map(|(strong, _)| strong))
        .collect::<Result<Vec<_>>>()?;
    evaluate_strong_grids(clips, &grids, model.num_classes(), segment_s, threshold)
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ClipLabels {
    weak: BTreeSet<String>,
    strong: Option<Vec<(String, f64, f64)>>,
}

/// Annotations for a set of files, as read from weak and/or strong files.
/// When only strong annotations are given, weak labels are the classes
/// that occur in them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    clips: BTreeMap<String, ClipLabels>,
    has_strong: bool,
}

impl AnnotationSet {
    pub fn new(strong: Option<&[StrongRecord]>, weak: Option<&[WeakRecord]>) -> Result<Self> {
        if strong.is_none() && weak.is_none() {
            return Err(Error::invalid("need weak or strong annotations"));
        }
        let mut clips: BTreeMap<String, ClipLabels> = BTreeMap::new();
        if let Some(records) = weak {
            for r in records {
                let entry = clips.entry(r.file.clone()).or_default();
                entry.weak.extend(r.labels.iter().cloned());
            }
        }
        if let Some(records) = strong {
            for r in records {
                let entry = clips.entry(r.file.clone()).or_default();
                entry
                    .strong
                    .get_or_insert_with(Vec::new)
                    .push((r.label.clone(), r.onset, r.offset));
                if weak.is_none() {
                    entry.weak.insert(r.label.clone());
                }
            }
            for c in clips.values_mut() {
                c.strong.get_or_insert_with(Vec::new);
            }
        }
        Ok(Self {
            clips,
            has_strong: strong.is_some(),
        })
    }

    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.clips.keys().map(String::as_str)
    }

    pub fn has_strong(&self) -> bool {
        self.has_strong
    }

    fn labels(&self) -> impl Iterator<Item = &String> {
        self.clips.values().flat_map(|c| {
            c.weak
                .iter()
                .chain(c.strong.iter().flatten().map(|(l, _, _)| l))
        })
    }
}

fn to_index(vocab: &[String], labels: &BTreeSet<String>) -> LabelSet {
    labels
        .iter()
        .map(|l| vocab.binary_search(l).expect("vocabulary covers all labels"))
        .collect()
}

fn to_events(vocab: &[String], events: &[(String, f64, f64)]) -> Result<EventList> {
    let list = events
        .iter()
        .map(|(l, on, off)| {
            Event::new(vocab.binary_search(l).expect("vocabulary covers all labels"), *on, *off)
        })
        .collect::<Result<Vec<_>>>()?;
    EventList::new(list, vocab.len())
}

/// Compares estimated annotations with references over the union of their
/// files. Every clip is taken to last `duration_s`; events beyond that are
/// clipped. Strong metrics need strong annotations on both sides.
pub fn evaluate_annotations(
    reference: &AnnotationSet,
    estimate: &AnnotationSet,
    segment_s: f64,
    duration_s: f64,
) -> Result<SplitReport> {
    let vocab: Vec<String> = reference
        .labels()
        .chain(estimate.labels())
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let files: BTreeSet<&str> = reference.files().chain(estimate.files()).collect();
    let empty = ClipLabels::default();
    let strong = reference.has_strong && estimate.has_strong;
    let mut weak = WeakCounts::default();
    let mut totals = SegmentTotals::default();
    for file in &files {
        let r = reference.clips.get(*file).unwrap_or(&empty);
        let e = estimate.clips.get(*file).unwrap_or(&empty);
        weak.add_clip(&to_index(&vocab, &e.weak), &to_index(&vocab, &r.weak));
        if strong {
            let none = Vec::new();
            let rev = to_events(&vocab, r.strong.as_ref().unwrap_or(&none))?;
            let est = to_events(&vocab, e.strong.as_ref().unwrap_or(&none))?;
            let c = vocab.len();
            totals.add_grids(
                &segment_activity_from_events(&rev, c, segment_s, duration_s)?,
                &segment_activity_from_events(&est, c, segment_s, duration_s)?,
            )?;
        }
    }
    let (strong, notice) = if strong {
        let scores = StrongScores {
            er: totals.er()?,
            f: totals.f(),
            totals,
        };
        (Some(scores), None)
    } else {
        (None, Some("strong annotations not given on both sides; strong metrics omitted".into()))
    };
    Ok(SplitReport {
        clips: files.len(),
        weak: weak.prf(),
        strong,
        notice,
    })
}
