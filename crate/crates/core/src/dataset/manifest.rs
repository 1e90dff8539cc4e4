//! Manifest files tie a split's audio to its annotation files:
//!
//! ```text
//! #wsed-manifest 1
//! split<TAB>train
//! vocabulary<TAB>car,train,dog
//! weak<TAB>weak.tsv
//! strong<TAB>strong.tsv        (optional)
//! ```
//!
//! Paths are relative to the manifest's directory; the file names in the
//! annotation files are relative to it as well.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{LabeledClip, Vocabulary};
use crate::features::{read_wav, write_wav};
use crate::metrics::{
    read_strong_annotations, read_weak_annotations, write_strong_annotations,
    write_weak_annotations, Event, EventList, LabelSet, StrongRecord, WeakRecord,
};
use crate::{Error, Result};

const HEADER: &str = "#wsed-manifest 1";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Audio path relative to the manifest directory.
    pub file: String,
    pub weak: LabelSet,
    pub strong: Option<EventList>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub root: PathBuf,
    pub vocabulary: Vocabulary,
    pub entries: Vec<ManifestEntry>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        _ => return Err(parse_err(path, 1, format!("expected `{HEADER}`"))),
    }
    let mut fields = BTreeMap::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('\t') else {
            return Err(parse_err(path, i + 1, "expected `key<TAB>value`"));
        };
        if fields.insert(key.to_string(), value.to_string()).is_some() {
            return Err(parse_err(path, i + 1, format!("duplicate key `{key}`")));
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| parse_err(path, 0, format!("missing `{k}` line")))
    };
    let split = get("split")?.clone();
    let vocabulary = Vocabulary::new(
        get("vocabulary")?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
    )?;
    let weak = read_weak_annotations(&root.join(get("weak")?))?;
    let strong = fields
        .get("strong")
        .map(|p| read_strong_annotations(&root.join(p)))
        .transpose()?;

    let mut entries = Vec::with_capacity(weak.len());
    let mut index = BTreeMap::new();
    for rec in &weak {
        if index.insert(rec.file.clone(), entries.len()).is_some() {
            return Err(Error::Format(format!("`{}` is listed twice", rec.file)));
        }
        let labels = rec
            .labels
            .iter()
            .map(|l| vocabulary.index(l))
            .collect::<Result<LabelSet>>()?;
        entries.push(ManifestEntry {
            file: rec.file.clone(),
            weak: labels,
            strong: None,
        });
    }
    if let Some(records) = strong {
        let mut events: Vec<Vec<Event>> = vec![Vec::new(); entries.len()];
        for r in records {
            let &i = index.get(&r.file).ok_or_else(|| {
                Error::Format(format!("strong annotation for unlisted file `{}`", r.file))
            })?;
            events[i].push(Event::new(vocabulary.index(&r.label)?, r.onset, r.offset)?);
        }
        for (entry, ev) in entries.iter_mut().zip(events) {
            let list = EventList::new(ev, vocabulary.len())?;
            if list.classes() != entry.weak {
                return Err(Error::Format(format!(
                    "`{}`: weak labels disagree with its strong annotations",
                    entry.file
                )));
            }
            entry.strong = Some(list);
        }
    }
    Ok(DatasetManifest {
        split,
        root,
        vocabulary,
        entries,
    })
}

/// Reads the audio of one manifest entry.
pub fn load_clip(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<LabeledClip> {
    let clip = read_wav(&manifest.root.join(&entry.file))?;
    Ok(LabeledClip {
        name: entry.file.clone(),
        clip,
        weak: entry.weak.clone(),
        strong: entry.strong.clone(),
    })
}

impl DatasetManifest {
    /// Loads every clip in manifest order.
    pub fn load_all(&self) -> Result<Vec<LabeledClip>> {
        use rayon::prelude::*;
        self.entries.par_iter().map(|e| load_clip(self, e)).collect()
    }
}

/// Writes `clips` under `dir` as `audio/<name>.wav`, `weak.tsv`,
/// `strong.tsv` (when every clip has events) and `manifest.tsv`.
/// Returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    split: &str,
    vocabulary: &Vocabulary,
    clips: &[LabeledClip],
) -> Result<PathBuf> {
    let names: BTreeSet<&str> = clips.iter().map(|c| c.name.as_str()).collect();
    if names.len() != clips.len() {
        return Err(Error::invalid("clip names must be unique"));
    }
    fs::create_dir_all(dir.join("audio"))?;
    let mut weak = Vec::with_capacity(clips.len());
    let mut strong = Vec::new();
    let with_strong = clips.iter().all(|c| c.strong.is_some());
    for c in clips {
        let file = format!("audio/{}.wav", c.name);
        write_wav(&dir.join(&file), &c.clip)?;
        weak.push(WeakRecord {
            file: file.clone(),
            labels: c.weak.iter().map(|&i| vocabulary.name(i).to_string()).collect(),
        });
        if let (true, Some(ev)) = (with_strong, &c.strong) {
            for e in ev.events() {
                strong.push(StrongRecord {
                    file: file.clone(),
                    onset: e.onset,
                    offset: e.offset,
                    label: vocabulary.name(e.class).to_string(),
                });
            }
        }
    }
    let mut w = BufWriter::new(fs::File::create(dir.join("weak.tsv"))?);
    write_weak_annotations(&mut w, &weak)?;
    w.flush()?;
    let mut manifest = format!(
        "{HEADER}\nsplit\t{split}\nvocabulary\t{}\nweak\tweak.tsv\n",
        vocabulary.labels().join(",")
    );
    if with_strong {
        let mut w = BufWriter::new(fs::File::create(dir.join("strong.tsv"))?);
        write_strong_annotations(&mut w, &strong)?;
        w.flush()?;
        manifest.push_str("strong\tstrong.tsv\n");
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SynthSpec;

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            clip_s: 2.0,
            sample_rate: 16_000,
            classes: crate::dataset::default_classes(3)
                .into_iter()
                .map(|mut c| {
                    c.center_hz = c.center_hz.min(5000.0);
                    c.duration_s = (0.3, 1.0);
                    c
                })
                .collect(),
            ..SynthSpec::new(5, 3, 11)
        };
        let clips = spec.generate().unwrap();
        let vocab = spec.vocabulary().unwrap();
        let path = write_dataset(dir.path(), "train", &vocab, &clips).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.split, "train");
        assert_eq!(m.vocabulary, vocab);
        let loaded = m.load_all().unwrap();
        for (a, b) in clips.iter().zip(&loaded) {
            assert_eq!(a.weak, b.weak);
            assert_eq!(b.name, format!("audio/{}.wav", a.name));
            for (x, y) in a.clip.samples().iter().zip(b.clip.samples()) {
                assert!((x - y).abs() <= 0.5 / 32768.0 + 1e-7);
            }
            let (ea, eb) = (a.strong.as_ref().unwrap(), b.strong.as_ref().unwrap());
            for (x, y) in ea.events().iter().zip(eb.events()) {
                assert_eq!(x.class, y.class);
                assert!((x.onset - y.onset).abs() <= 5e-4);
            }
        }
    }

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    #[test]
    fn unknown_label_and_bad_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write(d, "m.tsv", "#wsed-manifest 1\nsplit\tx\nvocabulary\tcar,train\nweak\tw.tsv\n");
        write(d, "w.tsv", "a.wav\tcar,train\nb.wav\tbus\n");
        assert!(matches!(load_manifest(&d.join("m.tsv")), Err(Error::UnknownLabel(l)) if l == "bus"));

        write(d, "w.tsv", "a.wav\tcar,train\n");
        let m = load_manifest(&d.join("m.tsv")).unwrap();
        assert_eq!(m.entries[0].weak, LabelSet::from([0, 1]));

        write(d, "m.tsv", "#wsed-manifest 1\nsplit\tx\nvocabulary\tcar\nweak\tw.tsv\nstrong\ts.tsv\n");
        write(d, "w.tsv", "a.wav\tcar\n");
        write(d, "s.tsv", "a.wav\t0.50\t2.25\tcar\na.wav\t3.0\t1.0\tcar\n");
        match load_manifest(&d.join("m.tsv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        write(d, "s.tsv", "a.wav\t0.50\t2.25\tcar\n");
        let m = load_manifest(&d.join("m.tsv")).unwrap();
        let e = m.entries[0].strong.as_ref().unwrap().events()[0];
        assert_eq!((e.class, e.onset, e.offset), (0, 0.5, 2.25));
    }
}
