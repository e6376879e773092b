//! Dataset manifest: the index written by the dataset converter and read
//! by training and evaluation.
//!
//! ```json
//! {"subset": "shd", "label_names": ["..."],
//!  "entries": [{"sample_id": "...", "path": "train/0001.evg", "label": 3,
//!               "split": "train", "duration_us": 1000000}],
//!  "assumptions": ["..."]}
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{read_stream, EventStream, Format, ReadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Shd,
    Ssc35,
    Ssc11,
}

impl Subset {
    pub fn num_classes(self) -> usize {
        match self {
            Subset::Shd => 20,
            Subset::Ssc35 => 35,
            Subset::Ssc11 => 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub path: PathBuf,
    pub label: usize,
    pub split: String,
    pub duration_us: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subset: Subset,
    pub label_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub assumptions: Vec<String>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let c = self.label_names.len();
        if c != self.subset.num_classes() {
            return Err(Error::config(
                "manifest.label_names",
                format!("{:?} has {} classes, got {c}", self.subset, self.subset.num_classes()),
            ));
        }
        if self.subset == Subset::Ssc11 && self.label_names[10] != "unknown" {
            return Err(Error::config("manifest.label_names", "ssc11 reserves id 10 for `unknown`"));
        }
        let mut ids = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            let bad = |reason: String| Error::Malformed {
                what: "manifest entry",
                record: i,
                line: None,
                reason,
            };
            if e.label >= c {
                return Err(bad(format!("label {} outside [0, {c})", e.label)));
            }
            if e.sample_id.is_empty() || !ids.insert(e.sample_id.as_str()) {
                return Err(bad(format!("empty or duplicate sample_id `{}`", e.sample_id)));
            }
            if e.path.as_os_str().is_empty() {
                return Err(bad("empty path".into()));
            }
            if e.split.is_empty() {
                return Err(bad("empty split".into()));
            }
        }
        Ok(())
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.split == name)
    }

    pub fn class_counts(&self, split: Option<&str>) -> Vec<usize> {
        let mut counts = vec![0; self.label_names.len()];
        for e in &self.entries {
            if split.is_none_or(|s| s == e.split) {
                counts[e.label] += 1;
            }
        }
        counts
    }
}

pub fn parse_manifest(src: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(src)?;
    m.validate()?;
    Ok(m)
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base: PathBuf,
}

impl LoadedManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let manifest = parse_manifest(&std::fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, base })
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        if e.path.is_absolute() {
            e.path.clone()
        } else {
            self.base.join(&e.path)
        }
    }

    /// Reads an entry's stream and checks it against the manifest.
    pub fn load(&self, e: &ManifestEntry) -> Result<EventStream> {
        let p = self.resolve(e);
        let s = read_stream(&p, Format::from_path(&p), ReadOptions::default())?;
        if s.header.duration_us != e.duration_us {
            return Err(Error::config(
                "manifest.duration_us",
                format!("{}: manifest says {}, stream says {}", e.sample_id, e.duration_us, s.header.duration_us),
            ));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{write_stream, Event, StreamHeader};

    fn entry(id: &str, label: usize, split: &str) -> ManifestEntry {
        ManifestEntry {
            sample_id: id.into(),
            path: format!("{id}.evg").into(),
            label,
            split: split.into(),
            duration_us: 1000,
        }
    }

    fn ssc11() -> Manifest {
        let mut names: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        names.push("unknown".into());
        Manifest {
            subset: Subset::Ssc11,
            label_names: names,
            entries: vec![entry("a", 0, "train"), entry("b", 10, "train"), entry("c", 10, "test")],
            assumptions: vec!["default target words".into()],
        }
    }

    #[test]
    fn counts_sum_to_total() {
        let m = ssc11();
        m.validate().unwrap();
        assert_eq!(m.class_counts(None).iter().sum::<usize>(), m.entries.len());
        assert_eq!(m.class_counts(Some("train"))[10], 1);
        assert_eq!(m.split("test").count(), 1);
    }

    #[test]
    fn rejects_bad_manifests() {
        let mut m = ssc11();
        m.entries[0].label = 11;
        assert!(matches!(m.validate(), Err(Error::Malformed { record: 0, .. })));

        let mut m = ssc11();
        m.entries[1].sample_id = "a".into();
        assert!(m.validate().is_err());

        let mut m = ssc11();
        m.label_names[10] = "other".into();
        assert!(m.validate().is_err());

        let mut m = ssc11();
        m.subset = Subset::Shd;
        assert!(matches!(m.validate(), Err(Error::Config { .. })));

        assert!(parse_manifest("{\"subset\": \"shd\"}").is_err());
    }

    #[test]
    fn loads_entries_relative_to_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = ssc11();
        for e in &m.entries {
            let s = EventStream {
                header: StreamHeader::new(700, 1000),
                events: vec![Event::new(5, 3), Event::new(9, 4)],
            };
            write_stream(&dir.path().join(&e.path), Format::Binary, &s).unwrap();
        }
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let lm = LoadedManifest::read(&path).unwrap();
        assert_eq!(lm.manifest, m);
        let s = lm.load(&lm.manifest.entries[1]).unwrap();
        assert_eq!(s.events.len(), 2);

        let mut bad = m.clone();
        bad.entries[0].duration_us = 5;
        std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        let lm = LoadedManifest::read(&path).unwrap();
        assert!(lm.load(&lm.manifest.entries[0]).is_err());
    }
}
