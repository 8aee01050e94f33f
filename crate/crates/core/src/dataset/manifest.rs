//! JSON Lines corpus manifest: a header line with the task taxonomy, then
//! one record per image. Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::volume::{slice_volume, Image, Mask, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInfo {
    pub id: u32,
    pub name: String,
    /// Foreground classes; masks use `0..=num_classes`.
    pub num_classes: u32,
    pub group_id: u32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub source_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub image: String,
    pub mask: Option<String>,
    pub task_id: u32,
    /// Resolved from the taxonomy.
    pub group_id: u32,
    pub split: Option<Split>,
    pub labeled: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    tasks: Vec<TaskInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    task_id: u32,
    #[serde(default, skip_serializing)]
    group_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    labeled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub tasks: Vec<TaskInfo>,
    pub records: Vec<ImageRecord>,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

impl CorpusManifest {
    /// Builds and validates a manifest from a taxonomy and records whose
    /// `group_id` is filled in from the taxonomy.
    pub fn new(tasks: Vec<TaskInfo>, mut records: Vec<ImageRecord>, root: PathBuf) -> Result<Self> {
        let groups: BTreeMap<u32, u32> = tasks.iter().map(|t| (t.id, t.group_id)).collect();
        for r in &mut records {
            if let Some(&g) = groups.get(&r.task_id) {
                r.group_id = g;
            }
        }
        let m = Self { tasks, records, root };
        m.validate()?;
        Ok(m)
    }

    /// The eight-task, four-group aggregation of the original study.
    pub fn reference_taxonomy() -> Vec<TaskInfo> {
        [
            (1, "Heart-MRI (left atrium)", 1, 1, "LASC, 1262 slices"),
            (2, "Liver-CT", 2, 2, "LiTS, 4342 slices"),
            (3, "Prostate-MRI", 2, 3, "MSD, 483 slices"),
            (4, "Pancreas-CT", 2, 2, "MSD, 8607 slices"),
            (5, "Spleen-CT", 1, 2, "MSD, 1466 slices"),
            (6, "Knee-MRI", 4, 4, "Knee, 8187 slices"),
            (7, "Heart-MRI (ventricles)", 3, 1, "ACDC, 1891 slices"),
            (8, "Heart-MRI (ventricles)", 3, 1, "M&Ms, 3120 slices"),
        ]
        .into_iter()
        .map(|(id, name, num_classes, group_id, note)| TaskInfo {
            id,
            name: name.into(),
            num_classes,
            group_id,
            source_note: note.into(),
        })
        .collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_groups(&self) -> usize {
        self.tasks.iter().map(|t| t.group_id).collect::<BTreeSet<_>>().len()
    }

    pub fn task(&self, task_id: u32) -> Option<&TaskInfo> {
        self.tasks.iter().find(|t| t.id == task_id)
    }

    pub fn group_of(&self, task_id: u32) -> Option<u32> {
        self.task(task_id).map(|t| t.group_id)
    }

    pub fn records_of(&self, task_id: u32) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.task_id == task_id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.tasks.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!(
                "task {} is listed more than once (a task maps to exactly one group)",
                w[0]
            )));
        }
        if ids.is_empty() {
            return Err(Error::Validation("manifest declares no tasks".into()));
        }
        if let Some((i, id)) = ids.iter().enumerate().find(|(i, &id)| id as usize != i + 1) {
            return Err(Error::Validation(format!("task ids must be 1..T without gaps; found {id} at position {}", i + 1)));
        }
        let groups: BTreeSet<u32> = self.tasks.iter().map(|t| t.group_id).collect();
        if let Some((i, g)) = groups.iter().enumerate().find(|(i, &g)| g as usize != i + 1) {
            return Err(Error::Validation(format!("group ids must be 1..G without gaps; found {g} at position {}", i + 1)));
        }
        let t = self.tasks.len() as u32;
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("record {} appears twice", r.id)));
            }
            if r.task_id == 0 || r.task_id > t {
                return Err(Error::Validation(format!(
                    "record {}: task_id {} outside 1..{t}",
                    r.id, r.task_id
                )));
            }
            let g = self.group_of(r.task_id).expect("task exists");
            if r.group_id != g {
                return Err(Error::Validation(format!(
                    "record {}: group {} but task {} belongs to group {g}",
                    r.id, r.group_id, r.task_id
                )));
            }
            if r.labeled && r.split != Some(Split::Train) {
                return Err(Error::Validation(format!("record {} is labeled but not in the train split", r.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m = Self::load_unchecked_files(path.as_ref())?;
        for r in &m.records {
            for rel in std::iter::once(&r.image).chain(r.mask.as_ref()) {
                let p = m.root.join(rel);
                if !p.exists() {
                    return Err(Error::Load {
                        path: path.as_ref().to_path_buf(),
                        reason: format!("record {} references missing file {}", r.id, p.display()),
                    });
                }
            }
        }
        Ok(m)
    }

    fn load_unchecked_files(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
        let load_err = |line: usize, reason: String| Error::Load {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| load_err(1, "missing header".into()))?;
        let header: HeaderLine = serde_json::from_str(first).map_err(|e| load_err(1, e.to_string()))?;
        let mut raw = Vec::new();
        for (i, line) in lines {
            let r: RecordLine = serde_json::from_str(line).map_err(|e| load_err(i + 1, e.to_string()))?;
            raw.push(r);
        }
        let groups: BTreeMap<u32, u32> = header.tasks.iter().map(|t| (t.id, t.group_id)).collect();
        let mut records = Vec::with_capacity(raw.len());
        for r in raw {
            let resolved = groups.get(&r.task_id).copied().unwrap_or(0);
            if let Some(g) = r.group_id {
                if g != resolved {
                    return Err(Error::Validation(format!(
                        "record {}: group {g} but task {} belongs to group {resolved}",
                        r.id, r.task_id
                    )));
                }
            }
            records.push(ImageRecord {
                id: r.id,
                image: r.image,
                mask: r.mask,
                task_id: r.task_id,
                group_id: resolved,
                split: r.split,
                labeled: r.labeled,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { tasks: header.tasks, records, root };
        m.validate()?;
        Ok(m)
    }

    /// Writes the manifest as JSON Lines. Record paths are written as
    /// stored, so they stay relative to `root`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let fmt = |e: serde_json::Error| Error::Format(e.to_string());
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &HeaderLine { tasks: self.tasks.clone() }).map_err(fmt)?;
        out.push(b'\n');
        for r in &self.records {
            let line = RecordLine {
                id: r.id.clone(),
                image: r.image.clone(),
                mask: r.mask.clone(),
                task_id: r.task_id,
                group_id: None,
                split: r.split,
                labeled: r.labeled,
            };
            serde_json::to_writer(&mut out, &line).map_err(fmt)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn image_path(&self, r: &ImageRecord) -> PathBuf {
        self.root.join(&r.image)
    }

    /// Reads a single-slice volume, min-max normalized to `[0, 1]`.
    pub fn load_image(&self, r: &ImageRecord) -> Result<Image> {
        let vol = Volume::read(self.image_path(r))?;
        if vol.dims[0] != 1 {
            return Err(Error::Format(format!("record {}: image has {} slices, expected 1", r.id, vol.dims[0])));
        }
        Ok(slice_volume(&vol)?.remove(0))
    }

    pub fn load_mask(&self, r: &ImageRecord) -> Result<Mask> {
        let rel = r
            .mask
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("record {} has no mask", r.id)))?;
        let vol = Volume::read(self.root.join(rel))?;
        let [d, h, w] = vol.dims;
        if d != 1 {
            return Err(Error::Format(format!("record {}: mask has {d} slices, expected 1", r.id)));
        }
        let classes = self.task(r.task_id).map(|t| t.num_classes).unwrap_or(0);
        let mut data = Vec::with_capacity(h * w);
        for &v in &vol.data {
            if v.fract() != 0.0 || v < 0.0 || v > classes as f32 {
                return Err(Error::Validation(format!(
                    "record {}: mask value {v} outside 0..={classes}",
                    r.id
                )));
            }
            data.push(v as u8);
        }
        Mask::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, task: u32) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            image: format!("images/{id}.rvol"),
            mask: None,
            task_id: task,
            group_id: 0,
            split: None,
            labeled: false,
        }
    }

    #[test]
    fn reference_taxonomy_groups() {
        let m = CorpusManifest::new(CorpusManifest::reference_taxonomy(), vec![], PathBuf::new()).unwrap();
        assert_eq!(m.num_tasks(), 8);
        assert_eq!(m.num_groups(), 4);
        for (tasks, g) in [(&[1, 7, 8][..], 1), (&[2, 4, 5][..], 2), (&[3][..], 3), (&[6][..], 4)] {
            for &t in tasks {
                assert_eq!(m.group_of(t), Some(g));
            }
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        let tasks = vec![TaskInfo { id: 1, name: "a".into(), num_classes: 1, group_id: 1, source_note: String::new() }];
        let m = CorpusManifest::new(tasks, vec![], PathBuf::new()).unwrap();
        assert_eq!(m.records.len(), 0);
    }

    #[test]
    fn out_of_range_task_names_the_record() {
        let err = CorpusManifest::new(CorpusManifest::reference_taxonomy(), vec![record("r9", 9)], PathBuf::new())
            .unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("r9")), "{err}");
    }

    #[test]
    fn taxonomy_violations() {
        let mut tasks = CorpusManifest::reference_taxonomy();
        tasks.push(TaskInfo { group_id: 3, ..tasks[0].clone() });
        assert!(CorpusManifest::new(tasks, vec![], PathBuf::new()).is_err());
        let mut tasks = CorpusManifest::reference_taxonomy();
        tasks.retain(|t| t.id != 4);
        assert!(CorpusManifest::new(tasks, vec![], PathBuf::new()).is_err());
        let mut tasks = CorpusManifest::reference_taxonomy();
        tasks[5].group_id = 6;
        assert!(CorpusManifest::new(tasks, vec![], PathBuf::new()).is_err());
    }

    #[test]
    fn record_group_must_match_taxonomy() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"tasks\":[{\"id\":1,\"name\":\"a\",\"num_classes\":1,\"group_id\":1}]}\n\
             {\"id\":\"x\",\"image\":\"x.rvol\",\"task_id\":1,\"group_id\":2}\n",
        )
        .unwrap();
        assert!(matches!(CorpusManifest::load(&p), Err(Error::Validation(m)) if m.contains('x')));
    }

    #[test]
    fn missing_file_is_a_load_error() {
        assert!(matches!(CorpusManifest::load("/nonexistent/m.jsonl"), Err(Error::Load { .. })));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"tasks\":[{\"id\":1,\"name\":\"a\",\"num_classes\":1,\"group_id\":1}]}\n\
             {\"id\":\"x\",\"image\":\"x.rvol\",\"task_id\":1}\n",
        )
        .unwrap();
        assert!(matches!(CorpusManifest::load(&p), Err(Error::Load { .. })));
    }
}
