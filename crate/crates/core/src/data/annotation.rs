//! Clip annotation records and their line-delimited JSON file format.
//!
//! One clip per line:
//!
//! ```text
//! {"schema_version":1,"clip_id":"clip_0000","frame_count":30,
//!  "tracks":[{"track_id":0,"action":2,"boxes":[[x0,y0,x1,y1], ...]}],
//!  "groups":[{"members":[0,3],"activity":4}],
//!  "singletons":[1]}
//! ```
//!
//! Boxes are normalized to `[0, 1]` image coordinates, one per frame.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_GROUPS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// `0 ≤ x0 < x1 ≤ 1` and the same for `y`.
    pub fn is_valid(&self) -> bool {
        let ok = |a: f64, b: f64| a.is_finite() && b.is_finite() && 0.0 <= a && a < b && b <= 1.0;
        ok(self.x0, self.x1) && ok(self.y0, self.y1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Track {
    pub track_id: u32,
    pub action: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupAnnotation {
    pub members: Vec<u32>,
    pub activity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipAnnotation {
    pub schema_version: u32,
    pub clip_id: String,
    pub frame_count: usize,
    pub tracks: Vec<Track>,
    pub groups: Vec<GroupAnnotation>,
    pub singletons: Vec<u32>,
}

/// Ground truth of one clip in actor-index space (actor `i` = `tracks[i]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTargets {
    pub actions: Vec<usize>,
    pub groups: Vec<GtGroup>,
    pub singletons: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtGroup {
    /// Sorted actor indices.
    pub members: Vec<usize>,
    pub activity: usize,
}

impl ClipTargets {
    pub fn actor_count(&self) -> usize {
        self.actions.len()
    }

    /// GT group index of every actor, `None` for singletons.
    pub fn group_of_actor(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.actions.len()];
        for (g, grp) in self.groups.iter().enumerate() {
            for &m in &grp.members {
                out[m] = Some(g);
            }
        }
        out
    }
}

impl ClipAnnotation {
    pub fn actor_count(&self) -> usize {
        self.tracks.len()
    }

    pub fn validate(&self, max_groups: usize) -> Result<(), DataError> {
        let err = |path: String, message: String| DataError::Invariant {
            clip: self.clip_id.clone(),
            path,
            message,
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(err(
                "schema_version".into(),
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.frame_count == 0 {
            return Err(err("frame_count".into(), "must be at least 1".into()));
        }
        if self.tracks.is_empty() {
            return Err(err("tracks".into(), "clip has no actors".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in self.tracks.iter().enumerate() {
            if index.insert(t.track_id, i).is_some() {
                return Err(err(
                    format!("tracks[{i}].track_id"),
                    format!("duplicate track id {}", t.track_id),
                ));
            }
            if t.boxes.len() != self.frame_count {
                return Err(err(
                    format!("tracks[{i}].boxes"),
                    format!(
                        "track {} has {} boxes for {} frames",
                        t.track_id,
                        t.boxes.len(),
                        self.frame_count
                    ),
                ));
            }
            if let Some(f) = t.boxes.iter().position(|b| !b.is_valid()) {
                return Err(err(
                    format!("tracks[{i}].boxes[{f}]"),
                    format!("track {} has a degenerate or out-of-range box", t.track_id),
                ));
            }
        }
        if self.groups.len() > max_groups {
            return Err(err(
                "groups".into(),
                format!("{} groups exceed the maximum of {max_groups}", self.groups.len()),
            ));
        }
        let mut owner: HashMap<u32, String> = HashMap::new();
        let mut claim = |id: u32, path: String| -> Result<(), DataError> {
            if !index.contains_key(&id) {
                return Err(err(path, format!("unknown track id {id}")));
            }
            if let Some(prev) = owner.insert(id, path.clone()) {
                return Err(err(
                    path,
                    format!("track id {id} is assigned more than once (also at {prev})"),
                ));
            }
            Ok(())
        };
        for (g, grp) in self.groups.iter().enumerate() {
            if grp.members.is_empty() {
                return Err(err(format!("groups[{g}].members"), "empty group".into()));
            }
            for (j, &m) in grp.members.iter().enumerate() {
                claim(m, format!("groups[{g}].members[{j}]"))?;
            }
        }
        for (j, &s) in self.singletons.iter().enumerate() {
            claim(s, format!("singletons[{j}]"))?;
        }
        if let Some(t) = self.tracks.iter().find(|t| !owner.contains_key(&t.track_id)) {
            return Err(err(
                "tracks".into(),
                format!("track id {} is in no group and not a singleton", t.track_id),
            ));
        }
        Ok(())
    }

    /// Converts track ids to actor indices. Assumes a validated record.
    pub fn targets(&self) -> ClipTargets {
        let index: HashMap<u32, usize> = self
            .tracks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.track_id, i))
            .collect();
        let groups = self
            .groups
            .iter()
            .map(|g| {
                let mut members: Vec<usize> = g.members.iter().map(|m| index[m]).collect();
                members.sort_unstable();
                GtGroup {
                    members,
                    activity: g.activity,
                }
            })
            .collect();
        let mut singletons: Vec<usize> = self.singletons.iter().map(|s| index[s]).collect();
        singletons.sort_unstable();
        ClipTargets {
            actions: self.tracks.iter().map(|t| t.action).collect(),
            groups,
            singletons,
        }
    }
}

pub fn save_annotations(path: &Path, clips: &[ClipAnnotation]) -> Result<(), DataError> {
    let io = |e| DataError::io(path, e);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for c in clips {
        let line = serde_json::to_string(c).expect("annotation serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads and validates every record. Blank lines are skipped.
pub fn load_annotations(path: &Path, max_groups: usize) -> Result<Vec<ClipAnnotation>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut clips = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let clip = parse_record(&line, n + 1)?;
        clip.validate(max_groups)?;
        clips.push(clip);
    }
    Ok(clips)
}

pub fn parse_record(line: &str, line_no: usize) -> Result<ClipAnnotation, DataError> {
    let malformed = |path: String, message: String| {
        let clip = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("clip_id").and_then(|c| c.as_str()).map(String::from))
            .unwrap_or_else(|| "<unknown>".into());
        DataError::Malformed {
            line: line_no,
            clip,
            path,
            message,
        }
    };
    let mut de = serde_json::Deserializer::from_str(line);
    let clip: ClipAnnotation = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| malformed(e.path().to_string(), e.inner().to_string()))?;
    de.end()
        .map_err(|e| malformed(".".into(), e.to_string()))?;
    Ok(clip)
}
