//! Observations, episodes and dataset splits, plus JSONL ingestion.
//!
//! One episode per line:
//!
//! ```text
//! {"goal": str,
//!  "steps": [{"elements": [{"text": str,
//!                           "attrs": {"clickable": bool, "editable": bool, "selected": bool, "depth": int},
//!                           "img": [float...],
//!                           "box": [l,t,r,b]}],
//!             "action": <action json>}],
//!  "meta": {"id": str, "seed": int}}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{ActionRecord, ActionType, BoundingBox};

/// Upper bound on elements per screen unless configured otherwise.
pub const DEFAULT_MAX_ELEMENTS: usize = 290;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error on line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("episode `{episode}` violates an invariant: {reason}")]
    Invariant { episode: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementAttrs {
    pub clickable: bool,
    pub editable: bool,
    pub selected: bool,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UiElement {
    pub text: String,
    pub attrs: ElementAttrs,
    #[serde(rename = "img")]
    pub image_features: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub screen_id: String,
    pub elements: Vec<UiElement>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn box_of(&self, index: usize) -> Option<BoundingBox> {
        self.elements.get(index).map(|e| e.bbox)
    }

    /// Element-indexed textual summary, one line per element.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, el) in self.elements.iter().enumerate() {
            let mut flags = Vec::new();
            if el.attrs.clickable {
                flags.push("clickable");
            }
            if el.attrs.editable {
                flags.push("editable");
            }
            if el.attrs.selected {
                flags.push("selected");
            }
            let b = el.bbox.as_array();
            out.push_str(&format!(
                "[{i}] {:?} depth={} box=[{},{},{},{}]{}{}\n",
                el.text,
                el.attrs.depth,
                b[0],
                b[1],
                b[2],
                b[3],
                if flags.is_empty() { "" } else { " " },
                flags.join(" ")
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub action: ActionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub goal: String,
    pub steps: Vec<Step>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Total UI elements over all steps.
    pub fn element_count(&self) -> usize {
        self.steps.iter().map(|s| s.observation.len()).sum()
    }

    /// Checks the structural invariants: at least one step, element counts
    /// in `1..=max_elements`, consistent image dimension and in-range targets.
    pub fn validate(&self, image_dim: Option<usize>, max_elements: usize) -> Result<(), String> {
        if self.steps.is_empty() {
            return Err("episode has no steps".into());
        }
        for (t, step) in self.steps.iter().enumerate() {
            let n = step.observation.len();
            if n == 0 {
                return Err(format!("step {t} has no UI elements"));
            }
            if n > max_elements {
                return Err(format!(
                    "step {t} has {n} UI elements, above the maximum of {max_elements}"
                ));
            }
            if let Some(dim) = image_dim {
                if let Some((i, el)) = step
                    .observation
                    .elements
                    .iter()
                    .enumerate()
                    .find(|(_, el)| el.image_features.len() != dim)
                {
                    return Err(format!(
                        "step {t} element {i} has {} image features, expected {dim}",
                        el.image_features.len()
                    ));
                }
            }
            if let Some(target) = step.action.target() {
                if target >= n {
                    return Err(format!(
                        "step {t} targets element {target} but the screen has {n} elements"
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub episodes: Vec<Episode>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, mut episodes: Vec<Episode>) -> Self {
        episodes.sort_by(|a, b| a.meta.id.cmp(&b.meta.id));
        Self { name, episodes }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn step_count(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn find(&self, id: &str) -> Option<&Episode> {
        self.episodes
            .binary_search_by(|e| e.meta.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.episodes[i])
    }
}

// Wire records. Kept separate so the in-memory types can carry derived
// fields (screen ids) that are not part of the file format.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    elements: Vec<UiElement>,
    action: ActionRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    goal: String,
    steps: Vec<StepRecord>,
    meta: EpisodeMeta,
}

fn screen_id(episode_id: &str, t: usize) -> String {
    format!("{episode_id}#{t}")
}

impl From<EpisodeRecord> for Episode {
    fn from(rec: EpisodeRecord) -> Self {
        let id = rec.meta.id.clone();
        Episode {
            goal: rec.goal,
            steps: rec
                .steps
                .into_iter()
                .enumerate()
                .map(|(t, s)| Step {
                    observation: Observation {
                        screen_id: screen_id(&id, t),
                        elements: s.elements,
                    },
                    action: s.action,
                })
                .collect(),
            meta: rec.meta,
        }
    }
}

impl Episode {
    fn to_record(&self) -> EpisodeRecord {
        EpisodeRecord {
            goal: self.goal.clone(),
            steps: self
                .steps
                .iter()
                .map(|s| StepRecord {
                    elements: s.observation.elements.clone(),
                    action: s.action.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Single-line JSON in the dataset schema.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("episode serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Episode, String> {
        serde_json::from_str::<EpisodeRecord>(line)
            .map(Episode::from)
            .map_err(|e| e.to_string())
    }
}

/// Validation knobs for ingestion.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Required image feature length; `None` infers it from the first element.
    pub image_dim: Option<usize>,
    pub max_elements: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            image_dim: None,
            max_elements: DEFAULT_MAX_ELEMENTS,
        }
    }
}

pub fn load_episodes(
    path: impl AsRef<Path>,
    split: SplitName,
    opts: &LoadOptions,
) -> Result<DatasetSplit, EpisodeError> {
    let path = path.as_ref();
    let io_err = |source| EpisodeError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut image_dim = opts.image_dim;
    let mut seen = HashSet::new();
    let mut episodes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let episode = Episode::from_json_line(&line).map_err(|reason| EpisodeError::Schema {
            line: line_no,
            reason,
        })?;
        if image_dim.is_none() {
            image_dim = episode
                .steps
                .iter()
                .flat_map(|s| s.observation.elements.first())
                .map(|el| el.image_features.len())
                .next();
        }
        episode
            .validate(image_dim, opts.max_elements)
            .map_err(|reason| EpisodeError::Invariant {
                episode: episode.meta.id.clone(),
                reason: format!("line {line_no}: {reason}"),
            })?;
        if !seen.insert(episode.meta.id.clone()) {
            return Err(EpisodeError::Invariant {
                episode: episode.meta.id.clone(),
                reason: format!("line {line_no}: duplicate episode id"),
            });
        }
        episodes.push(episode);
    }
    Ok(DatasetSplit::new(split, episodes))
}

pub fn write_episodes(path: impl AsRef<Path>, split: &DatasetSplit) -> Result<(), EpisodeError> {
    let path = path.as_ref();
    let io_err = |source| EpisodeError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for ep in &split.episodes {
        w.write_all(ep.to_json_line().as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Histograms over a split. UI-element counts use bins of width ten keyed by
/// the bin's lower edge.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub steps: usize,
    pub action_types: BTreeMap<String, usize>,
    pub ui_count_bins: BTreeMap<usize, usize>,
    pub episode_lengths: BTreeMap<usize, usize>,
}

pub const UI_BIN_WIDTH: usize = 10;

pub fn ui_bin(count: usize) -> usize {
    (count / UI_BIN_WIDTH) * UI_BIN_WIDTH
}

pub fn episode_stats(split: &DatasetSplit) -> EpisodeStats {
    let mut stats = EpisodeStats {
        action_types: ActionType::ALL
            .iter()
            .map(|t| (t.as_str().to_string(), 0))
            .collect(),
        ..Default::default()
    };
    for ep in &split.episodes {
        stats.episodes += 1;
        *stats.episode_lengths.entry(ep.len()).or_default() += 1;
        for step in &ep.steps {
            stats.steps += 1;
            *stats
                .action_types
                .get_mut(step.action.action_type().as_str())
                .expect("all types pre-seeded") += 1;
            *stats
                .ui_count_bins
                .entry(ui_bin(step.observation.len()))
                .or_default() += 1;
        }
    }
    stats
}
