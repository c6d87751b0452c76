//! The eleven-type action grammar, its JSON wire form, and the relaxed
//! comparisons used to score predicted actions against ground truth.
//!
//! Wire form examples:
//!
//! ```text
//! {"action-type":"open-app","app-name":"Chrome"}
//! {"action-type":"click","target-element":7}
//! {"action-type":"input-text","text":"las vegas"}
//! {"action-type":"wait"}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

pub const ACTION_TYPE_KEY: &str = "action-type";
pub const APP_NAME_KEY: &str = "app-name";
pub const TARGET_KEY: &str = "target-element";
pub const TEXT_KEY: &str = "text";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("malformed action json: {0}")]
    MalformedJson(String),
    #[error("unknown action type `{0}`")]
    UnknownActionType(String),
    #[error("illegal specification for `{action_type}`: {reason}")]
    SpecMismatch {
        action_type: ActionType,
        reason: String,
    },
    #[error("element index {0} has no bounding box in the observation")]
    UnresolvableTarget(usize),
    #[error("invalid bounding box ({left},{top},{right},{bottom})")]
    InvalidBox {
        left: i64,
        top: i64,
        right: i64,
        bottom: i64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionType {
    OpenApp,
    Click,
    LongPress,
    InputText,
    ScrollUp,
    ScrollDown,
    ScrollLeft,
    ScrollRight,
    NavigateHome,
    NavigateBack,
    Wait,
}

/// Which specification an action type carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecKind {
    AppName,
    Target,
    Text,
    Empty,
}

impl ActionType {
    pub const COUNT: usize = 11;

    /// Canonical order; `index()` is the position in this array.
    pub const ALL: [ActionType; 11] = [
        ActionType::OpenApp,
        ActionType::Click,
        ActionType::LongPress,
        ActionType::InputText,
        ActionType::ScrollUp,
        ActionType::ScrollDown,
        ActionType::ScrollLeft,
        ActionType::ScrollRight,
        ActionType::NavigateHome,
        ActionType::NavigateBack,
        ActionType::Wait,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::OpenApp => "open-app",
            ActionType::Click => "click",
            ActionType::LongPress => "long-press",
            ActionType::InputText => "input-text",
            ActionType::ScrollUp => "scroll-up",
            ActionType::ScrollDown => "scroll-down",
            ActionType::ScrollLeft => "scroll-left",
            ActionType::ScrollRight => "scroll-right",
            ActionType::NavigateHome => "navigate-home",
            ActionType::NavigateBack => "navigate-back",
            ActionType::Wait => "wait",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ActionType> {
        Self::ALL.get(index).copied()
    }

    pub fn spec_kind(self) -> SpecKind {
        match self {
            ActionType::OpenApp => SpecKind::AppName,
            ActionType::Click | ActionType::LongPress => SpecKind::Target,
            ActionType::InputText => SpecKind::Text,
            _ => SpecKind::Empty,
        }
    }

    /// Types whose specification is free text and therefore routed to the
    /// text-action generator.
    pub fn is_text_bearing(self) -> bool {
        matches!(self, ActionType::OpenApp | ActionType::InputText)
    }

    pub fn has_target(self) -> bool {
        self.spec_kind() == SpecKind::Target
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionType {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ActionError::UnknownActionType(s.to_string()))
    }
}

impl Serialize for ActionType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ActionType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ActionSpec {
    AppName(String),
    TargetElement(usize),
    Text(String),
    Empty,
}

impl ActionSpec {
    fn kind(&self) -> SpecKind {
        match self {
            ActionSpec::AppName(_) => SpecKind::AppName,
            ActionSpec::TargetElement(_) => SpecKind::Target,
            ActionSpec::Text(_) => SpecKind::Text,
            ActionSpec::Empty => SpecKind::Empty,
        }
    }
}

/// A legal `(type, specification)` pair. Construction validates the pairing,
/// so every value of this type is serializable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionRecord {
    action_type: ActionType,
    spec: ActionSpec,
}

impl ActionRecord {
    pub fn new(action_type: ActionType, spec: ActionSpec) -> Result<Self, ActionError> {
        if action_type.spec_kind() != spec.kind() {
            return Err(ActionError::SpecMismatch {
                action_type,
                reason: format!(
                    "expects {:?} specification, got {:?}",
                    action_type.spec_kind(),
                    spec.kind()
                ),
            });
        }
        Ok(Self { action_type, spec })
    }

    pub fn open_app(name: impl Into<String>) -> Self {
        Self {
            action_type: ActionType::OpenApp,
            spec: ActionSpec::AppName(name.into()),
        }
    }

    pub fn click(element: usize) -> Self {
        Self {
            action_type: ActionType::Click,
            spec: ActionSpec::TargetElement(element),
        }
    }

    pub fn long_press(element: usize) -> Self {
        Self {
            action_type: ActionType::LongPress,
            spec: ActionSpec::TargetElement(element),
        }
    }

    pub fn input_text(text: impl Into<String>) -> Self {
        Self {
            action_type: ActionType::InputText,
            spec: ActionSpec::Text(text.into()),
        }
    }

    /// An action with an empty specification (scrolls, navigation, wait).
    pub fn bare(action_type: ActionType) -> Result<Self, ActionError> {
        Self::new(action_type, ActionSpec::Empty)
    }

    /// Builds the action of `action_type` targeting `element`. Only valid for
    /// click and long-press.
    pub fn targeting(action_type: ActionType, element: usize) -> Result<Self, ActionError> {
        Self::new(action_type, ActionSpec::TargetElement(element))
    }

    pub fn action_type(&self) -> ActionType {
        self.action_type
    }

    pub fn spec(&self) -> &ActionSpec {
        &self.spec
    }

    pub fn target(&self) -> Option<usize> {
        match self.spec {
            ActionSpec::TargetElement(i) => Some(i),
            _ => None,
        }
    }

    pub fn text_value(&self) -> Option<&str> {
        match &self.spec {
            ActionSpec::AppName(s) | ActionSpec::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ActionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_action(self))
    }
}

impl Serialize for ActionRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let has_spec = self.spec != ActionSpec::Empty;
        let mut map = serializer.serialize_map(Some(1 + usize::from(has_spec)))?;
        map.serialize_entry(ACTION_TYPE_KEY, self.action_type.as_str())?;
        match &self.spec {
            ActionSpec::AppName(name) => map.serialize_entry(APP_NAME_KEY, name)?,
            ActionSpec::TargetElement(i) => map.serialize_entry(TARGET_KEY, i)?,
            ActionSpec::Text(text) => map.serialize_entry(TEXT_KEY, text)?,
            ActionSpec::Empty => {}
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ActionRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        action_from_value(&value).map_err(D::Error::custom)
    }
}

/// The forced prefix handed to a text generator for a text-bearing type:
/// everything up to and including the specification key's colon.
pub fn forced_prefix(action_type: ActionType) -> Option<String> {
    let key = match action_type.spec_kind() {
        SpecKind::AppName => APP_NAME_KEY,
        SpecKind::Text => TEXT_KEY,
        _ => return None,
    };
    Some(format!(
        "{{\"{ACTION_TYPE_KEY}\":\"{}\",\"{key}\":",
        action_type.as_str()
    ))
}

/// Single-line JSON with `action-type` first and no extra whitespace.
pub fn serialize_action(action: &ActionRecord) -> String {
    let mut out = format!("{{\"{ACTION_TYPE_KEY}\":\"{}\"", action.action_type.as_str());
    match &action.spec {
        ActionSpec::AppName(name) => {
            out.push_str(&format!(",\"{APP_NAME_KEY}\":{}", json_string(name)))
        }
        ActionSpec::TargetElement(i) => out.push_str(&format!(",\"{TARGET_KEY}\":{i}")),
        ActionSpec::Text(text) => out.push_str(&format!(",\"{TEXT_KEY}\":{}", json_string(text))),
        ActionSpec::Empty => {}
    }
    out.push('}');
    out
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

pub fn parse_action(s: &str) -> Result<ActionRecord, ActionError> {
    let value: Value =
        serde_json::from_str(s.trim()).map_err(|e| ActionError::MalformedJson(e.to_string()))?;
    action_from_value(&value)
}

pub(crate) fn action_from_value(value: &Value) -> Result<ActionRecord, ActionError> {
    let obj: &Map<String, Value> = value
        .as_object()
        .ok_or_else(|| ActionError::MalformedJson("action must be a JSON object".into()))?;
    let type_name = match obj.get(ACTION_TYPE_KEY) {
        Some(Value::String(s)) => s,
        Some(_) => {
            return Err(ActionError::MalformedJson(format!(
                "`{ACTION_TYPE_KEY}` must be a string"
            )))
        }
        None => {
            return Err(ActionError::MalformedJson(format!(
                "missing `{ACTION_TYPE_KEY}`"
            )))
        }
    };
    let action_type: ActionType = type_name.parse()?;
    let mismatch = |reason: String| ActionError::SpecMismatch {
        action_type,
        reason,
    };

    let expected_key = match action_type.spec_kind() {
        SpecKind::AppName => Some(APP_NAME_KEY),
        SpecKind::Target => Some(TARGET_KEY),
        SpecKind::Text => Some(TEXT_KEY),
        SpecKind::Empty => None,
    };
    if let Some(extra) = obj
        .keys()
        .find(|k| k.as_str() != ACTION_TYPE_KEY && Some(k.as_str()) != expected_key)
    {
        return Err(mismatch(format!("unexpected key `{extra}`")));
    }

    let spec = match action_type.spec_kind() {
        SpecKind::Empty => ActionSpec::Empty,
        SpecKind::AppName | SpecKind::Text => {
            let key = expected_key.unwrap();
            let text = match obj.get(key) {
                Some(Value::String(s)) => s.clone(),
                Some(_) => return Err(mismatch(format!("`{key}` must be a string"))),
                None => return Err(mismatch(format!("missing `{key}`"))),
            };
            if action_type == ActionType::OpenApp {
                ActionSpec::AppName(text)
            } else {
                ActionSpec::Text(text)
            }
        }
        SpecKind::Target => match obj.get(TARGET_KEY) {
            Some(v) => {
                let index = v.as_u64().ok_or_else(|| {
                    mismatch(format!("`{TARGET_KEY}` must be a non-negative integer"))
                })?;
                ActionSpec::TargetElement(index as usize)
            }
            None => return Err(mismatch(format!("missing `{TARGET_KEY}`"))),
        },
    };
    ActionRecord::new(action_type, spec)
}

/// Pixel-space element bounds, `left <= right` and `top <= bottom`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    left: u32,
    top: u32,
    right: u32,
    bottom: u32,
}

impl BoundingBox {
    pub fn new(left: u32, top: u32, right: u32, bottom: u32) -> Result<Self, ActionError> {
        Self::from_signed(left as i64, top as i64, right as i64, bottom as i64)
    }

    pub fn from_signed(left: i64, top: i64, right: i64, bottom: i64) -> Result<Self, ActionError> {
        let ok = left >= 0
            && top >= 0
            && left <= right
            && top <= bottom
            && right <= u32::MAX as i64
            && bottom <= u32::MAX as i64;
        if !ok {
            return Err(ActionError::InvalidBox {
                left,
                top,
                right,
                bottom,
            });
        }
        Ok(Self {
            left: left as u32,
            top: top as u32,
            right: right as u32,
            bottom: bottom as u32,
        })
    }

    pub fn left(&self) -> u32 {
        self.left
    }
    pub fn top(&self) -> u32 {
        self.top
    }
    pub fn right(&self) -> u32 {
        self.right
    }
    pub fn bottom(&self) -> u32 {
        self.bottom
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.left, self.top, self.right, self.bottom]
    }

    /// True iff `self` lies inside `outer` grown by `slack` pixels on every edge.
    pub fn within(&self, outer: &BoundingBox, slack: u32) -> bool {
        self.left >= outer.left.saturating_sub(slack)
            && self.top >= outer.top.saturating_sub(slack)
            && self.right <= outer.right.saturating_add(slack)
            && self.bottom <= outer.bottom.saturating_add(slack)
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.as_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [l, t, r, b] = <[i64; 4]>::deserialize(deserializer)?;
        BoundingBox::from_signed(l, t, r, b).map_err(D::Error::custom)
    }
}

/// Knobs for the relaxed comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Symmetric slack in pixels applied to the target box edges.
    pub containment_slack: u32,
}

pub fn relaxed_click_match(predicted: &BoundingBox, target: &BoundingBox, cfg: &MatchConfig) -> bool {
    predicted.within(target, cfg.containment_slack)
}

/// Lowercases, splits on Unicode whitespace and strips leading/trailing
/// non-alphanumeric characters from each token. Tokens that become empty
/// are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| {
            tok.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|tok| !tok.is_empty())
        .collect()
}

/// Jaccard index of the two token sets as an exact `(intersection, union)`
/// pair. Both empty yields `(0, 0)`.
pub fn jaccard_counts(a: &str, b: &str) -> (usize, usize) {
    let sa: HashSet<String> = tokenize(a).into_iter().collect();
    let sb: HashSet<String> = tokenize(b).into_iter().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    (inter, union)
}

pub fn jaccard_index(a: &str, b: &str) -> f64 {
    match jaccard_counts(a, b) {
        (_, 0) => 1.0,
        (i, u) => i as f64 / u as f64,
    }
}

/// Jaccard index of the token sets is at least one half.
pub fn relaxed_text_match(predicted: &str, truth: &str) -> bool {
    let (inter, union) = jaccard_counts(predicted, truth);
    // integer form of inter/union >= 0.5; empty-vs-empty passes
    2 * inter >= union
}

pub fn app_name_match(predicted: &str, truth: &str) -> bool {
    predicted.trim().to_lowercase() == truth.trim().to_lowercase()
}

/// Compares two actions taken against the same observation. `resolve` maps an
/// element index to its bounding box.
pub fn relaxed_action_match<F>(
    predicted: &ActionRecord,
    truth: &ActionRecord,
    resolve: F,
    cfg: &MatchConfig,
) -> Result<bool, ActionError>
where
    F: Fn(usize) -> Option<BoundingBox>,
{
    if predicted.action_type != truth.action_type {
        return Ok(false);
    }
    let matched = match (&predicted.spec, &truth.spec) {
        (ActionSpec::TargetElement(p), ActionSpec::TargetElement(t)) => {
            let pb = resolve(*p).ok_or(ActionError::UnresolvableTarget(*p))?;
            let tb = resolve(*t).ok_or(ActionError::UnresolvableTarget(*t))?;
            relaxed_click_match(&pb, &tb, cfg)
        }
        (ActionSpec::Text(p), ActionSpec::Text(t)) => relaxed_text_match(p, t),
        (ActionSpec::AppName(p), ActionSpec::AppName(t)) => app_name_match(p, t),
        (ActionSpec::Empty, ActionSpec::Empty) => true,
        _ => unreachable!("equal action types imply equal spec kinds"),
    };
    Ok(matched)
}
