//! Deterministic synthetic episodes with a planted, learnable signal.
//!
//! Every goal names an app, a search query and one target word per
//! click/long-press step, e.g. `open Maps ; type coffee near me ; tap inbox`.
//! Each screen carries exactly one cue element whose text announces the
//! expected action type, and click screens carry exactly one element whose
//! text is the step's target word and whose image features sit close to that
//! word's prototype vector. Everything else is a distractor drawn from
//! vocabularies disjoint from targets and cues.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_space::{tokenize, ActionRecord, ActionType, BoundingBox};
use crate::episode::{
    DatasetSplit, ElementAttrs, Episode, EpisodeMeta, Observation, SplitName, Step, UiElement,
    DEFAULT_MAX_ELEMENTS,
};

pub const APPS: &[&str] = &[
    "Chrome", "Maps", "Gmail", "YouTube", "Spotify", "Calendar", "Clock", "Camera", "Drive",
    "Amazon", "Netflix", "Uber", "Slack", "Zoom", "Keep", "Reddit",
];

pub const QUERIES: &[&str] = &[
    "las vegas",
    "coffee near me",
    "weather tomorrow",
    "cheap flights",
    "pizza delivery",
    "running shoes",
    "python tutorial",
    "news today",
    "best pasta recipe",
    "train times",
    "hotel deals",
    "movie tickets",
    "birthday gift ideas",
    "yoga classes",
    "car rental",
    "museum hours",
    "bike repair",
    "sushi places",
    "concert tickets",
    "gym schedule",
];

pub const TARGET_WORDS: &[&str] = &[
    "wifi", "bluetooth", "battery", "display", "sound", "storage", "inbox", "compose", "send",
    "reply", "archive", "starred", "drafts", "cart", "checkout", "wishlist", "orders", "coupons",
    "directions", "nearby", "restaurants", "hotels", "flights", "bookings", "playlist", "shuffle",
    "lyrics", "podcast", "subscribe", "comments", "trending", "friends", "messages", "contacts",
    "groups", "events", "reminders", "alarms", "timer", "stopwatch",
];

pub const DISTRACTOR_WORDS: &[&str] = &[
    "profile", "account", "privacy", "help", "about", "share", "download", "history",
    "favorites", "library", "videos", "news", "sports", "weather", "theme", "language",
    "feedback", "logout", "login", "signup", "terms", "policy", "version", "update", "refresh",
    "filter", "sort", "grid", "details", "overview", "summary", "status", "report", "tools",
    "extras", "premium", "upgrade", "gallery", "albums", "photos", "notes", "tasks", "files",
    "recent", "shared", "trash", "backup", "sync", "print", "export", "import", "copy", "paste",
    "rename", "move", "info", "close", "cancel", "ok", "settings",
];

/// Cue phrases announcing each action type, indexed by `ActionType::index()`.
pub const CUES: [[&str; 2]; 11] = [
    ["launcher", "app drawer"],
    ["options", "menu"],
    ["editable collection", "selection mode"],
    ["search here", "type message"],
    ["more above", "scroll top"],
    ["more below", "load more"],
    ["left carousel", "earlier slides"],
    ["right carousel", "later slides"],
    ["task complete", "all done"],
    ["dialog", "popup"],
    ["loading", "please wait"],
];

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

/// Relative weights over the eleven action types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionMixture(pub [f64; 11]);

impl Default for ActionMixture {
    /// Text-bearing types (open-app, input-text) make up 12.5% of steps.
    fn default() -> Self {
        let mut w = [0.0; 11];
        w[ActionType::OpenApp.index()] = 0.0625;
        w[ActionType::InputText.index()] = 0.0625;
        w[ActionType::Click.index()] = 0.35;
        w[ActionType::LongPress.index()] = 0.05;
        w[ActionType::ScrollUp.index()] = 0.05;
        w[ActionType::ScrollDown.index()] = 0.10;
        w[ActionType::ScrollLeft.index()] = 0.04;
        w[ActionType::ScrollRight.index()] = 0.04;
        w[ActionType::NavigateHome.index()] = 0.05;
        w[ActionType::NavigateBack.index()] = 0.10;
        w[ActionType::Wait.index()] = 0.095;
        Self(w)
    }
}

impl ActionMixture {
    pub fn weight(&self, t: ActionType) -> f64 {
        self.0[t.index()]
    }

    pub fn set(&mut self, t: ActionType, w: f64) {
        self.0[t.index()] = w;
    }

    pub fn text_fraction(&self) -> f64 {
        let total: f64 = self.0.iter().sum();
        (self.weight(ActionType::OpenApp) + self.weight(ActionType::InputText)) / total
    }

    /// Exact per-type counts for `n` steps by largest remainder.
    pub fn quotas(&self, n: usize) -> [usize; 11] {
        let total: f64 = self.0.iter().sum();
        let mut counts = [0usize; 11];
        let mut rema = Vec::with_capacity(11);
        for (k, w) in self.0.iter().enumerate() {
            let exact = n as f64 * w / total;
            counts[k] = exact.floor() as usize;
            rema.push((exact - exact.floor(), k));
        }
        let assigned: usize = counts.iter().sum();
        rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, k) in rema.iter().take(n - assigned) {
            counts[k] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub episodes: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub min_elements: usize,
    pub max_elements: usize,
    pub image_dim: usize,
    /// Std-dev of the noise added to planted image prototypes (whole vector norm).
    pub image_noise: f64,
    /// Probability that a target element carries a nested icon child.
    pub nested_child_prob: f64,
    pub mixture: ActionMixture,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            min_steps: 2,
            max_steps: 5,
            min_elements: 4,
            max_elements: 10,
            image_dim: 16,
            image_noise: 0.3,
            nested_child_prob: 0.2,
            mixture: ActionMixture::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::InvalidConfig(m));
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return bad(format!(
                "step range [{}, {}] is empty or starts at zero",
                self.min_steps, self.max_steps
            ));
        }
        if self.max_steps > TARGET_WORDS.len() {
            return bad(format!(
                "max_steps {} exceeds the {} available target words",
                self.max_steps,
                TARGET_WORDS.len()
            ));
        }
        if self.min_elements < 3 || self.min_elements > self.max_elements {
            return bad(format!(
                "element range [{}, {}] must satisfy 3 <= min <= max",
                self.min_elements, self.max_elements
            ));
        }
        if self.max_elements > DEFAULT_MAX_ELEMENTS {
            return bad(format!(
                "max_elements {} exceeds the cap of {DEFAULT_MAX_ELEMENTS}",
                self.max_elements
            ));
        }
        if self.image_dim == 0 {
            return bad("image_dim must be positive".into());
        }
        if !(self.image_noise.is_finite() && self.image_noise >= 0.0) {
            return bad("image_noise must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.nested_child_prob) {
            return bad("nested_child_prob must lie in [0, 1]".into());
        }
        if self.mixture.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("mixture weights must be finite and non-negative".into());
        }
        if self.mixture.0.iter().sum::<f64>() <= 0.0 {
            return bad("mixture weights sum to zero".into());
        }
        Ok(())
    }
}

/// The parsed form of a synthetic goal string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoalSpec {
    pub app: String,
    pub query: String,
    /// One `(type, word)` per targeted step, in step order.
    pub targets: Vec<(ActionType, String)>,
}

const GOAL_SEPARATOR: &str = " ; ";

impl GoalSpec {
    pub fn render(&self) -> String {
        let mut parts = vec![format!("open {}", self.app), format!("type {}", self.query)];
        for (t, word) in &self.targets {
            let verb = if *t == ActionType::LongPress { "hold" } else { "tap" };
            parts.push(format!("{verb} {word}"));
        }
        parts.join(GOAL_SEPARATOR)
    }

    pub fn parse(goal: &str) -> Option<GoalSpec> {
        let mut app = None;
        let mut query = None;
        let mut targets = Vec::new();
        for part in goal.split(GOAL_SEPARATOR) {
            let (verb, rest) = part.trim().split_once(' ')?;
            match verb {
                "open" => app = Some(rest.to_string()),
                "type" => query = Some(rest.to_string()),
                "tap" => targets.push((ActionType::Click, rest.to_string())),
                "hold" => targets.push((ActionType::LongPress, rest.to_string())),
                _ => return None,
            }
        }
        Some(GoalSpec {
            app: app?,
            query: query?,
            targets,
        })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Unit-norm prototype image vector for a word.
pub fn prototype(word: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Goal/element affinity: four points per goal target word present in the
/// element text, plus the best image cosine to a target-word prototype.
/// Text overlap dominates, so on a click screen only the planted element
/// can reach 3 or more.
pub fn planted_affinity(goal: &GoalSpec, element: &UiElement) -> f64 {
    let tokens = tokenize(&element.text);
    let overlap = goal
        .targets
        .iter()
        .filter(|(_, w)| tokens.iter().any(|t| t == w))
        .count();
    let best_cos = goal
        .targets
        .iter()
        .map(|(_, w)| cosine(&element.image_features, &prototype(w, element.image_features.len())))
        .fold(-1.0, f64::max);
    4.0 * overlap as f64 + best_cos
}

struct EpisodePlan {
    types: Vec<ActionType>,
    seed: u64,
}

fn noisy(proto: Vec<f64>, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = noise / (proto.len() as f64).sqrt();
    proto
        .into_iter()
        .map(|x| x + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_features(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn pick<'a>(items: &[&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    items[rng.random_range(0..items.len())]
}

struct Draft {
    text: String,
    attrs: ElementAttrs,
    img: Vec<f64>,
    height: u32,
}

fn build_episode(
    cfg: &SyntheticConfig,
    plan: &EpisodePlan,
    id: String,
    source: &str,
) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let app = pick(APPS, &mut rng).to_string();
    let query = pick(QUERIES, &mut rng).to_string();
    let mut words: Vec<&str> = TARGET_WORDS.to_vec();
    words.shuffle(&mut rng);
    let mut words = words.into_iter();
    let targets: Vec<(ActionType, String)> = plan
        .types
        .iter()
        .filter(|t| t.has_target())
        .map(|t| (*t, words.next().expect("validated step cap").to_string()))
        .collect();
    let goal = GoalSpec {
        app: app.clone(),
        query: query.clone(),
        targets: targets.clone(),
    };
    let mut next_target = targets.iter();

    let dim = cfg.image_dim;
    let mut steps = Vec::with_capacity(plan.types.len());
    for (t, &action_type) in plan.types.iter().enumerate() {
        let n = rng.random_range(cfg.min_elements..=cfg.max_elements);
        let cue_text = CUES[action_type.index()][rng.random_range(0..2)];
        let cue = Draft {
            text: cue_text.to_string(),
            attrs: ElementAttrs {
                clickable: action_type == ActionType::InputText || rng.random_bool(0.5),
                editable: action_type == ActionType::InputText,
                selected: action_type == ActionType::InputText,
                depth: rng.random_range(0..2),
            },
            img: noisy(prototype(cue_text, dim), cfg.image_noise, &mut rng),
            height: rng.random_range(100..160),
        };
        let mut drafts = vec![cue];
        let mut target_word = None;
        if action_type.has_target() {
            let (_, word) = next_target.next().expect("one target per targeted step");
            drafts.push(Draft {
                text: word.clone(),
                attrs: ElementAttrs {
                    clickable: true,
                    editable: false,
                    selected: false,
                    depth: rng.random_range(0..2),
                },
                img: noisy(prototype(word, dim), cfg.image_noise, &mut rng),
                height: rng.random_range(120..180),
            });
            target_word = Some(word.clone());
        }
        while drafts.len() < n {
            let text = match rng.random_range(0..10) {
                0 => String::new(),
                1 | 2 => format!(
                    "{} {}",
                    pick(DISTRACTOR_WORDS, &mut rng),
                    pick(DISTRACTOR_WORDS, &mut rng)
                ),
                _ => pick(DISTRACTOR_WORDS, &mut rng).to_string(),
            };
            let editable = rng.random_bool(0.05);
            drafts.push(Draft {
                text,
                attrs: ElementAttrs {
                    clickable: rng.random_bool(0.5),
                    editable,
                    selected: !editable && rng.random_bool(0.05),
                    depth: rng.random_range(0..3),
                },
                img: random_features(dim, &mut rng),
                height: rng.random_range(80..160),
            });
        }
        drafts.shuffle(&mut rng);

        let target_pos = target_word
            .as_ref()
            .map(|w| drafts.iter().position(|d| &d.text == w).unwrap());
        // a nested icon inside the target replaces one distractor
        let child = match target_pos {
            Some(pos) if drafts.len() > 2 && rng.random_bool(cfg.nested_child_prob) => {
                let victim = (0..drafts.len())
                    .rev()
                    .find(|&i| i != pos && drafts[i].text.as_str() != cue_text)
                    .unwrap();
                drafts.remove(victim);
                let pos = drafts.iter().position(|d| Some(&d.text) == target_word.as_ref()).unwrap();
                Some((pos, random_features(dim, &mut rng)))
            }
            _ => None,
        };

        let mut elements = Vec::with_capacity(n);
        let mut target_index = None;
        let mut y = 80u32;
        for (i, d) in drafts.into_iter().enumerate() {
            let bbox = BoundingBox::new(24, y, 1056, y + d.height).unwrap();
            y += d.height + 12;
            let is_target = Some(&d.text) == target_word.as_ref();
            if is_target {
                target_index = Some(elements.len());
            }
            let depth = d.attrs.depth;
            elements.push(UiElement {
                text: d.text,
                attrs: d.attrs,
                image_features: d.img,
                bbox,
            });
            if let Some((pos, img)) = child.as_ref().filter(|(pos, _)| *pos == i) {
                debug_assert_eq!(*pos, i);
                let b = bbox;
                elements.push(UiElement {
                    text: String::new(),
                    attrs: ElementAttrs {
                        clickable: false,
                        editable: false,
                        selected: false,
                        depth: depth + 1,
                    },
                    image_features: img.clone(),
                    bbox: BoundingBox::new(b.left() + 16, b.top() + 16, b.left() + 96, b.bottom() - 16)
                        .unwrap(),
                });
            }
        }

        let action = match action_type {
            ActionType::OpenApp => ActionRecord::open_app(app.clone()),
            ActionType::InputText => ActionRecord::input_text(query.clone()),
            t if t.has_target() => ActionRecord::targeting(t, target_index.unwrap()).unwrap(),
            t => ActionRecord::bare(t).unwrap(),
        };
        steps.push(Step {
            observation: Observation {
                screen_id: format!("{id}#{t}"),
                elements,
            },
            action,
        });
    }

    Episode {
        goal: goal.render(),
        steps,
        meta: EpisodeMeta {
            id,
            seed: plan.seed,
            source: Some(source.to_string()),
        },
    }
}

/// Generates `cfg.episodes` episodes. Equal `(cfg, seed)` give equal splits.
/// Action types are dealt from an exact per-type quota over the whole split,
/// so the realised mixture matches the configured one up to rounding.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    seed: u64,
    split: SplitName,
) -> Result<DatasetSplit, SyntheticError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths: Vec<usize> = (0..cfg.episodes)
        .map(|_| rng.random_range(cfg.min_steps..=cfg.max_steps))
        .collect();
    let total: usize = lengths.iter().sum();
    let quotas = cfg.mixture.quotas(total);
    let mut pool: Vec<ActionType> = ActionType::ALL
        .iter()
        .flat_map(|t| std::iter::repeat_n(*t, quotas[t.index()]))
        .collect();
    pool.shuffle(&mut rng);

    let source = format!("synthetic-{}", split.as_str());
    let mut offset = 0;
    let episodes = lengths
        .iter()
        .enumerate()
        .map(|(e, &h)| {
            let plan = EpisodePlan {
                types: pool[offset..offset + h].to_vec(),
                seed: rng.next_u64(),
            };
            offset += h;
            build_episode(cfg, &plan, format!("syn-{seed}-{e:06}"), &source)
        })
        .collect();
    Ok(DatasetSplit::new(split, episodes))
}
