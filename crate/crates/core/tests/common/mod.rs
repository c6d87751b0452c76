#![allow(dead_code)]

use std::collections::BTreeSet;

use limac::action_space::{ActionRecord, ActionType, BoundingBox};
use limac::encoders::{EncoderBundle, EncoderConfig};
use limac::episode::{DatasetSplit, SplitName};
use limac::model::{ActModel, ModelConfig};
use limac::synthetic::{generate_synthetic, SyntheticConfig};

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        d_txt: 16,
        d_img: 8,
        d_attr: 8,
        ..Default::default()
    }
}

pub fn tiny_pair(seed: u64) -> (ActModel, EncoderBundle) {
    let model = ActModel::new(ModelConfig {
        init_seed: seed,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let bundle = EncoderBundle::new(EncoderConfig {
        init_seed: seed,
        ..tiny_encoder_config()
    })
    .unwrap();
    (model, bundle)
}

pub fn synthetic(episodes: usize, seed: u64, split: SplitName) -> DatasetSplit {
    generate_synthetic(
        &SyntheticConfig {
            episodes,
            ..Default::default()
        },
        seed,
        split,
    )
    .unwrap()
}

/// Largest elementwise relative difference, `|a-b| / max(|a|,|b|)`, 0/0 = 0.
pub fn max_rel_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// One relaxed-match case: two actions on a two-element screen where element
/// 0 has `pred_box` and element 1 has `truth_box`.
#[derive(Debug, Clone)]
pub struct MatchCase {
    pub name: &'static str,
    pub pred: ActionRecord,
    pub truth: ActionRecord,
    pub pred_box: [i64; 4],
    pub truth_box: [i64; 4],
    pub slack: u32,
    pub expected: bool,
}

const T: [i64; 4] = [100, 200, 300, 260];

fn click_case(name: &'static str, pred_box: [i64; 4], slack: u32, expected: bool) -> MatchCase {
    MatchCase {
        name,
        pred: ActionRecord::click(0),
        truth: ActionRecord::click(1),
        pred_box,
        truth_box: T,
        slack,
        expected,
    }
}

fn boxed(name: &'static str, pred_box: [i64; 4], truth_box: [i64; 4], slack: u32, expected: bool) -> MatchCase {
    MatchCase {
        truth_box,
        ..click_case(name, pred_box, slack, expected)
    }
}

fn pair(name: &'static str, pred: ActionRecord, truth: ActionRecord, expected: bool) -> MatchCase {
    MatchCase {
        name,
        pred,
        truth,
        pred_box: T,
        truth_box: T,
        slack: 0,
        expected,
    }
}

fn text(name: &'static str, pred: &str, truth: &str, expected: bool) -> MatchCase {
    pair(name, ActionRecord::input_text(pred), ActionRecord::input_text(truth), expected)
}

fn app(name: &'static str, pred: &str, truth: &str, expected: bool) -> MatchCase {
    pair(name, ActionRecord::open_app(pred), ActionRecord::open_app(truth), expected)
}

fn bare(t: ActionType) -> ActionRecord {
    ActionRecord::bare(t).unwrap()
}

/// The hand-labelled fixture: containment edges, Jaccard boundaries, the
/// origin/destination confusion and app-name and empty-spec cases.
pub fn relaxed_fixture() -> Vec<MatchCase> {
    use ActionType::*;
    let max = u32::MAX as i64;
    let mut v = vec![
        click_case("identical box", T, 0, true),
        click_case("strictly inside", [110, 210, 290, 250], 0, true),
        click_case("shares left edge", [100, 210, 200, 250], 0, true),
        click_case("shares right edge", [150, 210, 300, 250], 0, true),
        click_case("shares top edge", [150, 200, 200, 250], 0, true),
        click_case("shares bottom edge", [150, 210, 200, 260], 0, true),
        click_case("left 1px out", [99, 210, 200, 250], 0, false),
        click_case("right 1px out", [150, 210, 301, 250], 0, false),
        click_case("top 1px out", [150, 199, 200, 250], 0, false),
        click_case("bottom 1px out", [150, 210, 200, 261], 0, false),
        click_case("prediction encloses truth", [90, 190, 310, 270], 0, false),
        click_case("disjoint", [400, 400, 450, 450], 0, false),
        click_case("partial overlap", [200, 230, 350, 300], 0, false),
        click_case("point inside", [150, 230, 150, 230], 0, true),
        click_case("point on corner", [100, 200, 100, 200], 0, true),
        click_case("point just outside", [99, 200, 99, 200], 0, false),
        click_case("zero-width on right edge", [300, 200, 300, 260], 0, true),
        click_case("almost identical, 1px shorter", [100, 200, 300, 259], 0, true),
        click_case("almost identical, 1px taller", [100, 200, 300, 261], 0, false),
        click_case("slack 2, left 2px out", [98, 210, 200, 250], 2, true),
        click_case("slack 2, left 3px out", [97, 210, 200, 250], 2, false),
        click_case("slack 2, every edge 2px out", [98, 198, 302, 262], 2, true),
        click_case("slack 2, bottom 3px out", [150, 210, 200, 263], 2, false),
        boxed("slack 5 at origin", [0, 0, 55, 55], [0, 0, 50, 50], 5, true),
        boxed("slack 5 at origin, 6px out", [0, 0, 56, 50], [0, 0, 50, 50], 5, false),
        MatchCase {
            pred: ActionRecord::click(1),
            ..click_case("same element index", [0, 0, 1, 1], 0, true)
        },
        click_case("different index, same box", T, 0, true),
        click_case("nested child in parent", [120, 210, 180, 240], 0, true),
        boxed("parent for child", T, [120, 210, 180, 240], 0, false),
        MatchCase {
            pred: ActionRecord::long_press(0),
            truth: ActionRecord::long_press(1),
            ..click_case("long-press identical", T, 0, true)
        },
        MatchCase {
            pred: ActionRecord::long_press(0),
            truth: ActionRecord::long_press(1),
            ..click_case("long-press outside", [0, 0, 10, 10], 0, false)
        },
        MatchCase {
            pred: ActionRecord::long_press(0),
            ..click_case("long-press for click", T, 0, false)
        },
        MatchCase {
            truth: ActionRecord::long_press(1),
            ..click_case("click for long-press", T, 0, false)
        },
        MatchCase {
            pred: bare(Wait),
            ..click_case("wait for click", T, 0, false)
        },
        click_case("thin column inside", [200, 200, 201, 260], 0, true),
        click_case("slack 1, top 1px out", [150, 199, 200, 250], 1, true),
        boxed("single pixel, same", [5, 5, 5, 5], [5, 5, 5, 5], 0, true),
        boxed("single pixel, wider", [5, 5, 6, 5], [5, 5, 5, 5], 0, false),
        boxed("huge coordinates", [1, 1, 3_999_999_999, 3_999_999_999], [0, 0, 4_000_000_000, 4_000_000_000], 0, true),
        boxed("slack past the coordinate maximum", [0, 0, max, 10], [0, 0, max - 1, 10], 5, true),
        // text
        text("identical text", "las vegas", "las vegas", true),
        text("origin for destination", "Detroit", "Las Vegas", false),
        text("origin for destination in context", "flights to detroit", "flights to las vegas", false),
        text("superset at 2/3", "detroit las vegas", "las vegas", true),
        text("case folded", "LAS VEGAS", "las vegas", true),
        text("trailing punctuation", "las vegas!", "las vegas", true),
        text("plural single token", "sofa", "sofas", false),
        text("plural at exactly one half", "3 seater sofa", "3 seater sofas", true),
        text("plural at one third", "grey sofa", "grey sofas", false),
        text("one of three", "a b", "a c", false),
        text("two of six", "a b c d", "a b e f", false),
        text("two of four", "a b c", "a b d", true),
        text("half, prediction longer", "a b", "a", true),
        text("half, truth longer", "a", "a b", true),
        text("one third, truth longer", "a", "a b c", false),
        text("both empty", "", "", true),
        text("empty prediction", "", "hello", false),
        text("whitespace prediction, empty truth", "   ", "", true),
        text("reordered", "hello world", "world hello", true),
        text("duplicates collapse", "hello hello world", "hello world", true),
        text("two of three", "new york", "new york city", true),
        text("two of four, prediction longer", "new york city hotels", "new york", true),
        text("two of five", "new york city hotels cheap", "new york", false),
        text("comma", "weather, tomorrow", "weather tomorrow", true),
        text("parentheses", "(weather)", "weather", true),
        text("inner hyphen kept", "e-mail", "email", false),
        text("inner apostrophe kept", "don't stop", "dont stop", false),
        text("unicode case", "Café", "café", true),
        text("tab separator", "a\tb", "a b", true),
        text("three of five", "1 2 3 4", "1 2 3 5", true),
        text("three of nine", "1 2 3 4 5 6", "1 2 3 7 8 9", false),
        text("two of six digits", "1 2 3 4", "1 2 5 6", false),
        text("three of four", "x y z w", "x y z", true),
        text("punctuation only vs empty", "--", "", true),
        text("punctuation only vs word", "--", "a", false),
        text("one shared verb", "buy milk", "buy eggs", false),
        text("three of four, truth longer", "pizza near me", "pizza near me now", true),
        text("first half of a city", "las", "las vegas", true),
        text("reversed city with period", "vegas las", "Las Vegas.", true),
        pair("text for app", ActionRecord::input_text("chrome"), ActionRecord::open_app("chrome"), false),
        // open-app
        app("same app", "Chrome", "Chrome", true),
        app("lowercase app", "chrome", "Chrome", true),
        app("padded app", " Chrome ", "chrome", true),
        app("longer app name", "Chrome Beta", "Chrome", false),
        app("other app", "Gmail", "Chrome", false),
        app("uppercase app", "CHROME", "chrome", true),
        app("two-word app", "Google Maps", "google maps", true),
        app("partial app name at half overlap", "Maps", "Google Maps", false),
        app("empty app", "", "Chrome", false),
        app("app with period", "Chrome", "Chrome.", false),
        // empty specs
        pair("wait", bare(Wait), bare(Wait), true),
        pair("scroll up", bare(ScrollUp), bare(ScrollUp), true),
        pair("scroll up for down", bare(ScrollUp), bare(ScrollDown), false),
        pair("home for back", bare(NavigateHome), bare(NavigateBack), false),
        pair("back", bare(NavigateBack), bare(NavigateBack), true),
        pair("left for right", bare(ScrollLeft), bare(ScrollRight), false),
        pair("scroll right", bare(ScrollRight), bare(ScrollRight), true),
        pair("wait for home", bare(Wait), bare(NavigateHome), false),
        pair("app for text", ActionRecord::open_app("Chrome"), ActionRecord::input_text("Chrome"), false),
        pair("click for wait", ActionRecord::click(1), bare(Wait), false),
    ];
    v.shrink_to_fit();
    v
}

fn oracle_tokens(s: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut word = String::new();
    for c in s.chars().chain(std::iter::once(' ')) {
        if c.is_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let start = chars.iter().position(|c| c.is_alphanumeric());
            let end = chars.iter().rposition(|c| c.is_alphanumeric());
            if let (Some(a), Some(b)) = (start, end) {
                out.insert(chars[a..=b].iter().collect::<String>().to_lowercase());
            }
            word.clear();
        } else {
            word.push(c);
        }
    }
    out
}

/// Reference verdict written from the metric definitions alone.
pub fn reference_verdict(c: &MatchCase) -> bool {
    if c.pred.action_type() != c.truth.action_type() {
        return false;
    }
    let ty = c.truth.action_type();
    if ty == ActionType::Click || ty == ActionType::LongPress {
        let b = |i: usize| if i == 0 { c.pred_box } else { c.truth_box };
        let p = b(c.pred.target().unwrap());
        let t = b(c.truth.target().unwrap());
        let s = c.slack as i64;
        return p[0] >= t[0] - s && p[1] >= t[1] - s && p[2] <= t[2] + s && p[3] <= t[3] + s;
    }
    if ty == ActionType::InputText {
        let a = oracle_tokens(c.pred.text_value().unwrap());
        let b = oracle_tokens(c.truth.text_value().unwrap());
        let inter = a.intersection(&b).count();
        let union = a.union(&b).count();
        // index >= 1/2 as a rational; two empty sets count as equal
        return union == 0 || 2 * inter >= union;
    }
    if ty == ActionType::OpenApp {
        let norm = |s: &str| s.trim().to_lowercase();
        return norm(c.pred.text_value().unwrap()) == norm(c.truth.text_value().unwrap());
    }
    true
}

pub fn to_box(a: [i64; 4]) -> BoundingBox {
    BoundingBox::from_signed(a[0], a[1], a[2], a[3]).unwrap()
}

/// How the local test server answers.
#[derive(Debug, Clone, Copy)]
pub enum Reply {
    /// Answers like the grammar mock generator.
    Echo,
    Status(u16),
    Body(&'static str),
    /// Reads the request and never answers.
    Hang,
}

pub struct TestServer {
    pub url: String,
    pub requests: std::sync::Arc<std::sync::Mutex<Vec<serde_json::Value>>>,
}

fn read_request(stream: &mut std::net::TcpStream) -> Option<Vec<u8>> {
    use std::io::Read;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(p) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break p + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..header_end]).to_lowercase();
    let len: usize = head
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    while buf.len() < header_end + len {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    Some(buf[header_end..].to_vec())
}

/// Starts a one-thread-per-connection HTTP server on a free local port.
pub fn serve(reply: Reply) -> TestServer {
    use limac::controller::{GenerationRequest, MockGenerator, TextActionGenerator};
    use std::io::Write;
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let requests = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let log = requests.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let log = log.clone();
            std::thread::spawn(move || {
                let Some(body) = read_request(&mut stream) else { return };
                let value: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
                log.lock().unwrap().push(value.clone());
                let (status, payload) = match reply {
                    Reply::Echo => {
                        let req: GenerationRequest = serde_json::from_value(value).unwrap();
                        let completion = MockGenerator::grammar(0.0, 0).generate(&req).unwrap();
                        (200, serde_json::json!({ "completion": completion }).to_string())
                    }
                    Reply::Status(s) => (s, "{}".to_string()),
                    Reply::Body(b) => (200, b.to_string()),
                    Reply::Hang => {
                        std::thread::sleep(std::time::Duration::from_secs(30));
                        return;
                    }
                };
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
            });
        }
    });
    TestServer { url, requests }
}

/// A local address with nothing listening on it.
pub fn dead_endpoint() -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/generate")
}
