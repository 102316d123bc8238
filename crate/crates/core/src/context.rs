//! Retrieval-augmented prompt assembly.
//!
//! Subtitles form a bilingual query, a pluggable retriever returns passages
//! under a deadline, and the prompt is assembled as retrieved context, then
//! image, then subtitles. Retrieval never fails the pipeline: timeouts,
//! errors and empty results all degrade to an empty context.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

/// Joins the English and Chinese parts of a query.
pub const QUERY_SEPARATOR: &str = " ⟂ ";
pub const MAX_PASSAGES: usize = 3;
/// Passages are cut to this many characters before assembly.
pub const MAX_PASSAGE_CHARS: usize = 512;
/// Slack allowed past the deadline for the retrieve call itself to return.
pub const DEADLINE_GRACE: Duration = Duration::from_millis(50);
pub const DEFAULT_DEADLINE_MS: u64 = 1500;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("both subtitles are empty")]
    EmptySubtitles,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("retrieval timed out")]
    Timeout,
    #[error("retrieval backend failed: {0}")]
    Backend(String),
}

/// Bilingual query: trimmed English and Chinese subtitles joined by
/// [`QUERY_SEPARATOR`], or the single non-empty one.
pub fn build_query(en_text: &str, zh_text: &str) -> Result<String, QueryError> {
    match (en_text.trim(), zh_text.trim()) {
        ("", "") => Err(QueryError::EmptySubtitles),
        (en, "") => Ok(en.to_string()),
        ("", zh) => Ok(zh.to_string()),
        (en, zh) => Ok(format!("{en}{QUERY_SEPARATOR}{zh}")),
    }
}

/// A search backend. Implementations must honour `deadline` and must not
/// touch pipeline state.
pub trait RetrieverClient: Send + Sync {
    fn query(&self, text: &str, deadline: Duration) -> Result<Vec<String>, RetrievalError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievedContext {
    pub passages: Vec<String>,
    pub degraded: bool,
    pub latency_ms: u64,
}

impl RetrievedContext {
    pub fn empty() -> Self {
        RetrievedContext { passages: Vec::new(), degraded: true, latency_ms: 0 }
    }
}

fn truncate_chars(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => s[..i].to_string(),
        None => s.to_string(),
    }
}

/// Queries `client` on a worker thread and waits at most `deadline_ms`.
///
/// A late, failing or empty answer yields an empty, degraded context. A
/// `deadline_ms` of zero is treated as an immediate timeout.
pub fn retrieve(client: Arc<dyn RetrieverClient>, query: &str, deadline_ms: u64) -> RetrievedContext {
    let start = Instant::now();
    if deadline_ms == 0 {
        return RetrievedContext::empty();
    }
    let deadline = Duration::from_millis(deadline_ms);
    let (tx, rx) = mpsc::channel();
    let text = query.to_string();
    let spawned = thread::Builder::new().name("retriever".into()).spawn(move || {
        // the receiver may have given up already
        let _ = tx.send(client.query(&text, deadline));
    });
    let outcome = match spawned {
        Ok(_) => rx.recv_timeout(deadline).unwrap_or(Err(RetrievalError::Timeout)),
        Err(e) => Err(RetrievalError::Backend(e.to_string())),
    };
    let latency_ms = start.elapsed().as_millis() as u64;
    match outcome {
        Ok(passages) if !passages.is_empty() => RetrievedContext {
            passages: passages.iter().take(MAX_PASSAGES).map(|p| truncate_chars(p, MAX_PASSAGE_CHARS)).collect(),
            degraded: false,
            latency_ms,
        },
        _ => RetrievedContext { passages: Vec::new(), degraded: true, latency_ms },
    }
}

/// Retrieved context, image handle and subtitles, in assembly order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub retrieved: RetrievedContext,
    pub image_ref: String,
    pub en_text: String,
    pub zh_text: String,
}

pub fn assemble_prompt(ctx: RetrievedContext, image_ref: &str, en_text: &str, zh_text: &str) -> Prompt {
    Prompt {
        retrieved: ctx,
        image_ref: image_ref.to_string(),
        en_text: en_text.to_string(),
        zh_text: zh_text.to_string(),
    }
}

impl Prompt {
    /// Text form of the prompt:
    ///
    /// ```text
    /// [R1] first passage
    /// [R2] second passage
    /// <image>{image_ref}</image>
    /// [EN] english subtitle
    /// [ZH] chinese subtitle
    /// ```
    ///
    /// Lines are separated by `\n`; there is no trailing newline.
    pub fn flatten(&self) -> String {
        let mut lines: Vec<String> =
            self.retrieved.passages.iter().enumerate().map(|(i, p)| format!("[R{}] {}", i + 1, p)).collect();
        lines.push(format!("<image>{}</image>", self.image_ref));
        lines.push(format!("[EN] {}", self.en_text));
        lines.push(format!("[ZH] {}", self.zh_text));
        lines.join("\n")
    }
}

/// Retriever backed by a local fixture file: JSON lines of
/// `{"query_contains": "...", "passages": ["...", ...]}`. The first record
/// whose substring occurs in the query answers it; no match returns no
/// passages.
#[derive(Debug, Clone, Default)]
pub struct FixtureRetriever {
    entries: Vec<FixtureEntry>,
    latency: Duration,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureEntry {
    query_contains: String,
    passages: Vec<String>,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture I/O: {0}")]
    Io(#[from] io::Error),
    #[error("fixture line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

impl FixtureRetriever {
    pub fn from_text(text: &str) -> Result<Self, FixtureError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| FixtureError::Malformed { line: i + 1, msg: e.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(FixtureRetriever { entries, latency: Duration::ZERO })
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Simulated backend latency.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }
}

impl RetrieverClient for FixtureRetriever {
    fn query(&self, text: &str, deadline: Duration) -> Result<Vec<String>, RetrievalError> {
        if self.latency >= deadline {
            thread::sleep(deadline);
            return Err(RetrievalError::Timeout);
        }
        thread::sleep(self.latency);
        Ok(self
            .entries
            .iter()
            .find(|e| text.contains(&e.query_contains))
            .map(|e| e.passages.clone())
            .unwrap_or_default())
    }
}

/// A backend that never answers in time.
#[derive(Debug, Clone, Copy, Default)]
pub struct TimeoutRetriever;

impl RetrieverClient for TimeoutRetriever {
    fn query(&self, _text: &str, deadline: Duration) -> Result<Vec<String>, RetrievalError> {
        thread::sleep(deadline + Duration::from_millis(20));
        Err(RetrievalError::Timeout)
    }
}

/// A backend that always errors.
#[derive(Debug, Clone, Copy, Default)]
pub struct FailingRetriever;

impl RetrieverClient for FailingRetriever {
    fn query(&self, _text: &str, _deadline: Duration) -> Result<Vec<String>, RetrievalError> {
        Err(RetrievalError::Backend("unavailable".into()))
    }
}

/// Replaces each character of `text` with U+FFFD with probability `rate`,
/// emulating OCR misreads.
pub fn corrupt_chars<R: Rng + ?Sized>(text: &str, rate: f64, rng: &mut R) -> String {
    text.chars().map(|c| if rng.random::<f64>() < rate { '\u{FFFD}' } else { c }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<String>);

    impl RetrieverClient for Fixed {
        fn query(&self, _: &str, _: Duration) -> Result<Vec<String>, RetrievalError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn query_building() {
        assert_eq!(build_query("A", "B").unwrap(), "A ⟂ B");
        assert_eq!(build_query("  A ", "").unwrap(), "A");
        assert_eq!(build_query("", " 中文 ").unwrap(), "中文");
        assert_eq!(build_query(" ", "\t"), Err(QueryError::EmptySubtitles));
        let q = build_query(" A ", " B ").unwrap();
        assert_eq!(build_query(q.trim(), "").unwrap(), q);
    }

    #[test]
    fn keeps_top_three() {
        let client = Arc::new(Fixed((1..=5).map(|i| format!("p{i}")).collect()));
        let ctx = retrieve(client, "q", 1000);
        assert_eq!(ctx.passages, vec!["p1", "p2", "p3"]);
        assert!(!ctx.degraded);
    }

    #[test]
    fn long_passages_are_truncated() {
        let client = Arc::new(Fixed(vec!["字".repeat(600)]));
        let ctx = retrieve(client, "q", 1000);
        assert_eq!(ctx.passages[0].chars().count(), MAX_PASSAGE_CHARS);
    }

    #[test]
    fn timeout_degrades_within_grace() {
        let start = Instant::now();
        let ctx = retrieve(Arc::new(TimeoutRetriever), "q", 30);
        assert!(ctx.degraded && ctx.passages.is_empty());
        assert!(start.elapsed() <= Duration::from_millis(30) + DEADLINE_GRACE);
    }

    #[test]
    fn errors_and_empty_results_degrade() {
        assert!(retrieve(Arc::new(FailingRetriever), "q", 100).degraded);
        assert!(retrieve(Arc::new(Fixed(vec![])), "q", 100).degraded);
        assert!(retrieve(Arc::new(Fixed(vec!["x".into()])), "q", 0).degraded);
    }

    #[test]
    fn fixture_lookup() {
        let f = FixtureRetriever::from_text(
            "{\"query_contains\": \"flood\", \"passages\": [\"a\", \"b\"]}\n\n{\"query_contains\": \"\", \"passages\": [\"any\"]}\n",
        )
        .unwrap();
        assert_eq!(f.query("river flood ⟂ 洪水", Duration::from_secs(1)).unwrap(), vec!["a", "b"]);
        assert_eq!(f.query("other", Duration::from_secs(1)).unwrap(), vec!["any"]);
        assert!(matches!(FixtureRetriever::from_text("{bad"), Err(FixtureError::Malformed { line: 1, .. })));
        let slow = FixtureRetriever::from_text("").unwrap().with_latency(Duration::from_secs(5));
        assert!(retrieve(Arc::new(slow), "x", 20).degraded);
    }

    #[test]
    fn prompt_order() {
        let empty = assemble_prompt(RetrievedContext::empty(), "img-1", "en", "zh");
        assert_eq!(empty.flatten(), "<image>img-1</image>\n[EN] en\n[ZH] zh");
        let ctx = RetrievedContext {
            passages: vec!["one".into(), "two".into(), "three".into()],
            degraded: false,
            latency_ms: 3,
        };
        let p = assemble_prompt(ctx, "img-1", "en", "zh");
        let flat = p.flatten();
        assert!(flat.starts_with("[R1] one\n[R2] two\n[R3] three\n<image>"));
        assert_eq!(flat, p.clone().flatten());
    }

    #[test]
    fn corruption_rate_extremes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_chars("中文字幕", 0.0, &mut rng), "中文字幕");
        assert_eq!(corrupt_chars("中文", 1.0, &mut rng), "\u{FFFD}\u{FFFD}");
    }
}
