//! Chat-style remote state classifier and its fixture-replay stand-in.
//!
//! The remote backend posts a chat-completions-style body with the system
//! prompt plus the two distance plots as PNG data URLs, and parses the four
//! state words out of the reply. Endpoint and key come from the
//! `BFA_VLM_ENDPOINT` / `BFA_VLM_KEY` environment variables. Tests never
//! touch the network: the fixture client replays recorded transcripts.

use std::io::Cursor;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::classify::{EpisodeContext, StateClassifier};
use super::plot::render_scatter_plot;
use crate::error::{Error, Result};
use crate::sim::{ArmState, Image};

pub const ENDPOINT_ENV: &str = "BFA_VLM_ENDPOINT";
pub const KEY_ENV: &str = "BFA_VLM_KEY";
pub const DEFAULT_MODEL: &str = "gpt-4o";
const MAX_ATTEMPTS: usize = 3;

pub const SYSTEM_PROMPT: &str = "You are labeling the state of a dual-arm robot. \
You are given two scatter plots, one per arm, showing the distance from that arm's \
gripper to its resting position over time (x: frame index, y: distance). The user \
message names the current frame. Classify what each arm is doing AT that frame as \
exactly one of: holding (parked near rest), approaching (moving away from rest \
toward the work area), operating (stationary at the work area, far from rest), or \
returning (moving back toward rest). Answer with exactly one line in the form \
`left: <state>, right: <state>` and nothing else.";

/// One outbound request: prompt, user text and PNG-encoded attachments.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user_text: String,
    pub images_png: Vec<Vec<u8>>,
}

/// Anything that can answer a chat request with a text reply. Implementors
/// must be shareable across annotation workers.
pub trait ChatClient: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String>;
}

/// Remote chat-completions backend over HTTP.
pub struct HttpVlmClient {
    endpoint: String,
    key: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpVlmClient {
    pub fn new(endpoint: String, key: String, model: String) -> HttpVlmClient {
        let agent = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_secs(60))
            .build();
        HttpVlmClient { endpoint, key, model, agent }
    }

    /// Configure from `BFA_VLM_ENDPOINT` / `BFA_VLM_KEY`.
    pub fn from_env() -> Result<HttpVlmClient> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| Error::VlmNotConfigured(format!("set {ENDPOINT_ENV} to the chat completions URL")))?;
        let key = std::env::var(KEY_ENV)
            .map_err(|_| Error::VlmNotConfigured(format!("set {KEY_ENV} to the API key")))?;
        Ok(HttpVlmClient::new(endpoint, key, DEFAULT_MODEL.to_string()))
    }

    pub fn model(&self) -> &str {
        &self.model
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: serde_json::Value,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReplyMessage,
}

#[derive(Deserialize)]
struct WireReplyMessage {
    content: String,
}

impl ChatClient for HttpVlmClient {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let mut user_content = vec![serde_json::json!({"type": "text", "text": req.user_text})];
        for png in &req.images_png {
            let url = format!("data:image/png;base64,{}", B64.encode(png));
            user_content.push(serde_json::json!({"type": "image_url", "image_url": {"url": url}}));
        }
        let body = serde_json::json!({
            "model": req.model,
            "messages": [
                WireMessage { role: "system", content: serde_json::Value::String(req.system.clone()) },
                WireMessage { role: "user", content: serde_json::Value::Array(user_content) },
            ],
        });
        let resp = self
            .agent
            .post(&self.endpoint)
            .set("Authorization", &format!("Bearer {}", self.key))
            .set("Content-Type", "application/json")
            .send_string(&body.to_string())
            .map_err(|e| Error::VlmTransport { frame: 0, attempts: 1, reason: e.to_string() })?;
        let parsed: WireResponse = resp
            .into_json()
            .map_err(|e| Error::VlmTransport { frame: 0, attempts: 1, reason: e.to_string() })?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| Error::VlmTransport { frame: 0, attempts: 1, reason: "empty choices".into() })
    }
}

/// One recorded exchange in a fixture transcript. `expected_*` document the
/// states the transcript author intended; tests assert against them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureExchange {
    pub frame: usize,
    pub response: String,
    #[serde(default)]
    pub expected_left: Option<String>,
    #[serde(default)]
    pub expected_right: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureTranscript {
    exchanges: Vec<FixtureExchange>,
}

/// Replays a recorded transcript in request order.
pub struct FixtureClient {
    exchanges: Vec<FixtureExchange>,
    cursor: AtomicUsize,
}

impl FixtureClient {
    pub fn new(exchanges: Vec<FixtureExchange>) -> FixtureClient {
        FixtureClient { exchanges, cursor: AtomicUsize::new(0) }
    }

    pub fn from_json(text: &str) -> Result<FixtureClient> {
        let t: FixtureTranscript = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad fixture transcript: {e}")))?;
        Ok(FixtureClient::new(t.exchanges))
    }

    pub fn load(path: &std::path::Path) -> Result<FixtureClient> {
        FixtureClient::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(exchanges: &[FixtureExchange]) -> String {
        serde_json::to_string_pretty(&FixtureTranscript { exchanges: exchanges.to_vec() }).unwrap()
    }

    pub fn exchanges(&self) -> &[FixtureExchange] {
        &self.exchanges
    }
}

impl ChatClient for FixtureClient {
    fn complete(&self, _req: &ChatRequest) -> Result<String> {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        self.exchanges
            .get(i)
            .map(|e| e.response.clone())
            .ok_or_else(|| Error::VlmTransport {
                frame: 0,
                attempts: 1,
                reason: format!("fixture transcript exhausted after {} exchanges", self.exchanges.len()),
            })
    }
}

/// Pull `left: <state>, right: <state>` out of a reply, case-insensitive.
/// Falls back to the first two state words in reading order.
pub fn parse_state_reply(text: &str) -> Option<(ArmState, ArmState)> {
    let lower = text.to_ascii_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .collect();
    let mut left = None;
    let mut right = None;
    let mut pending: Option<char> = None;
    let mut in_order = Vec::new();
    for w in &words {
        if *w == "left" {
            pending = Some('l');
            continue;
        }
        if *w == "right" {
            pending = Some('r');
            continue;
        }
        if let Some(state) = ArmState::from_str_loose(w) {
            match pending.take() {
                Some('l') => left = left.or(Some(state)),
                Some('r') => right = right.or(Some(state)),
                _ => in_order.push(state),
            }
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Some((l, r)),
        _ => {
            if in_order.len() >= 2 {
                Some((in_order[0], in_order[1]))
            } else {
                None
            }
        }
    }
}

/// Encode a grayscale [`Image`] as an 8-bit PNG.
pub fn encode_png(img: &Image) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    {
        let mut enc = png::Encoder::new(&mut out, img.w as u32, img.h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header");
        let bytes: Vec<u8> = img
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer.write_image_data(&bytes).expect("png payload");
    }
    out.into_inner()
}

/// State classifier backed by a chat client: renders both arms' plots,
/// sends them with the frame index, parses the reply, and retries malformed
/// answers up to three attempts before surfacing an error.
pub struct VlmStateClassifier {
    client: Arc<dyn ChatClient>,
    model: String,
    calls: usize,
    backend: &'static str,
}

impl VlmStateClassifier {
    pub fn new(client: Arc<dyn ChatClient>, model: String) -> VlmStateClassifier {
        VlmStateClassifier { client, model, calls: 0, backend: "vlm" }
    }

    pub fn fixture(client: FixtureClient) -> VlmStateClassifier {
        VlmStateClassifier {
            client: Arc::new(client),
            model: DEFAULT_MODEL.to_string(),
            calls: 0,
            backend: "fixture",
        }
    }
}

impl StateClassifier for VlmStateClassifier {
    fn classify(&mut self, ctx: &EpisodeContext, frame: usize) -> Result<(ArmState, ArmState)> {
        self.calls += 1;
        let left_plot = encode_png(&render_scatter_plot(&ctx.trace.left));
        let right_plot = encode_png(&render_scatter_plot(&ctx.trace.right));
        let req = ChatRequest {
            model: self.model.clone(),
            system: SYSTEM_PROMPT.to_string(),
            user_text: format!(
                "Current frame: {frame} of {}. First image: left arm. Second image: right arm.",
                ctx.len()
            ),
            images_png: vec![left_plot, right_plot],
        };
        let mut last_raw = String::new();
        let mut last_transport: Option<String> = None;
        for _ in 0..MAX_ATTEMPTS {
            match self.client.complete(&req) {
                Ok(text) => {
                    if let Some(states) = parse_state_reply(&text) {
                        return Ok(states);
                    }
                    last_raw = text;
                }
                Err(e) => last_transport = Some(e.to_string()),
            }
        }
        if let Some(reason) = last_transport {
            Err(Error::VlmTransport { frame, attempts: MAX_ATTEMPTS, reason })
        } else {
            Err(Error::VlmUnparseable { frame, raw: last_raw })
        }
    }

    fn calls(&self) -> usize {
        self.calls
    }

    fn backend_name(&self) -> &'static str {
        self.backend
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labeled_reply() {
        let (l, r) = parse_state_reply("Left: operating, Right: holding").unwrap();
        assert_eq!(l, ArmState::Operating);
        assert_eq!(r, ArmState::Holding);
    }

    #[test]
    fn parses_reversed_order_and_noise() {
        let (l, r) =
            parse_state_reply("the right arm is RETURNING while the left arm is APPROACHING").unwrap();
        assert_eq!(l, ArmState::Approaching);
        assert_eq!(r, ArmState::Returning);
    }

    #[test]
    fn falls_back_to_reading_order() {
        let (l, r) = parse_state_reply("approaching then holding").unwrap();
        assert_eq!(l, ArmState::Approaching);
        assert_eq!(r, ArmState::Holding);
    }

    #[test]
    fn rejects_gibberish() {
        assert!(parse_state_reply("no states here").is_none());
        assert!(parse_state_reply("left: confused").is_none());
    }

    #[test]
    fn png_encoding_wellformed() {
        let img = render_scatter_plot(&[0.1, 0.2, 0.3]);
        let png = encode_png(&img);
        assert_eq!(&png[1..4], b"PNG");
    }

    #[test]
    fn fixture_client_replays_in_order() {
        let fc = FixtureClient::new(vec![
            FixtureExchange {
                frame: 0,
                response: "left: holding, right: holding".into(),
                expected_left: None,
                expected_right: None,
            },
            FixtureExchange {
                frame: 5,
                response: "left: approaching, right: holding".into(),
                expected_left: None,
                expected_right: None,
            },
        ]);
        let req = ChatRequest {
            model: "m".into(),
            system: "s".into(),
            user_text: "u".into(),
            images_png: vec![],
        };
        assert!(fc.complete(&req).unwrap().contains("holding"));
        assert!(fc.complete(&req).unwrap().contains("approaching"));
        assert!(fc.complete(&req).is_err());
    }
}
