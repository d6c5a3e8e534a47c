//! Adapters to external judge and reward services.
//!
//! Judges speak the OpenAI-compatible chat-completions protocol with the
//! frame embedded as a base64 data URL. Reward models expose a single-score
//! endpoint: `POST {image_b64, prompt}` answered by `{score: number}`. Every
//! successful reply is written to a [`Journal`] before it is used, so runs
//! can be resumed and replayed offline.

mod journal;
mod parse;
mod pool;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use journal::{Cached, EntryKind, Journal, JournalEntry};
pub use parse::{lexical_caption_attributes, match_action_word, parse_caption_reply, parse_label};
pub use pool::{parallel_map, Permit, Semaphore};

use crate::digest::{fields_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::taxonomy::{Action, Attribute, Ethnicity, Gender, Label};

pub const DEFAULT_GENDER_INSTRUCTION: &str = "Look at the main person in this image. \
What is their gender? Answer with exactly one word from this list: man, woman. \
If you cannot tell, answer: unidentifiable.";

pub const DEFAULT_ETHNICITY_INSTRUCTION: &str = "Look at the main person in this image. \
Which ethnicity group do they most likely belong to? Answer with exactly one option from \
this list: White, Black, Indian, East Asian, Southeast Asian, Middle Eastern, Latino. \
If you cannot tell, answer: unidentifiable.";

pub const DEFAULT_CAPTION_INSTRUCTION: &str = "Read the image caption below and extract the \
main person's gender, ethnicity and action. Reply with one JSON object with the keys \
\"gender\" (man, woman or null), \"ethnicity\" (White, Black, Indian, East Asian, Southeast \
Asian, Middle Eastern, Latino or null) and \"action\" (the base form of one verb from this \
list, or null: bake, bike, call, clean, climb, cook, cough, cry, drink, drive, eat, exercise, \
fish, hit, jump, kick, kneel, laugh, lift, paint, pick, pitch, pray, read, ride, row, run, \
shop, shout, sit, skate, sleep, smile, stand, stare, stretch, study, sweep, throw, walk, wash, \
work). Use null for anything the caption does not state.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instructions {
    #[serde(default = "default_gender_instruction")]
    pub gender: String,
    #[serde(default = "default_ethnicity_instruction")]
    pub ethnicity: String,
    #[serde(default = "default_caption_instruction")]
    pub caption: String,
}

fn default_gender_instruction() -> String {
    DEFAULT_GENDER_INSTRUCTION.into()
}
fn default_ethnicity_instruction() -> String {
    DEFAULT_ETHNICITY_INSTRUCTION.into()
}
fn default_caption_instruction() -> String {
    DEFAULT_CAPTION_INSTRUCTION.into()
}

impl Default for Instructions {
    fn default() -> Self {
        Instructions {
            gender: default_gender_instruction(),
            ethnicity: default_ethnicity_instruction(),
            caption: default_caption_instruction(),
        }
    }
}

impl Instructions {
    pub fn for_attribute(&self, attribute: Attribute) -> &str {
        match attribute {
            Attribute::Gender => &self.gender,
            Attribute::Ethnicity => &self.ethnicity,
        }
    }
}

/// Decoding parameters sent with every judge request. Deterministic by
/// default and part of the cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_max_tokens() -> u32 {
    64
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            seed: Some(0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// OpenAI-compatible chat completions over HTTP.
    #[default]
    Chat,
    /// Local keyword extractor; only valid for caption attribute extraction.
    Lexical,
}

fn default_max_concurrent() -> usize {
    4
}
fn default_retry_budget() -> u32 {
    3
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_retry_backoff_ms() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub judge_id: String,
    #[serde(default)]
    pub backend: Backend,
    /// Full URL of the chat-completions endpoint.
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub instructions: Instructions,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retry_backoff_ms")]
    pub retry_backoff_ms: u64,
}

impl JudgeConfig {
    pub fn chat(judge_id: &str, endpoint: &str, model_name: &str) -> JudgeConfig {
        JudgeConfig {
            judge_id: judge_id.into(),
            backend: Backend::Chat,
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            api_key_env: None,
            instructions: Instructions::default(),
            decoding: Decoding::default(),
            max_concurrent: default_max_concurrent(),
            retry_budget: default_retry_budget(),
            timeout_ms: default_timeout_ms(),
            retry_backoff_ms: default_retry_backoff_ms(),
        }
    }

    pub fn lexical(judge_id: &str) -> JudgeConfig {
        JudgeConfig {
            backend: Backend::Lexical,
            ..JudgeConfig::chat(judge_id, "", "lexical")
        }
    }

    fn instruction_digest(&self, instruction: &str) -> String {
        let decoding = serde_json::to_string(&self.decoding).unwrap_or_default();
        fields_digest([instruction, decoding.as_str()])
    }
}

/// Checks that judge ids are unique and that annotation has at least one judge.
pub fn validate_judges(judges: &[JudgeConfig]) -> Result<()> {
    if judges.is_empty() {
        return Err(Error::Config("at least one judge is required".into()));
    }
    let mut ids: Vec<&str> = judges.iter().map(|j| j.judge_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate judge_id `{}`", w[0])));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub reward_id: String,
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retry_backoff_ms")]
    pub retry_backoff_ms: u64,
}

impl RewardConfig {
    pub fn new(reward_id: &str, endpoint: &str) -> RewardConfig {
        RewardConfig {
            reward_id: reward_id.into(),
            endpoint: endpoint.into(),
            api_key_env: None,
            max_concurrent: default_max_concurrent(),
            retry_budget: default_retry_budget(),
            timeout_ms: default_timeout_ms(),
            retry_backoff_ms: default_retry_backoff_ms(),
        }
    }
}

/// An image loaded into memory with its content digest.
#[derive(Debug, Clone)]
pub struct FrameImage {
    /// Reference recorded in verdicts; usually a path relative to a root.
    pub reference: String,
    pub bytes: Arc<[u8]>,
    pub digest: String,
    pub mime: &'static str,
}

fn sniff_mime(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some("image/png")
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Some("image/jpeg")
    } else if bytes.starts_with(b"GIF87a") || bytes.starts_with(b"GIF89a") {
        Some("image/gif")
    } else if bytes.len() >= 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        Some("image/webp")
    } else if bytes.starts_with(b"BM") {
        Some("image/bmp")
    } else {
        None
    }
}

impl FrameImage {
    pub fn from_bytes(reference: impl Into<String>, bytes: Vec<u8>) -> Result<FrameImage> {
        let reference = reference.into();
        let mime = sniff_mime(&bytes)
            .ok_or_else(|| Error::Input(format!("{reference}: not a recognized image file")))?;
        Ok(FrameImage {
            digest: sha256_hex(&bytes),
            bytes: bytes.into(),
            reference,
            mime,
        })
    }

    /// Loads `root/relative`, recording `relative` as the reference.
    pub fn load(root: &Path, relative: &str) -> Result<FrameImage> {
        let path = root.join(relative);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        FrameImage::from_bytes(relative, bytes)
    }

    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.mime, self.base64())
    }

    pub fn base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.bytes)
    }
}

/// One judge's classification of one frame for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub judge_id: String,
    pub frame_ref: String,
    pub attribute: Attribute,
    pub raw_text: String,
    pub label: Label,
    #[serde(skip)]
    pub latency_ms: u64,
    #[serde(skip)]
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeSource {
    CaptionLlm,
    ImageVlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionAttributes {
    pub gender: Option<Gender>,
    pub ethnicity: Option<Ethnicity>,
    pub action: Option<Action>,
    pub source: AttributeSource,
}

impl CaptionAttributes {
    pub fn empty(source: AttributeSource) -> CaptionAttributes {
        CaptionAttributes {
            gender: None,
            ethnicity: None,
            action: None,
            source,
        }
    }
}

struct HttpService {
    service: String,
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry_budget: u32,
    backoff: Duration,
    permits: Semaphore,
}

fn read_api_key(var: Option<&str>) -> Result<Option<String>> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| Error::Config(format!("environment variable `{name}` is not set"))),
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl HttpService {
    fn new(
        service: &str,
        endpoint: &str,
        api_key_env: Option<&str>,
        timeout_ms: u64,
        retry_budget: u32,
        backoff_ms: u64,
        max_concurrent: usize,
    ) -> Result<HttpService> {
        if endpoint.is_empty() {
            return Err(Error::Config(format!("`{service}` has no endpoint")));
        }
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build();
        Ok(HttpService {
            service: service.into(),
            endpoint: endpoint.into(),
            api_key: read_api_key(api_key_env)?,
            agent: config.into(),
            retry_budget,
            backoff: Duration::from_millis(backoff_ms),
            permits: Semaphore::new(max_concurrent),
        })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, Attempt> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            408 | 429 | 500..=599 => Err(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Attempt::Fatal(format!("HTTP {status}: {}", truncate(&text, 200)))),
        }
    }

    /// POSTs `body`, retrying transient failures up to the retry budget.
    /// Returns the response body and the latency of the successful attempt.
    fn post(&self, body: &Value, subject: &str) -> Result<(String, u64)> {
        let _permit = self.permits.acquire();
        let mut last = String::new();
        for attempt in 0..=self.retry_budget {
            if attempt > 0 {
                std::thread::sleep((self.backoff * 2u32.pow(attempt - 1)).min(Duration::from_secs(5)));
            }
            let start = Instant::now();
            match self.attempt(body) {
                Ok(text) => return Ok((text, start.elapsed().as_millis() as u64)),
                Err(Attempt::Retry(reason)) => {
                    log::debug!("{}: attempt {} failed: {reason}", self.service, attempt + 1);
                    last = reason;
                }
                Err(Attempt::Fatal(reason)) => {
                    last = reason;
                    break;
                }
            }
        }
        Err(Error::JudgeUnavailable {
            judge_id: self.service.clone(),
            frame_ref: subject.into(),
            reason: last,
        })
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Client for one configured judge.
pub struct JudgeClient {
    config: JudgeConfig,
    http: Option<HttpService>,
    journal: Arc<Journal>,
}

impl JudgeClient {
    pub fn new(config: JudgeConfig, journal: Arc<Journal>) -> Result<JudgeClient> {
        let http = match config.backend {
            Backend::Chat => Some(HttpService::new(
                &config.judge_id,
                &config.endpoint,
                config.api_key_env.as_deref(),
                config.timeout_ms,
                config.retry_budget,
                config.retry_backoff_ms,
                config.max_concurrent,
            )?),
            Backend::Lexical => None,
        };
        Ok(JudgeClient {
            config,
            http,
            journal,
        })
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.config
    }

    pub fn judge_id(&self) -> &str {
        &self.config.judge_id
    }

    pub fn verdict_key(&self, frame: &FrameImage, attribute: Attribute) -> String {
        let instruction = self.config.instructions.for_attribute(attribute);
        fields_digest([
            "verdict",
            self.config.judge_id.as_str(),
            self.config.model_name.as_str(),
            attribute.as_str(),
            frame.digest.as_str(),
            self.config.instruction_digest(instruction).as_str(),
        ])
    }

    fn chat(&self, instruction: &str, image: Option<&FrameImage>, subject: &str) -> Result<(String, u64)> {
        let http = self.http.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "judge `{}` has no chat backend",
                self.config.judge_id
            ))
        })?;
        let mut content = vec![json!({"type": "text", "text": instruction})];
        if let Some(image) = image {
            content.push(json!({"type": "image_url", "image_url": {"url": image.data_url()}}));
        }
        let mut body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": content}],
            "temperature": self.config.decoding.temperature,
            "max_tokens": self.config.decoding.max_tokens,
        });
        if let Some(seed) = self.config.decoding.seed {
            body["seed"] = json!(seed);
        }
        let (text, latency) = http.post(&body, subject)?;
        let reply = serde_json::from_str::<Value>(&text)
            .ok()
            .and_then(|v| {
                v.pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_owned)
            })
            .ok_or_else(|| Error::ServiceContract {
                service: self.config.judge_id.clone(),
                reason: format!("no choices[0].message.content in reply: {}", truncate(&text, 200)),
            })?;
        Ok((reply, latency))
    }

    pub fn classify_frame(&self, frame: &FrameImage, attribute: Attribute) -> Result<JudgeVerdict> {
        let key = self.verdict_key(frame, attribute);
        let instruction = self.config.instructions.for_attribute(attribute);
        let got = self.journal.get_or_fetch(&key, || {
            let (reply, latency_ms) = self.chat(instruction, Some(frame), &frame.reference)?;
            Ok(JournalEntry {
                key: key.clone(),
                kind: EntryKind::Verdict,
                service: self.config.judge_id.clone(),
                subject: frame.reference.clone(),
                reply,
                latency_ms,
            })
        })?;
        Ok(JudgeVerdict {
            judge_id: self.config.judge_id.clone(),
            frame_ref: frame.reference.clone(),
            attribute,
            label: parse_label(attribute, &got.entry.reply),
            raw_text: got.entry.reply,
            latency_ms: got.entry.latency_ms,
            cached: got.cached,
        })
    }

    pub fn extract_caption_attributes(&self, caption: &str) -> Result<CaptionAttributes> {
        if caption.trim().is_empty() {
            return Err(Error::Input("caption is empty".into()));
        }
        if self.config.backend == Backend::Lexical {
            return Ok(lexical_caption_attributes(caption));
        }
        let instruction = format!("{}\n\nCaption: {caption}", self.config.instructions.caption);
        let caption_digest = sha256_hex(caption);
        let key = fields_digest([
            "caption",
            self.config.judge_id.as_str(),
            self.config.model_name.as_str(),
            caption_digest.as_str(),
            self.config.instruction_digest(&self.config.instructions.caption).as_str(),
        ]);
        let got = self.journal.get_or_fetch(&key, || {
            let (reply, latency_ms) = self.chat(&instruction, None, &caption_digest)?;
            Ok(JournalEntry {
                key: key.clone(),
                kind: EntryKind::Caption,
                service: self.config.judge_id.clone(),
                subject: caption_digest.clone(),
                reply,
                latency_ms,
            })
        })?;
        Ok(parse_caption_reply(&got.entry.reply, AttributeSource::CaptionLlm))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardScore {
    pub value: f64,
    pub cached: bool,
}

/// Client for a single-score reward endpoint.
pub struct RewardClient {
    config: RewardConfig,
    http: HttpService,
    journal: Arc<Journal>,
}

fn parse_score(service: &str, body: &str) -> Result<f64> {
    let contract = |reason: String| Error::ServiceContract {
        service: service.into(),
        reason,
    };
    let value: Value = serde_json::from_str(body)
        .map_err(|e| contract(format!("reply is not JSON ({e}): {}", truncate(body, 200))))?;
    value
        .get("score")
        .and_then(Value::as_f64)
        .filter(|s| s.is_finite())
        .ok_or_else(|| contract(format!("reply has no finite numeric `score`: {}", truncate(body, 200))))
}

impl RewardClient {
    pub fn new(config: RewardConfig, journal: Arc<Journal>) -> Result<RewardClient> {
        let http = HttpService::new(
            &config.reward_id,
            &config.endpoint,
            config.api_key_env.as_deref(),
            config.timeout_ms,
            config.retry_budget,
            config.retry_backoff_ms,
            config.max_concurrent,
        )?;
        Ok(RewardClient {
            config,
            http,
            journal,
        })
    }

    pub fn config(&self) -> &RewardConfig {
        &self.config
    }

    /// Raw reward for an (image, prompt) pair, unmodified.
    pub fn score_image(&self, image: &FrameImage, prompt: &str) -> Result<RewardScore> {
        let key = fields_digest([
            "reward",
            self.config.reward_id.as_str(),
            image.digest.as_str(),
            sha256_hex(prompt).as_str(),
        ]);
        let got = self.journal.get_or_fetch(&key, || {
            let body = json!({"image_b64": image.base64(), "prompt": prompt});
            let (reply, latency_ms) = self.http.post(&body, &image.reference)?;
            parse_score(&self.config.reward_id, &reply)?;
            Ok(JournalEntry {
                key: key.clone(),
                kind: EntryKind::Reward,
                service: self.config.reward_id.clone(),
                subject: image.reference.clone(),
                reply,
                latency_ms,
            })
        })?;
        Ok(RewardScore {
            value: parse_score(&self.config.reward_id, &got.entry.reply)?,
            cached: got.cached,
        })
    }
}
