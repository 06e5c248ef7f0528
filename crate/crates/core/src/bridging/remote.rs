//! Chat-completion backend for targeted modification.
//!
//! Each request carries one user message built from a [`PromptTemplate`]
//! with the prompt and both responses substituted. The reply must contain
//! either the revised response between `<revised>` and `</revised>`, or the
//! bare verdict `KEEP_ORIGINAL` when the response under edit is already good
//! enough, in which case the pair is filtered.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ModificationOutcome, ModifierBackend, ModifyRequest, ModifyTask};
use crate::vocab::Vocabulary;

pub const KEEP_VERDICT: &str = "KEEP_ORIGINAL";
const OPEN: &str = "<revised>";
const CLOSE: &str = "</revised>";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    /// Short-answer question answering and math reasoning.
    #[default]
    QaMath,
    /// Open-ended instruction following.
    InstructionFollowing,
}

const QA_MATH_IMPROVE: &str = "\
You are revising an answer to a question. A reference answer is provided.

Question:
{prompt}

Reference answer:
{chosen}

Answer to revise:
{rejected}

Edit the answer to revise so that it is correct, changing only the tokens that \
are wrong and keeping its wording and structure everywhere else. Use the \
reference answer as guidance but do not copy it. If the answer to revise is \
already correct and complete, reply with exactly KEEP_ORIGINAL. Otherwise \
reply with the revised answer between <revised> and </revised>.";

const IF_IMPROVE: &str = "\
You are revising a response to a user instruction. A better response is \
provided for reference.

Instruction:
{prompt}

Better response:
{chosen}

Response to revise:
{rejected}

Make targeted edits to the response to revise so that it is as helpful, \
accurate and harmless as the better response. Change only the parts that are \
worse than the reference; keep everything else, including its style and \
length, as it is. If the response to revise needs no change, reply with \
exactly KEEP_ORIGINAL. Otherwise reply with the revised response between \
<revised> and </revised>.";

const DEGRADE_WITH_REFERENCE: &str = "\
Instruction:
{prompt}

Good response:
{chosen}

Flawed response:
{rejected}

Introduce into the good response the same kinds of mistakes the flawed \
response makes, changing as few tokens as possible. Reply with the result \
between <revised> and </revised>, or with exactly KEEP_ORIGINAL if that is \
not possible.";

const DEGRADE_BLIND: &str = "\
Instruction:
{prompt}

Response:
{chosen}

Introduce a small but real mistake into the response, changing as few tokens \
as possible. Reply with the result between <revised> and </revised>, or with \
exactly KEEP_ORIGINAL if that is not possible.";

const IMPROVE_BLIND: &str = "\
Instruction:
{prompt}

Response:
{rejected}

Fix any mistakes in the response, changing only the tokens that are wrong. If \
it is already correct, reply with exactly KEEP_ORIGINAL. Otherwise reply with \
the corrected response between <revised> and </revised>.";

impl PromptTemplate {
    pub fn text(self, task: ModifyTask) -> &'static str {
        match (task, self) {
            (ModifyTask::Improve, PromptTemplate::QaMath) => QA_MATH_IMPROVE,
            (ModifyTask::Improve, PromptTemplate::InstructionFollowing) => IF_IMPROVE,
            (ModifyTask::DegradeWithReference, _) => DEGRADE_WITH_REFERENCE,
            (ModifyTask::DegradeBlind, _) => DEGRADE_BLIND,
            (ModifyTask::ImproveBlind, _) => IMPROVE_BLIND,
        }
    }

    pub fn render(self, task: ModifyTask, prompt: &str, chosen: &str, rejected: &str) -> String {
        // Substitute in one pass so placeholder-like text inside the
        // responses is left alone.
        let template = self.text(task);
        let mut out = String::with_capacity(template.len() + prompt.len() + chosen.len() + rejected.len());
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open..];
            let (value, len) = [("{prompt}", prompt), ("{chosen}", chosen), ("{rejected}", rejected)]
                .into_iter()
                .find(|(key, _)| after.starts_with(key))
                .map_or(("{", 1), |(key, v)| (v, key.len()));
            out.push_str(value);
            rest = &after[len..];
        }
        out.push_str(rest);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    /// Additional attempts after the first on transport errors, HTTP 429
    /// and HTTP 5xx.
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub template: PromptTemplate,
    /// Base delay of the exponential backoff between attempts.
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-4-0125-preview".into(),
            api_key_env: "BMC_API_KEY".into(),
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 60,
            max_in_flight: 4,
            template: PromptTemplate::QaMath,
            backoff_ms: 500,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    vocab: Vocabulary,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, vocab: Vocabulary) -> Result<Self, BackendError> {
        if config.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok();
        Ok(RemoteBackend {
            config,
            vocab,
            agent,
            api_key,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn text(&self, tokens: &[u32]) -> Result<String, BackendError> {
        let bytes = self
            .vocab
            .decode(tokens)
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn post_once(&self, body: &Value) -> Result<String, (bool, String)> {
        let mut req = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err((true, format!("HTTP {status}: {text}"))),
            _ => Err((false, format!("HTTP {status}: {text}"))),
        }
    }

    /// Sends one chat request with retries and returns the assistant message.
    pub fn complete(&self, user_message: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": user_message}],
        });
        let mut attempts = 0;
        let raw = loop {
            attempts += 1;
            match self.post_once(&body) {
                Ok(text) => break text,
                Err((retryable, message)) => {
                    if !retryable || attempts > self.config.max_retries {
                        return Err(BackendError::Transport { attempts, message });
                    }
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(6));
                    log::debug!("attempt {attempts} failed ({message}); retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        };
        let parsed: Value = serde_json::from_str(&raw).map_err(|e| BackendError::MalformedReply {
            reason: format!("response is not JSON: {e}"),
            raw_reply: raw.clone(),
        })?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| BackendError::MalformedReply {
                reason: "no choices[0].message.content".into(),
                raw_reply: raw,
            })
    }
}

/// Parsed assistant reply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Revised(String),
    KeepOriginal,
}

pub fn parse_reply(reply: &str) -> Result<Verdict, BackendError> {
    if let Some(start) = reply.find(OPEN) {
        let body = &reply[start + OPEN.len()..];
        let Some(end) = body.find(CLOSE) else {
            return Err(BackendError::MalformedReply {
                reason: format!("unterminated {OPEN}"),
                raw_reply: reply.to_string(),
            });
        };
        return Ok(Verdict::Revised(body[..end].trim().to_string()));
    }
    if reply.trim() == KEEP_VERDICT {
        return Ok(Verdict::KeepOriginal);
    }
    Err(BackendError::MalformedReply {
        reason: format!("expected {OPEN}…{CLOSE} or {KEEP_VERDICT}"),
        raw_reply: reply.to_string(),
    })
}

impl ModifierBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.config.model
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    fn modify(&self, req: &ModifyRequest<'_>) -> Result<ModificationOutcome, BackendError> {
        let message = self.config.template.render(
            req.task,
            &self.text(req.prompt)?,
            &self.text(req.chosen)?,
            &self.text(req.rejected)?,
        );
        let reply = self.complete(&message)?;
        match parse_reply(&reply)? {
            Verdict::KeepOriginal => Ok(ModificationOutcome::filtered(self.id(), reply)),
            Verdict::Revised(text) => {
                let pseudo = self.vocab.encode(text.as_bytes()).map_err(|e| {
                    BackendError::MalformedReply {
                        reason: e.to_string(),
                        raw_reply: reply.clone(),
                    }
                })?;
                if pseudo.is_empty() {
                    return Err(BackendError::MalformedReply {
                        reason: "empty revision".into(),
                        raw_reply: reply,
                    });
                }
                Ok(ModificationOutcome {
                    pseudo: Some(pseudo),
                    keep: true,
                    backend_id: self.id().to_string(),
                    raw_reply: reply,
                })
            }
        }
    }
}
