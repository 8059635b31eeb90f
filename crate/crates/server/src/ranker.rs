//! Word ranking by an external text-generation service, with the attribution
//! ranking as the offline stand-in and the fallback.
//!
//! Remote wire format: one `POST` to the endpoint with the JSON body
//! `{"prompt": "..."}` and an `Authorization: Bearer <token>` header. The
//! reply is either a JSON object with a string field `text` or a plain-text
//! body; either way the text is a comma- or newline-separated word list,
//! most important first.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toxscope::text::{normalize_text, tokenize};
use toxscope::RankedToken;

pub const DEFAULT_PROMPT: &str =
    "List the words from the following text that contribute most to it being \
hateful, most important first, separated by commas.\n\nText: {text}";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RankerMode {
    #[default]
    Stub,
    Remote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankSource {
    Stub,
    Remote,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedWord {
    pub token: String,
    pub score: f64,
    /// First position of the word among the input tokens, if it occurs.
    pub position: Option<usize>,
}

impl From<RankedToken> for RankedWord {
    fn from(t: RankedToken) -> Self {
        Self {
            token: t.token,
            score: t.score,
            position: Some(t.position),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankerConfig {
    pub mode: RankerMode,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_ms: u64,
    /// `{text}` is replaced by the input.
    pub prompt_template: String,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            mode: RankerMode::Stub,
            endpoint: None,
            token_env: None,
            timeout_ms: 5000,
            prompt_template: DEFAULT_PROMPT.to_string(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RankerConfigError {
    #[error("remote ranker needs an endpoint")]
    MissingEndpoint,
    #[error("remote ranker needs the name of the token environment variable")]
    MissingTokenEnv,
    #[error("ranker timeout must be at least 1 ms")]
    ZeroTimeout,
}

impl RankerConfig {
    pub fn validate(&self) -> Result<(), RankerConfigError> {
        if self.timeout_ms == 0 {
            return Err(RankerConfigError::ZeroTimeout);
        }
        if self.mode == RankerMode::Remote {
            if self.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(RankerConfigError::MissingEndpoint);
            }
            if self.token_env.as_deref().is_none_or(str::is_empty) {
                return Err(RankerConfigError::MissingTokenEnv);
            }
        }
        Ok(())
    }

    pub fn render_prompt(&self, text: &str) -> String {
        self.prompt_template.replace("{text}", text)
    }
}

/// Splits a reply into words, best first, scored `1 - k/n` by rank `k`.
/// List markers such as `1.` or `-` are dropped, as are repeats.
pub fn parse_word_list(reply: &str, input_tokens: &[String]) -> Vec<RankedWord> {
    let mut words: Vec<String> = Vec::new();
    for item in reply.split([',', '\n']) {
        let item = item
            .trim()
            .trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '.' | ')' | '-' | '*'))
            .trim();
        let word = normalize_text(item)
            .trim_matches(|c| matches!(c, '.' | ',' | '!' | '?'))
            .to_string();
        if !word.is_empty() && !words.contains(&word) {
            words.push(word);
        }
    }
    let n = words.len() as f64;
    words
        .into_iter()
        .enumerate()
        .map(|(k, token)| RankedWord {
            position: input_tokens.iter().position(|t| *t == token),
            score: 1.0 - k as f64 / n,
            token,
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct TextReply {
    text: String,
}

#[derive(Clone, Debug)]
pub struct Ranker {
    config: RankerConfig,
    client: Option<reqwest::Client>,
}

impl Ranker {
    pub fn new(config: RankerConfig) -> Result<Self, RankerConfigError> {
        config.validate()?;
        let client = match config.mode {
            RankerMode::Stub => None,
            RankerMode::Remote => Some(
                reqwest::Client::builder()
                    .timeout(Duration::from_millis(config.timeout_ms))
                    .build()
                    .expect("http client"),
            ),
        };
        Ok(Self { config, client })
    }

    pub fn stub() -> Self {
        Self::new(RankerConfig::default()).expect("default config is valid")
    }

    pub fn config(&self) -> &RankerConfig {
        &self.config
    }

    /// Never fails: anything that goes wrong remotely yields `fallback`
    /// tagged [`RankSource::Fallback`].
    pub async fn rank(
        &self,
        text: &str,
        fallback: Vec<RankedWord>,
    ) -> (Vec<RankedWord>, RankSource) {
        let Some(client) = &self.client else {
            return (fallback, RankSource::Stub);
        };
        match self.remote(client, text).await {
            Ok(words) => (words, RankSource::Remote),
            Err(reason) => {
                tracing::warn!(%reason, "remote ranker failed, using attribution ranking");
                (fallback, RankSource::Fallback)
            }
        }
    }

    async fn remote(
        &self,
        client: &reqwest::Client,
        text: &str,
    ) -> Result<Vec<RankedWord>, String> {
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let var = self.config.token_env.as_deref().unwrap_or_default();
        let token =
            std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?;
        let response = client
            .post(endpoint)
            .bearer_auth(token)
            .json(&serde_json::json!({ "prompt": self.config.render_prompt(text) }))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        if !response.status().is_success() {
            return Err(format!("status {}", response.status()));
        }
        let body = response.text().await.map_err(|e| e.to_string())?;
        let reply = serde_json::from_str::<TextReply>(&body).map_or(body, |r| r.text);
        let words = parse_word_list(&reply, &tokenize(&normalize_text(text)));
        if words.is_empty() {
            return Err("reply held no words".to_string());
        }
        Ok(words)
    }
}
