//! Chat-completion client with record/replay fixtures.
//!
//! Credentials come from the environment only. Replay mode never touches
//! the transport.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "COMPLETION_ENDPOINT";
pub const ENV_API_KEY: &str = "COMPLETION_API_KEY";
pub const ENV_MODEL: &str = "COMPLETION_MODEL";

/// Secret text whose `Debug` output is redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct Credential(String);

impl Credential {
    pub fn new(secret: impl Into<String>) -> Self {
        Credential(secret.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Credential(***)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientMode {
    Live,
    Replay(PathBuf),
    Record(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub endpoint: Option<String>,
    pub credential: Option<Credential>,
    pub model_name: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry delay; each later retry doubles it.
    pub backoff_base: Duration,
    pub mode: ClientMode,
}

pub const DEFAULT_MODEL: &str = "default";

impl ClientConfig {
    /// Offline configuration reading from a fixture.
    pub fn replay(path: impl Into<PathBuf>) -> Self {
        ClientConfig {
            endpoint: None,
            credential: None,
            model_name: DEFAULT_MODEL.into(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            mode: ClientMode::Replay(path.into()),
        }
    }

    /// Endpoint, key and model from the process environment.
    pub fn from_env(mode: ClientMode) -> Self {
        Self::from_lookup(mode, |k| std::env::var(k).ok())
    }

    pub fn from_lookup(mode: ClientMode, lookup: impl Fn(&str) -> Option<String>) -> Self {
        let nonempty = |k| lookup(k).filter(|v: &String| !v.trim().is_empty());
        ClientConfig {
            endpoint: nonempty(ENV_ENDPOINT),
            credential: nonempty(ENV_API_KEY).map(Credential),
            model_name: nonempty(ENV_MODEL).unwrap_or_else(|| DEFAULT_MODEL.into()),
            ..Self::replay("")
        }
        .with_mode(mode)
    }

    pub fn with_mode(mut self, mode: ClientMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let needs_live = matches!(self.mode, ClientMode::Live | ClientMode::Record(_));
        if needs_live && self.endpoint.is_none() {
            return Err(ClientError::Config(format!("{ENV_ENDPOINT} is not set")));
        }
        if needs_live && self.credential.is_none() {
            return Err(ClientError::Config(format!("{ENV_API_KEY} is not set")));
        }
        if let ClientMode::Replay(p) = &self.mode {
            File::open(p).map_err(|e| ClientError::Config(format!("fixture {} is not readable: {e}", p.display())))?;
        }
        Ok(())
    }

    /// Delays slept before each retry, in order.
    pub fn backoff_schedule(&self) -> Vec<Duration> {
        (0..self.max_retries)
            .map(|k| self.backoff_base.saturating_mul(1 << k.min(20)))
            .collect()
    }
}

/// Hex SHA-256 of the prompt text.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub prompt_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub response: String,
}

pub fn read_fixture(path: &Path) -> Result<Vec<FixtureEntry>, ClientError> {
    let file = File::open(path).map_err(|e| ClientError::Fixture(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ClientError::Fixture(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| ClientError::Fixture(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn append_fixture(path: &Path, entry: &FixtureEntry) -> Result<(), ClientError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ClientError::Fixture(format!("{}: {e}", path.display())))?;
    let line = serde_json::to_string(entry).expect("fixture entry serializes");
    writeln!(f, "{line}")
        .and_then(|_| f.flush())
        .map_err(|e| ClientError::Fixture(e.to_string()))
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client misconfigured: {0}")]
    Config(String),
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint answered {status} after {attempts} attempts: {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
    #[error("fixture error: {0}")]
    Fixture(String),
    #[error("replay fixture exhausted after {0} entries")]
    FixtureExhausted(usize),
    #[error("replay entry {index} was recorded for prompt {expected}, got {actual}")]
    DigestMismatch {
        index: usize,
        expected: String,
        actual: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// One HTTP POST of a JSON body.
pub trait Transport {
    fn post_json(&self, url: &str, bearer: &str, body: &str, timeout: Duration)
        -> Result<HttpResponse, TransportError>;
}

pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Io(other.to_string()),
        };
        let mut resp = agent
            .post(url)
            .header("Authorization", &format!("Bearer {bearer}"))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(map_err)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(map_err)?;
        Ok(HttpResponse { status, body })
    }
}

/// Anything that turns a prompt into response text.
pub trait CompletionClient {
    fn complete(&mut self, prompt: &str) -> Result<String, ClientError>;
}

pub struct Client<T: Transport = UreqTransport> {
    config: ClientConfig,
    transport: T,
    replay: Option<(Vec<FixtureEntry>, usize)>,
    sleep: fn(Duration),
}

impl Client<UreqTransport> {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        Self::with_transport(config, UreqTransport)
    }
}

impl<T: Transport> Client<T> {
    pub fn with_transport(config: ClientConfig, transport: T) -> Result<Self, ClientError> {
        config.validate()?;
        let replay = match &config.mode {
            ClientMode::Replay(p) => Some((read_fixture(p)?, 0)),
            _ => None,
        };
        Ok(Client {
            config,
            transport,
            replay,
            sleep: std::thread::sleep,
        })
    }

    /// Replaces the sleep used between retries.
    pub fn with_sleeper(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn live(&self, prompt: &str) -> Result<String, ClientError> {
        let endpoint = self.config.endpoint.as_deref().expect("validated");
        let key = self.config.credential.as_ref().expect("validated").expose();
        let body = serde_json::json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
        })
        .to_string();
        let schedule = self.config.backoff_schedule();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let failure = match self.transport.post_json(endpoint, key, &body, self.config.timeout) {
                Ok(resp) if (200..300).contains(&resp.status) => return extract_message(&resp.body),
                Ok(resp) => ClientError::Status {
                    status: resp.status,
                    attempts,
                    body: resp.body.chars().take(512).collect(),
                },
                Err(TransportError::Timeout) => ClientError::Timeout { attempts },
                Err(TransportError::Io(message)) => ClientError::Transport { attempts, message },
            };
            match schedule.get(attempts as usize - 1) {
                Some(delay) => (self.sleep)(*delay),
                None => return Err(failure),
            }
        }
    }
}

fn extract_message(body: &str) -> Result<String, ClientError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| ClientError::BadResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| ClientError::BadResponse("missing choices[0].message.content".into()))
}

impl<T: Transport> CompletionClient for Client<T> {
    fn complete(&mut self, prompt: &str) -> Result<String, ClientError> {
        let digest = prompt_digest(prompt);
        if let Some((entries, next)) = self.replay.as_mut() {
            let entry = entries.get(*next).ok_or(ClientError::FixtureExhausted(entries.len()))?;
            if entry.prompt_digest != digest {
                return Err(ClientError::DigestMismatch {
                    index: *next,
                    expected: entry.prompt_digest.clone(),
                    actual: digest,
                });
            }
            *next += 1;
            return Ok(entry.response.clone());
        }
        let response = self.live(prompt)?;
        if let ClientMode::Record(path) = &self.config.mode {
            append_fixture(
                path,
                &FixtureEntry {
                    prompt_digest: digest,
                    prompt: Some(prompt.to_string()),
                    response: response.clone(),
                },
            )?;
        }
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::{Cell, RefCell};

    /// Transport double: scripted answers, counts calls.
    struct Scripted {
        answers: RefCell<Vec<Result<HttpResponse, TransportError>>>,
        calls: Cell<u32>,
    }

    impl Scripted {
        fn new(answers: Vec<Result<HttpResponse, TransportError>>) -> Self {
            Scripted {
                answers: RefCell::new(answers),
                calls: Cell::new(0),
            }
        }
    }

    impl Transport for Scripted {
        fn post_json(&self, _: &str, bearer: &str, body: &str, _: Duration) -> Result<HttpResponse, TransportError> {
            assert_eq!(bearer, "sk-test");
            assert!(body.contains("\"messages\""));
            self.calls.set(self.calls.get() + 1);
            let mut a = self.answers.borrow_mut();
            if a.is_empty() {
                Err(TransportError::Io("no script".into()))
            } else {
                a.remove(0)
            }
        }
    }

    fn ok(text: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string(),
        })
    }

    fn live_config(retries: u32) -> ClientConfig {
        let mut c = ClientConfig::from_lookup(ClientMode::Live, |k| match k {
            ENV_ENDPOINT => Some("http://127.0.0.1:9/v1/chat/completions".into()),
            ENV_API_KEY => Some("sk-test".into()),
            _ => None,
        });
        c.max_retries = retries;
        c.backoff_base = Duration::from_millis(10);
        c
    }

    fn no_sleep(_: Duration) {}

    #[test]
    fn digest_is_sha256_hex() {
        assert_eq!(
            prompt_digest(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn replay_in_order_without_transport() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        for (p, r) in [("p1", "resp A"), ("p2", "resp B")] {
            append_fixture(
                &path,
                &FixtureEntry {
                    prompt_digest: prompt_digest(p),
                    prompt: None,
                    response: r.into(),
                },
            )
            .unwrap();
        }
        let mut c = Client::with_transport(ClientConfig::replay(&path), Scripted::new(vec![])).unwrap();
        assert_eq!(c.complete("p1").unwrap(), "resp A");
        assert!(matches!(
            c.complete("p1"),
            Err(ClientError::DigestMismatch { index: 1, .. })
        ));
        assert_eq!(c.complete("p2").unwrap(), "resp B");
        assert!(matches!(c.complete("p3"), Err(ClientError::FixtureExhausted(2))));
        assert_eq!(c.transport().calls.get(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(ClientConfig::from_lookup(ClientMode::Live, |_| None)
            .validate()
            .is_err());
        let only_endpoint = ClientConfig::from_lookup(ClientMode::Live, |k| {
            (k == ENV_ENDPOINT).then(|| "http://x".to_string())
        });
        assert!(matches!(only_endpoint.validate(), Err(ClientError::Config(m)) if m.contains(ENV_API_KEY)));
        assert!(ClientConfig::replay("/nonexistent/fixture.jsonl").validate().is_err());
        assert!(live_config(0).validate().is_ok());
        assert_eq!(format!("{:?}", live_config(0).credential), "Some(Credential(***))");
    }

    #[test]
    fn retries_with_doubling_backoff() {
        let c = live_config(3);
        assert_eq!(
            c.backoff_schedule(),
            vec![
                Duration::from_millis(10),
                Duration::from_millis(20),
                Duration::from_millis(40)
            ]
        );
        let transport = Scripted::new(vec![
            Err(TransportError::Timeout),
            Ok(HttpResponse {
                status: 503,
                body: "busy".into(),
            }),
            ok("hello"),
        ]);
        let mut client = Client::with_transport(c, transport).unwrap().with_sleeper(no_sleep);
        assert_eq!(client.complete("hi").unwrap(), "hello");
        assert_eq!(client.transport().calls.get(), 3);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let transport = Scripted::new(vec![]);
        let mut client = Client::with_transport(live_config(2), transport)
            .unwrap()
            .with_sleeper(no_sleep);
        assert!(matches!(
            client.complete("hi"),
            Err(ClientError::Transport { attempts: 3, .. })
        ));
        assert_eq!(client.transport().calls.get(), 3);
        let statuses = Scripted::new(
            (0..5)
                .map(|_| {
                    Ok(HttpResponse {
                        status: 500,
                        body: "x".into(),
                    })
                })
                .collect(),
        );
        let mut client = Client::with_transport(live_config(1), statuses)
            .unwrap()
            .with_sleeper(no_sleep);
        assert!(matches!(
            client.complete("hi"),
            Err(ClientError::Status {
                status: 500,
                attempts: 2,
                ..
            })
        ));
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error() {
        let mut client = Client::new(live_config(1)).unwrap().with_sleeper(no_sleep);
        match client.complete("hi") {
            Err(ClientError::Transport { attempts: 2, .. } | ClientError::Timeout { attempts: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_appends_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.jsonl");
        let config = live_config(0).with_mode(ClientMode::Record(path.clone()));
        let mut client = Client::with_transport(config, Scripted::new(vec![ok("one")])).unwrap();
        assert_eq!(client.complete("prompt").unwrap(), "one");
        let entries = read_fixture(&path).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].prompt_digest, prompt_digest("prompt"));
        let mut replay = Client::with_transport(ClientConfig::replay(&path), Scripted::new(vec![])).unwrap();
        assert_eq!(replay.complete("prompt").unwrap(), "one");
    }
}
