use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Prefix;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("scripted backend exhausted after {0} responses")]
    Exhausted(usize),
    #[error("cannot load fixtures: {0}")]
    Fixture(String),
}

/// Anything that turns a prompt into the text of one reasoning step.
///
/// When `forced_prefix` is not [`Prefix::Free`] the reply should begin with
/// that prefix; the controller prepends it when a backend does not.
pub trait PolicyBackend {
    fn generate(&mut self, prompt: &str, forced_prefix: Prefix, rng_seed: u64) -> Result<String, BackendError>;
}

impl<B: PolicyBackend + ?Sized> PolicyBackend for &mut B {
    fn generate(&mut self, prompt: &str, forced_prefix: Prefix, rng_seed: u64) -> Result<String, BackendError> {
        (**self).generate(prompt, forced_prefix, rng_seed)
    }
}

impl<B: PolicyBackend + ?Sized> PolicyBackend for Box<B> {
    fn generate(&mut self, prompt: &str, forced_prefix: Prefix, rng_seed: u64) -> Result<String, BackendError> {
        (**self).generate(prompt, forced_prefix, rng_seed)
    }
}

/// Replays canned responses in order, ignoring the prompt and prefix.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    responses: Vec<String>,
    cursor: usize,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            responses: responses.into_iter().map(Into::into).collect(),
            cursor: 0,
        }
    }

    /// One response per line; blank lines are skipped.
    pub fn from_fixture_text(text: &str) -> Self {
        Self::new(text.lines().filter(|l| !l.trim().is_empty()))
    }

    pub fn from_fixture_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        Ok(Self::from_fixture_text(&text))
    }

    pub fn calls(&self) -> usize {
        self.cursor
    }
}

impl PolicyBackend for ScriptedBackend {
    fn generate(&mut self, _prompt: &str, _forced: Prefix, _seed: u64) -> Result<String, BackendError> {
        let out = self
            .responses
            .get(self.cursor)
            .cloned()
            .ok_or(BackendError::Exhausted(self.responses.len()))?;
        self.cursor += 1;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub url: String,
    pub timeout_s: f64,
    pub max_tokens: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/generate".into(),
            timeout_s: 60.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GenerateRequest<'a> {
    pub prompt: &'a str,
    pub forced_prefix: Option<&'static str>,
    pub max_tokens: u32,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

/// JSON-over-HTTP model server.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s.max(0.001))))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self { cfg, agent }
    }
}

impl PolicyBackend for RemoteBackend {
    fn generate(&mut self, prompt: &str, forced_prefix: Prefix, rng_seed: u64) -> Result<String, BackendError> {
        let body = GenerateRequest {
            prompt,
            forced_prefix: forced_prefix.text(),
            max_tokens: self.cfg.max_tokens,
            seed: rng_seed,
        };
        let mut resp = self
            .agent
            .post(&self.cfg.url)
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Transport(format!("server answered {status}")));
        }
        let parsed: GenerateResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(match forced_prefix.text() {
            Some(p) if !parsed.text.trim_start().starts_with(p) => format!("{p} {}", parsed.text),
            _ => parsed.text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    #[test]
    fn scripted_replays_in_order() {
        let mut b = ScriptedBackend::from_fixture_text("first\n\nsecond\n");
        assert_eq!(b.generate("p", Prefix::Free, 0).unwrap(), "first");
        assert_eq!(b.generate("p", Prefix::Answer, 9).unwrap(), "second");
        assert!(matches!(b.generate("p", Prefix::Free, 0), Err(BackendError::Exhausted(2))));
    }

    #[test]
    fn remote_unreachable_is_transport_error() {
        // bind then drop to get a port nobody listens on
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut b = RemoteBackend::new(RemoteConfig {
            url: format!("http://127.0.0.1:{port}/generate"),
            timeout_s: 2.0,
            max_tokens: 16,
        });
        assert!(matches!(b.generate("p", Prefix::Free, 1), Err(BackendError::Transport(_))));
    }

    fn serve_once(reply: &'static str) -> (String, thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            String::from_utf8(body).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn remote_wire_format_and_client_side_prefix() {
        let (url, server) = serve_once(r#"{"text": "\\boxed{C}"}"#);
        let mut b = RemoteBackend::new(RemoteConfig {
            url,
            timeout_s: 5.0,
            max_tokens: 64,
        });
        let text = b.generate("the prompt", Prefix::Answer, 42).unwrap();
        assert_eq!(text, "I get the answer. \\boxed{C}");
        let sent: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(
            sent,
            serde_json::json!({
                "prompt": "the prompt",
                "forced_prefix": "I get the answer.",
                "max_tokens": 64,
                "seed": 42
            })
        );
    }

    #[test]
    fn remote_free_prefix_is_null() {
        let (url, server) = serve_once(r#"{"text": "I need to zoom in on the video. \\boxed{[1, 2]}"}"#);
        let mut b = RemoteBackend::new(RemoteConfig {
            url,
            timeout_s: 5.0,
            max_tokens: 8,
        });
        let text = b.generate("p", Prefix::Free, 0).unwrap();
        assert!(text.starts_with("I need to zoom"));
        let sent: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert!(sent["forced_prefix"].is_null());
    }
}
