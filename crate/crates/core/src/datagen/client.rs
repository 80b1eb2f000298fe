//! Generator clients: the HTTP chat-completion client used against hosted
//! models and the scripted mock that keeps the pipeline fully offline in
//! tests and CI.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;

#[derive(Debug, Clone, Error)]
pub enum GeneratorError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("mock script exhausted for problem {problem_id}")]
    ScriptExhausted { problem_id: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".to_string(),
            content: content.into(),
        }
    }
}

/// One generation request; the problem id lets scripted clients route
/// responses and is ignored by real endpoints.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub problem_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

/// Anything that can turn a prompt into generator text. Implementations
/// must be callable concurrently.
pub trait GeneratorClient: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GeneratorError>;

    /// Name recorded in dataset manifests.
    fn model_name(&self) -> &str;
}

#[derive(Serialize)]
struct ChatCompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

// Response structs stay permissive: endpoints send plenty of fields we
// have no use for.
#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// Blocking HTTP JSON chat-completion client: POST with model name, message
/// list, and temperature; the assistant text comes back in
/// `choices[0].message.content`.
pub struct HttpGeneratorClient {
    endpoint_url: String,
    model_name: String,
    credential: String,
    client: reqwest::blocking::Client,
}

impl HttpGeneratorClient {
    pub fn new(
        endpoint_url: impl Into<String>,
        model_name: impl Into<String>,
        credential: impl Into<String>,
        timeout: Duration,
    ) -> Result<Self, GeneratorError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GeneratorError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint_url: endpoint_url.into(),
            model_name: model_name.into(),
            credential: credential.into(),
            client,
        })
    }
}

impl GeneratorClient for HttpGeneratorClient {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GeneratorError> {
        let body = ChatCompletionRequest {
            model: &self.model_name,
            messages: &request.messages,
            temperature: request.temperature,
        };
        let response = self
            .client
            .post(&self.endpoint_url)
            .bearer_auth(&self.credential)
            .json(&body)
            .send()
            .map_err(|e| GeneratorError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(GeneratorError::Protocol(format!(
                "endpoint returned {status}: {}",
                text.chars().take(200).collect::<String>()
            )));
        }
        let parsed: ChatCompletionResponse = response
            .json()
            .map_err(|e| GeneratorError::Protocol(format!("bad completion payload: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GeneratorError::Protocol("response carried no choices".to_string()))
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }
}

/// One mock script row: the canned responses for a problem id, consumed in
/// order across the whole pipeline run (stage-one attempts first, then any
/// stage-two attempts).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScriptEntry {
    pub id: String,
    pub responses: Vec<String>,
}

/// Deterministic scripted generator for offline runs.
pub struct MockGeneratorClient {
    scripts: HashMap<String, Vec<String>>,
    cursors: Mutex<HashMap<String, usize>>,
}

impl MockGeneratorClient {
    pub fn from_map(scripts: HashMap<String, Vec<String>>) -> Self {
        Self {
            scripts,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    /// Load a JSONL script file of [`MockScriptEntry`] rows.
    pub fn from_script_file(path: &Path) -> Result<Self, codec::CodecError> {
        let entries: Vec<MockScriptEntry> = codec::read_jsonl(path)?;
        let mut scripts = HashMap::new();
        for entry in entries {
            if scripts.insert(entry.id.clone(), entry.responses).is_some() {
                return Err(codec::CodecError::Schema(format!(
                    "duplicate mock script id {:?}",
                    entry.id
                )));
            }
        }
        Ok(Self::from_map(scripts))
    }
}

impl GeneratorClient for MockGeneratorClient {
    fn complete(&self, request: &GenerationRequest) -> Result<String, GeneratorError> {
        let responses = self.scripts.get(&request.problem_id).ok_or_else(|| {
            GeneratorError::ScriptExhausted {
                problem_id: request.problem_id.clone(),
            }
        })?;
        let mut cursors = self.cursors.lock().expect("cursor lock never poisoned");
        let cursor = cursors.entry(request.problem_id.clone()).or_insert(0);
        let response = responses
            .get(*cursor)
            .ok_or_else(|| GeneratorError::ScriptExhausted {
                problem_id: request.problem_id.clone(),
            })?;
        *cursor += 1;
        Ok(response.clone())
    }

    fn model_name(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(id: &str) -> GenerationRequest {
        GenerationRequest {
            problem_id: id.to_string(),
            messages: vec![ChatMessage::user("prompt")],
            temperature: 0.7,
        }
    }

    #[test]
    fn mock_serves_responses_in_order_per_problem() {
        let mut scripts = HashMap::new();
        scripts.insert("p1".to_string(), vec!["one".to_string(), "two".to_string()]);
        scripts.insert("p2".to_string(), vec!["other".to_string()]);
        let mock = MockGeneratorClient::from_map(scripts);
        assert_eq!(mock.complete(&request("p1")).unwrap(), "one");
        assert_eq!(mock.complete(&request("p2")).unwrap(), "other");
        assert_eq!(mock.complete(&request("p1")).unwrap(), "two");
        assert!(matches!(
            mock.complete(&request("p1")),
            Err(GeneratorError::ScriptExhausted { .. })
        ));
        assert!(matches!(
            mock.complete(&request("unknown")),
            Err(GeneratorError::ScriptExhausted { .. })
        ));
    }

    #[test]
    fn mock_is_safe_under_concurrent_callers() {
        let mut scripts = HashMap::new();
        for i in 0..8 {
            scripts.insert(format!("p{i}"), vec![format!("r{i}")]);
        }
        let mock = std::sync::Arc::new(MockGeneratorClient::from_map(scripts));
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let mock = mock.clone();
                std::thread::spawn(move || mock.complete(&request(&format!("p{i}"))).unwrap())
            })
            .collect();
        for (i, handle) in handles.into_iter().enumerate() {
            assert_eq!(handle.join().unwrap(), format!("r{i}"));
        }
    }

    #[test]
    fn http_client_speaks_chat_completion() {
        use std::io::{Read, Write};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            let n = stream.read(&mut buf).unwrap();
            let request = String::from_utf8_lossy(&buf[..n]).to_string();
            let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi there"}}]}"#;
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
            request
        });

        let client = HttpGeneratorClient::new(
            format!("http://{addr}/v1/chat/completions"),
            "test-model",
            "secret",
            Duration::from_secs(5),
        )
        .unwrap();
        let text = client.complete(&request("p1")).unwrap();
        assert_eq!(text, "hi there");

        let seen = server.join().unwrap();
        assert!(seen.contains("\"model\":\"test-model\""));
        assert!(seen.contains("\"temperature\":0.7"));
        assert!(seen.contains("Bearer secret") || seen.contains("bearer secret"));
    }
}
