//! Problem-formulation client: a deterministic template or a remote
//! chat-completion endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

pub const OBJECTIVE_SKELETON: &str =
    "maximize w_r/L_read + w_w/L_write subject to assignment constraints";
pub const NO_KNOWLEDGE_MARKER: &str = "(no external knowledge retrieved)";

pub const ENV_URL: &str = "DCNLAB_LLM_URL";
pub const ENV_API_KEY: &str = "DCNLAB_LLM_API_KEY";
pub const ENV_MODEL: &str = "DCNLAB_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulationRequest {
    pub description: String,
    /// Retrieved chunk texts, most relevant first.
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulationResult {
    pub text: String,
    pub backend: BackendKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| Error::Remote { status: None, msg: format!("{ENV_URL} is not set") })?;
        Ok(Self {
            url,
            api_key: std::env::var(ENV_API_KEY).ok(),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4".to_string()),
            timeout: Duration::from_secs(60),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backend {
    Mock,
    Remote(RemoteConfig),
}

/// User prompt shared by both backends.
pub fn build_prompt(req: &FormulationRequest) -> String {
    let mut out = String::new();
    out.push_str("Task description:\n");
    out.push_str(req.description.trim());
    out.push_str("\n\nRetrieved knowledge:\n");
    if req.retrieved.is_empty() {
        out.push_str(NO_KNOWLEDGE_MARKER);
        out.push('\n');
    }
    for (i, text) in req.retrieved.iter().enumerate() {
        out.push_str(&format!("[{}] {}\n", i + 1, text));
    }
    out
}

fn system_prompt() -> String {
    format!(
        "You formulate data-placement optimization problems for data center networks. \
         Use the objective form: {OBJECTIVE_SKELETON}."
    )
}

pub fn formulate(req: &FormulationRequest, backend: &Backend) -> Result<FormulationResult> {
    match backend {
        Backend::Mock => Ok(FormulationResult {
            text: format!(
                "Objective: {OBJECTIVE_SKELETON}\n\
                 Decision variables: x[k] in {{0..N-1}}, the server holding chunk k.\n\
                 Read/write latency per chunk: base latency x (1 + alpha * load / capacity) + hops * per_hop_ms.\n\n{}",
                build_prompt(req)
            ),
            backend: BackendKind::Mock,
        }),
        Backend::Remote(cfg) => remote(req, cfg),
    }
}

fn remote(req: &FormulationRequest, cfg: &RemoteConfig) -> Result<FormulationResult> {
    let body = json!({
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": system_prompt()},
            {"role": "user", "content": build_prompt(req)},
        ],
    });
    let mut call = ureq::post(&cfg.url).timeout(cfg.timeout);
    if let Some(key) = &cfg.api_key {
        call = call.set("Authorization", &format!("Bearer {key}"));
    }
    let resp = call.send_json(body).map_err(|e| match e {
        ureq::Error::Status(code, r) => Error::Remote {
            status: Some(code),
            msg: r.into_string().unwrap_or_default(),
        },
        ureq::Error::Transport(t) => Error::Remote {
            status: None,
            msg: t.to_string(),
        },
    })?;
    let value: serde_json::Value = resp.into_json().map_err(|e| Error::Remote {
        status: None,
        msg: format!("unreadable response body: {e}"),
    })?;
    let text = value["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| Error::Remote {
            status: None,
            msg: "response has no choices[0].message.content".into(),
        })?;
    Ok(FormulationResult {
        text: text.to_string(),
        backend: BackendKind::Remote,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::thread;

    fn req(retrieved: &[&str]) -> FormulationRequest {
        FormulationRequest {
            description: "place 16 chunks on 8 servers".into(),
            retrieved: retrieved.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn mock_marks_empty_context() {
        let r = formulate(&req(&[]), &Backend::Mock).unwrap();
        assert!(r.text.contains(OBJECTIVE_SKELETON));
        assert!(r.text.contains(NO_KNOWLEDGE_MARKER));
        assert_eq!(r.backend, BackendKind::Mock);
    }

    #[test]
    fn mock_keeps_retrieval_order_and_is_deterministic() {
        let q = req(&["zeta first", "alpha second"]);
        let a = formulate(&q, &Backend::Mock).unwrap();
        assert_eq!(a, formulate(&q, &Backend::Mock).unwrap());
        let (i, j) = (a.text.find("[1] zeta first").unwrap(), a.text.find("[2] alpha second").unwrap());
        assert!(i < j);
        assert!(!a.text.contains(NO_KNOWLEDGE_MARKER));
    }

    /// Serves one canned HTTP response and hands back the raw request.
    fn one_shot_server(status: &'static str, body: &'static str) -> (String, thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = sock.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(h) = text.find("\r\n\r\n") {
                    let len = text[..h]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= h + 4 + len {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            write!(
                sock,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            String::from_utf8(buf).unwrap()
        });
        (url, handle)
    }

    fn remote_cfg(url: String) -> Backend {
        Backend::Remote(RemoteConfig {
            url,
            api_key: Some("secret".into()),
            model: "test-model".into(),
            timeout: Duration::from_secs(5),
        })
    }

    #[test]
    fn remote_success_returns_content() {
        let (url, h) = one_shot_server("200 OK", r#"{"choices":[{"message":{"role":"assistant","content":"formulated"}}]}"#);
        let r = formulate(&req(&["ctx one", "ctx two"]), &remote_cfg(url)).unwrap();
        assert_eq!(r.text, "formulated");
        assert_eq!(r.backend, BackendKind::Remote);
        let raw = h.join().unwrap();
        assert!(raw.contains("Bearer secret"));
        let body: serde_json::Value = serde_json::from_str(&raw[raw.find("\r\n\r\n").unwrap() + 4..]).unwrap();
        assert_eq!(body["model"], "test-model");
        let user = body["messages"][1]["content"].as_str().unwrap();
        assert!(user.find("ctx one").unwrap() < user.find("ctx two").unwrap());
    }

    #[test]
    fn remote_status_error_carries_code() {
        let (url, h) = one_shot_server("401 Unauthorized", r#"{"error":"bad key"}"#);
        match formulate(&req(&[]), &remote_cfg(url)) {
            Err(Error::Remote { status: Some(401), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        h.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_is_remote_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let r = formulate(&req(&[]), &remote_cfg(format!("http://127.0.0.1:{port}/x")));
        assert!(matches!(r, Err(Error::Remote { status: None, .. })));
    }
}
