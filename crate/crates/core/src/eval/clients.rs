//! External metric models behind a small JSON contract.
//!
//! A request is `{"utterance_id", "audio_path", "reference_path"?}`; a
//! response is `{"metric"?, "value"}` where `value` is a number for score
//! clients and a string for transcript or phoneme clients.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientOutput {
    /// A scalar score for the enhanced audio.
    #[default]
    Score,
    /// A transcript, scored locally as word error rate.
    Transcript,
    /// A space-separated phoneme string, scored locally as phoneme similarity.
    Phonemes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transport {
    /// Spawns `program args..`, writes the request to stdin and reads the
    /// response from stdout.
    Command {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
    /// POSTs the request as JSON.
    Http { url: String },
}

/// One entry of the client configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    /// Metric column this client fills, e.g. `utmos` or `wer`.
    pub metric: String,
    #[serde(default)]
    pub output: ClientOutput,
    pub transport: Transport,
    #[serde(default = "default_timeout")]
    pub timeout_seconds: f64,
    /// Extra attempts after the first failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default)]
    pub needs_reference: bool,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_retries() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub utterance_id: String,
    pub audio_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClientValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResponse {
    #[serde(default)]
    pub metric: Option<String>,
    pub value: ClientValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub needs_reference: bool,
    pub output: ClientOutput,
}

pub trait MetricClient: Send + Sync {
    fn metric(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn query(&self, request: &ClientRequest) -> Result<ClientValue>;
}

/// A configured external model with timeout and retry policy.
#[derive(Debug, Clone)]
pub struct ExternalMetricClient {
    spec: ClientSpec,
}

impl ExternalMetricClient {
    pub fn new(spec: ClientSpec) -> Result<Self> {
        if spec.metric.trim().is_empty() {
            return Err(Error::invalid("client metric name is empty"));
        }
        if !(spec.timeout_seconds.is_finite() && spec.timeout_seconds > 0.0) {
            return Err(Error::invalid(format!("client `{}` needs a positive timeout", spec.metric)));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ClientSpec {
        &self.spec
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Client { client: self.spec.metric.clone(), detail: detail.into() }
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.spec.timeout_seconds)
    }

    fn attempt(&self, request: &ClientRequest) -> Result<ClientResponse> {
        match &self.spec.transport {
            Transport::Command { program, args } => self.run_command(program, args, request),
            Transport::Http { url } => self.post(url, request),
        }
    }

    fn run_command(&self, program: &str, args: &[String], request: &ClientRequest) -> Result<ClientResponse> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| self.fail(format!("cannot start `{program}`: {e}")))?;
        let payload = serde_json::to_vec(request)?;
        if let Some(mut stdin) = child.stdin.take() {
            // A client that exits without reading stdin is judged by its output.
            let _ = stdin.write_all(&payload);
        }
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let deadline = Instant::now() + self.timeout();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(self.fail(format!("timed out after {:.1} s", self.spec.timeout_seconds)));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        let out = out_reader.join().map_err(|_| self.fail("stdout reader panicked"))??;
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(self.fail(format!("exited with {status}: {}", err.trim())));
        }
        serde_json::from_slice(&out).map_err(|e| self.fail(format!("bad response: {e}")))
    }

    fn post(&self, url: &str, request: &ClientRequest) -> Result<ClientResponse> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout())).build().into();
        let mut response = agent.post(url).send_json(request).map_err(|e| self.fail(e.to_string()))?;
        response.body_mut().read_json::<ClientResponse>().map_err(|e| self.fail(format!("bad response: {e}")))
    }
}

impl MetricClient for ExternalMetricClient {
    fn metric(&self) -> &str {
        &self.spec.metric
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { needs_reference: self.spec.needs_reference, output: self.spec.output }
    }

    fn query(&self, request: &ClientRequest) -> Result<ClientValue> {
        let mut last = None;
        for attempt in 0..=self.spec.retries {
            match self.attempt(request) {
                Ok(resp) => {
                    if let Some(m) = &resp.metric {
                        if m != &self.spec.metric {
                            return Err(self.fail(format!("answered for metric `{m}`")));
                        }
                    }
                    let expects_number = self.spec.output == ClientOutput::Score;
                    return match (resp.value, expects_number) {
                        (ClientValue::Number(v), true) if v.is_finite() => Ok(ClientValue::Number(v)),
                        (ClientValue::Number(v), true) => Err(self.fail(format!("non-finite score {v}"))),
                        (ClientValue::Text(t), false) => Ok(ClientValue::Text(t)),
                        (_, true) => Err(self.fail("expected a numeric value")),
                        (_, false) => Err(self.fail("expected a text value")),
                    };
                }
                Err(e) => {
                    tracing::warn!(metric = %self.spec.metric, attempt, utterance = %request.utterance_id, "client error: {e}");
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shell(script: &str, timeout: f64, retries: u32) -> ExternalMetricClient {
        ExternalMetricClient::new(ClientSpec {
            metric: "utmos".into(),
            output: ClientOutput::Score,
            transport: Transport::Command { program: "sh".into(), args: vec!["-c".into(), script.into()] },
            timeout_seconds: timeout,
            retries,
            needs_reference: false,
        })
        .unwrap()
    }

    fn request() -> ClientRequest {
        ClientRequest { utterance_id: "u1".into(), audio_path: "/tmp/u1.wav".into(), reference_path: None }
    }

    #[test]
    fn command_client_round_trip() {
        let c = shell(r#"cat > /dev/null; echo '{"metric":"utmos","value":3.5}'"#, 5.0, 0);
        assert_eq!(c.query(&request()).unwrap(), ClientValue::Number(3.5));
    }

    #[test]
    fn command_client_sees_request() {
        let c = shell(r#"grep -q '"utterance_id":"u1"' && echo '{"value":1}'"#, 5.0, 0);
        assert_eq!(c.query(&request()).unwrap(), ClientValue::Number(1.0));
    }

    #[test]
    fn command_client_times_out() {
        let c = shell("sleep 5", 0.2, 1);
        let t = Instant::now();
        let err = c.query(&request()).unwrap_err();
        assert!(err.to_string().contains("timed out"), "{err}");
        assert!(t.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn wrong_metric_or_type_is_rejected() {
        assert!(shell(r#"echo '{"metric":"sbs","value":1}'"#, 5.0, 0).query(&request()).is_err());
        assert!(shell(r#"echo '{"value":"text"}'"#, 5.0, 0).query(&request()).is_err());
        assert!(shell("exit 3", 5.0, 0).query(&request()).is_err());
    }

    #[test]
    fn spec_parses_from_json() {
        let s: ClientSpec = serde_json::from_str(
            r#"{"metric":"wer","output":"transcript","transport":{"kind":"http","url":"http://localhost:9/asr"}}"#,
        )
        .unwrap();
        assert_eq!(s.output, ClientOutput::Transcript);
        assert_eq!(s.retries, 1);
        let bad =
            serde_json::from_str::<ClientSpec>(r#"{"metric":"x","transport":{"kind":"http","url":"u"},"colour":1}"#);
        assert!(bad.unwrap_err().to_string().contains("colour"));
    }
}
