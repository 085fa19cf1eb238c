//! Single-layer mixture-of-agents: proposers answer the same prompt, an
//! aggregator sees the prompt plus every successful answer and decides.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::sft::SentimentLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Scripted,
    LocalModel,
    Http,
}

/// Reply rule for scripted agents: the first rule whose `contains` is a
/// substring of the prompt supplies the reply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub contains: String,
    pub reply: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Script {
    pub rules: Vec<ScriptRule>,
    /// Reply when no rule matches. Without one, an unmatched prompt is an
    /// agent error.
    pub default: Option<String>,
    /// Sleep before replying; used to exercise timeouts.
    pub delay_ms: u64,
    /// Fail this many calls before answering normally.
    pub fail_first: u32,
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub kind: AgentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_id: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub max_retries: u32,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Where the reply text sits in the response JSON, e.g.
    /// `choices.0.message.content` or `$.choices[0].message.content`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_text_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Script>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl AgentSpec {
    pub fn scripted(name: &str, script: Script) -> Self {
        AgentSpec {
            name: name.to_string(),
            kind: AgentKind::Scripted,
            endpoint: None,
            model_id: String::new(),
            timeout_ms: default_timeout_ms(),
            max_retries: 0,
            api_key_env: None,
            response_text_path: None,
            script: Some(script),
            checkpoint: None,
        }
    }

    /// A scripted agent that always gives the same reply.
    pub fn fixed(name: &str, reply: &str) -> Self {
        Self::scripted(
            name,
            Script {
                default: Some(reply.to_string()),
                ..Script::default()
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("agent '{}': {what}", self.name)));
        if self.name.trim().is_empty() {
            return Err(Error::Config("agent name must be nonempty".into()));
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be >= 1");
        }
        match self.kind {
            AgentKind::Http => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return bad("http agents need an endpoint");
                }
                match self.response_text_path.as_deref() {
                    None | Some("") => return bad("http agents need a response_text_path"),
                    Some(p) => {
                        parse_path(p).map_err(|e| Error::Config(format!("agent '{}': {e}", self.name)))?;
                    }
                }
            }
            AgentKind::Scripted if self.script.is_none() => return bad("scripted agents need a script"),
            AgentKind::LocalModel if self.checkpoint.is_none() => {
                return bad("local_model agents need a checkpoint path")
            }
            _ => {}
        }
        Ok(())
    }
}

/// Anything that can answer a prompt. Implementations must tolerate
/// concurrent calls.
pub trait Agent: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String>;
}

pub struct ScriptedAgent {
    name: String,
    script: Script,
    calls: AtomicU32,
}

impl ScriptedAgent {
    pub fn new(name: &str, script: Script) -> Self {
        ScriptedAgent {
            name: name.to_string(),
            script,
            calls: AtomicU32::new(0),
        }
    }
}

impl Agent for ScriptedAgent {
    fn generate(&self, prompt: &str) -> Result<String> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.script.delay_ms > 0 {
            thread::sleep(Duration::from_millis(self.script.delay_ms));
        }
        if call < self.script.fail_first {
            return Err(Error::Agent {
                agent: self.name.clone(),
                detail: format!("scripted failure on call {}", call + 1),
            });
        }
        self.script
            .rules
            .iter()
            .find(|r| prompt.contains(&r.contains))
            .map(|r| r.reply.clone())
            .or_else(|| self.script.default.clone())
            .ok_or_else(|| Error::Agent {
                agent: self.name.clone(),
                detail: "no scripted reply matches the prompt".into(),
            })
    }
}

/// Wraps the toy model: replies with its label-scoring decision.
pub struct LocalModelAgent {
    model: Model,
}

impl LocalModelAgent {
    pub fn new(model: Model) -> Self {
        LocalModelAgent { model }
    }
}

impl Agent for LocalModelAgent {
    fn generate(&self, prompt: &str) -> Result<String> {
        let scores = self.model.score_labels(prompt)?;
        Ok(format!("The sentiment of this text is: {}", scores.label.word()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum PathStep {
    Key(String),
    Index(usize),
}

fn parse_path(path: &str) -> Result<Vec<PathStep>> {
    let p = path.strip_prefix('$').unwrap_or(path);
    let normalized = p.replace('[', ".").replace(']', "");
    let steps: Vec<PathStep> = normalized
        .split('.')
        .filter(|s| !s.is_empty())
        .map(|s| match s.parse::<usize>() {
            Ok(i) => PathStep::Index(i),
            Err(_) => PathStep::Key(s.to_string()),
        })
        .collect();
    if steps.is_empty() {
        return Err(Error::Input(format!("empty response_text_path '{path}'")));
    }
    Ok(steps)
}

/// Follows a dotted selector into a JSON document and returns the string
/// found there.
pub fn extract_text(doc: &serde_json::Value, path: &str) -> Result<String> {
    let mut cur = doc;
    for step in parse_path(path)? {
        let next = match (&step, cur) {
            (PathStep::Index(i), serde_json::Value::Array(a)) => a.get(*i),
            (PathStep::Index(i), serde_json::Value::Object(o)) => o.get(&i.to_string()),
            (PathStep::Key(k), serde_json::Value::Object(o)) => o.get(k),
            _ => None,
        };
        cur = next.ok_or_else(|| Error::Input(format!("response has nothing at '{path}'")))?;
    }
    cur.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Input(format!("value at '{path}' is not a string")))
}

/// Request body sent to remote agents.
pub fn chat_request(model_id: &str, prompt: &str) -> serde_json::Value {
    serde_json::json!({
        "model": model_id,
        "messages": [{"role": "user", "content": prompt}],
    })
}

#[cfg(feature = "http")]
pub struct HttpAgent {
    spec: AgentSpec,
    client: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpAgent {
    pub fn new(spec: AgentSpec) -> Result<Self> {
        spec.validate()?;
        let client = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(spec.timeout_ms)))
            .build()
            .into();
        Ok(HttpAgent { spec, client })
    }
}

#[cfg(feature = "http")]
impl Agent for HttpAgent {
    fn generate(&self, prompt: &str) -> Result<String> {
        let agent_err = |detail: String| Error::Agent {
            agent: self.spec.name.clone(),
            detail,
        };
        let endpoint = self.spec.endpoint.as_deref().unwrap_or_default();
        let mut req = self.client.post(endpoint);
        if let Some(var) = &self.spec.api_key_env {
            let key = std::env::var(var).map_err(|_| agent_err(format!("environment variable {var} is not set")))?;
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(chat_request(&self.spec.model_id, prompt))
            .map_err(|e| agent_err(format!("request failed: {e}")))?;
        let doc: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| agent_err(format!("bad response body: {e}")))?;
        extract_text(&doc, self.spec.response_text_path.as_deref().unwrap_or_default())
            .map_err(|e| agent_err(e.to_string()))
    }
}

/// A spec paired with the agent that serves it.
#[derive(Clone)]
pub struct BoundAgent {
    pub spec: AgentSpec,
    pub agent: Arc<dyn Agent>,
}

impl BoundAgent {
    pub fn new(spec: AgentSpec, agent: Arc<dyn Agent>) -> Result<Self> {
        spec.validate()?;
        Ok(BoundAgent { spec, agent })
    }

    /// Builds the agent described by `spec`, loading checkpoints for local
    /// model agents.
    pub fn from_spec(spec: &AgentSpec) -> Result<Self> {
        spec.validate()?;
        let agent: Arc<dyn Agent> = match spec.kind {
            AgentKind::Scripted => Arc::new(ScriptedAgent::new(
                &spec.name,
                spec.script.clone().unwrap_or_default(),
            )),
            AgentKind::LocalModel => {
                let path = spec.checkpoint.as_deref().unwrap_or(std::path::Path::new(""));
                Arc::new(LocalModelAgent::new(crate::checkpoint::load(path)?))
            }
            #[cfg(feature = "http")]
            AgentKind::Http => Arc::new(HttpAgent::new(spec.clone())?),
            #[cfg(not(feature = "http"))]
            AgentKind::Http => {
                return Err(Error::Config(format!(
                    "agent '{}': http agents need the `http` feature",
                    spec.name
                )))
            }
        };
        Ok(BoundAgent {
            spec: spec.clone(),
            agent,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    Timeout,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub agent_name: String,
    pub text: String,
    /// Wall-clock time across all attempts.
    pub latency_ms: u64,
    pub status: ResponseStatus,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_detail: Option<String>,
}

impl AgentResponse {
    pub fn is_ok(&self) -> bool {
        self.status == ResponseStatus::Ok
    }
}

/// Calls one agent with the retry and per-attempt timeout policy from its
/// spec. Failures come back as a response, never as an error.
pub fn call_agent(agent: &BoundAgent, prompt: &str) -> AgentResponse {
    let spec = &agent.spec;
    let start = Instant::now();
    let timeout = Duration::from_millis(spec.timeout_ms);
    let mut status = ResponseStatus::Error;
    let mut detail = String::new();
    let mut attempts = 0;
    while attempts <= spec.max_retries {
        attempts += 1;
        let (tx, rx) = mpsc::channel();
        let worker = Arc::clone(&agent.agent);
        let p = prompt.to_owned();
        // A stalled attempt is abandoned, not joined.
        thread::spawn(move || {
            let _ = tx.send(worker.generate(&p));
        });
        match rx.recv_timeout(timeout) {
            Ok(Ok(text)) if !text.trim().is_empty() => {
                return AgentResponse {
                    agent_name: spec.name.clone(),
                    text,
                    latency_ms: start.elapsed().as_millis() as u64,
                    status: ResponseStatus::Ok,
                    attempts,
                    error_detail: None,
                };
            }
            Ok(Ok(_)) => (status, detail) = (ResponseStatus::Error, "empty reply".to_string()),
            Ok(Err(e)) => (status, detail) = (ResponseStatus::Error, e.to_string()),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                (status, detail) = (ResponseStatus::Timeout, format!("no reply within {} ms", spec.timeout_ms))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                (status, detail) = (ResponseStatus::Error, "agent worker panicked".to_string())
            }
        }
    }
    AgentResponse {
        agent_name: spec.name.clone(),
        text: String::new(),
        latency_ms: start.elapsed().as_millis() as u64,
        status,
        attempts,
        error_detail: Some(detail),
    }
}

/// Sends `prompt` to every proposer concurrently. Responses come back in
/// proposer order.
pub fn fan_out(prompt: &str, proposers: &[BoundAgent]) -> Result<Vec<AgentResponse>> {
    if proposers.is_empty() {
        return Err(Error::Config("at least one proposer agent is required".into()));
    }
    Ok(thread::scope(|s| {
        let handles: Vec<_> = proposers.iter().map(|p| s.spawn(move || call_agent(p, prompt))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("proposer call does not panic"))
            .collect()
    }))
}

pub const AGGREGATOR_INSTRUCTION: &str = "You are the final decision-maker for a financial sentiment classification task. \
Several agents independently classified the same input. Read the original prompt and their answers, \
then give the final sentiment label.";

pub const AGGREGATOR_CLOSING: &str = "Answer with exactly one word: positive, negative, or neutral.";

/// Lays out the aggregator's input. Only ok responses contribute text;
/// failed agents are listed by name and status.
pub fn build_aggregator_prompt(original: &str, responses: &[AgentResponse]) -> Result<String> {
    let ok: Vec<&AgentResponse> = responses.iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(Error::NoProposerOutput);
    }
    let mut out = String::new();
    out.push_str(AGGREGATOR_INSTRUCTION);
    out.push_str("\n\nOriginal prompt:\n");
    out.push_str(original);
    out.push_str("\n\n");
    for (i, r) in ok.iter().enumerate() {
        out.push_str(&format!("{}. Agent {} says:\n{}\n\n", i + 1, r.agent_name, r.text));
    }
    let failed: Vec<String> = responses
        .iter()
        .filter(|r| !r.is_ok())
        .map(|r| {
            let why = match r.status {
                ResponseStatus::Timeout => "timeout",
                _ => "error",
            };
            format!("{} ({why})", r.agent_name)
        })
        .collect();
    if !failed.is_empty() {
        out.push_str(&format!("Agents without a response: {}\n\n", failed.join(", ")));
    }
    out.push_str(AGGREGATOR_CLOSING);
    out.push('\n');
    Ok(out)
}

/// Finds label words as whole words, ignoring case. When several appear,
/// the last one is the answer.
pub fn parse_label(text: &str) -> Option<SentimentLabel> {
    text.split(|c: char| !c.is_alphanumeric())
        .rev()
        .find_map(|w| w.to_ascii_lowercase().parse::<SentimentLabel>().ok())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoaFlags {
    pub all_proposers_ok: bool,
    pub label_parsed: bool,
    /// The parseable proposer labels are not all the same.
    pub disagreement: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoaRecord {
    pub original_prompt: String,
    pub responses: Vec<AgentResponse>,
    pub aggregator_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregator_response: Option<AgentResponse>,
    pub final_text: String,
    /// `None` when the aggregator's reply names no label.
    pub final_label: Option<SentimentLabel>,
    pub flags: MoaFlags,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<SentimentLabel>,
}

impl MoaRecord {
    /// Copy with every latency zeroed, for comparing runs.
    pub fn without_timing(&self) -> MoaRecord {
        let mut r = self.clone();
        for resp in r.responses.iter_mut().chain(r.aggregator_response.as_mut()) {
            resp.latency_ms = 0;
        }
        r
    }
}

fn disagreement(responses: &[AgentResponse]) -> bool {
    let mut labels = responses.iter().filter(|r| r.is_ok()).filter_map(|r| parse_label(&r.text));
    match labels.next() {
        Some(first) => labels.any(|l| l != first),
        None => false,
    }
}

/// One full MoA pass. Agent failures end up in the record; only an empty
/// proposer list is an error.
pub fn run_moa(prompt: &str, proposers: &[BoundAgent], aggregator: &BoundAgent) -> Result<MoaRecord> {
    let responses = fan_out(prompt, proposers)?;
    let mut record = MoaRecord {
        original_prompt: prompt.to_string(),
        aggregator_prompt: String::new(),
        aggregator_response: None,
        final_text: String::new(),
        final_label: None,
        flags: MoaFlags {
            all_proposers_ok: responses.iter().all(AgentResponse::is_ok),
            label_parsed: false,
            disagreement: disagreement(&responses),
        },
        responses,
        status: RunStatus::Error,
        error: None,
        gold_label: None,
    };
    let agg_prompt = match build_aggregator_prompt(prompt, &record.responses) {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(e.to_string());
            return Ok(record);
        }
    };
    let reply = call_agent(aggregator, &agg_prompt);
    record.aggregator_prompt = agg_prompt;
    if reply.is_ok() {
        record.final_text = reply.text.clone();
        record.final_label = parse_label(&reply.text);
        record.flags.label_parsed = record.final_label.is_some();
        record.status = RunStatus::Ok;
    } else {
        record.error = Some(format!(
            "aggregator '{}' failed: {}",
            reply.agent_name,
            reply.error_detail.as_deref().unwrap_or("unknown")
        ));
    }
    record.aggregator_response = Some(reply);
    Ok(record)
}

fn default_parallelism() -> usize {
    1
}

/// The agents section of a config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentsConfig {
    pub proposers: Vec<AgentSpec>,
    pub aggregator: AgentSpec,
    /// How many prompts `run_batch` handles at once.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl AgentsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proposers.is_empty() {
            return Err(Error::Config("agents.proposers must list at least one agent".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("agents.parallelism must be >= 1".into()));
        }
        for (i, p) in self.proposers.iter().enumerate() {
            p.validate()?;
            if self.proposers[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::Config(format!("agents.proposers: duplicate name '{}'", p.name)));
            }
        }
        self.aggregator.validate()
    }

    pub fn bind(&self) -> Result<(Vec<BoundAgent>, BoundAgent)> {
        self.validate()?;
        let proposers = self.proposers.iter().map(BoundAgent::from_spec).collect::<Result<_>>()?;
        Ok((proposers, BoundAgent::from_spec(&self.aggregator)?))
    }
}

/// One line of a prompts file. Dataset split files parse as this too.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptItem {
    pub prompt: String,
    #[serde(default)]
    pub label: Option<SentimentLabel>,
}

/// Runs every item, `parallelism` at a time, keeping input order.
pub fn run_batch(
    items: &[PromptItem],
    proposers: &[BoundAgent],
    aggregator: &BoundAgent,
    parallelism: usize,
) -> Result<Vec<MoaRecord>> {
    if proposers.is_empty() {
        return Err(Error::Config("at least one proposer agent is required".into()));
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<MoaRecord>>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    thread::scope(|s| {
        for _ in 0..parallelism.max(1).min(items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let rec = run_moa(&item.prompt, proposers, aggregator).map(|mut r| {
                    r.gold_label = item.label;
                    r
                });
                results.lock().expect("results lock")[i] = Some(rec);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}
