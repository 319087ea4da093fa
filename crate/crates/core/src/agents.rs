//! Reasoning backends (scripted and chat-completion), decision-document
//! schemas, instruction parsing and the bounded reason-act loop.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::context::{TargetSpec, TaskTargets};
use crate::error::write_file;
use crate::zoo::{self, Family};
use crate::{CoreError, Qoi, Result};

pub const PROMPT_VERSION: &str = "plume.prompts/v1 (original templates)";
const SYSTEM_PROMPT: &str = include_str!("../prompts/system.txt");
const RANKING_PROMPT: &str = include_str!("../prompts/ranking.txt");
const SWITCH_PROMPT: &str = include_str!("../prompts/switch_ranking.txt");
const PREPROCESSING_PROMPT: &str = include_str!("../prompts/preprocessing.txt");
const DIAGNOSIS_PROMPT: &str = include_str!("../prompts/diagnosis.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
}

impl AgentMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_call: None,
        }
    }
}

/// Tool messages must answer an earlier tool call.
pub fn validate_transcript(messages: &[AgentMessage]) -> Result<()> {
    let mut pending = 0usize;
    for (i, m) in messages.iter().enumerate() {
        if m.tool_call.is_some() {
            pending += 1;
        }
        if m.role == Role::Tool {
            if pending == 0 {
                return Err(CoreError::Schema {
                    field: format!("messages[{i}]"),
                    reason: "tool message without a preceding tool call".into(),
                });
            }
            pending -= 1;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Scripted,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub backend: Backend,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    #[serde(skip)]
    pub token: Option<String>,
    pub max_steps: usize,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub retries: u32,
    /// Use the scripted reasoner when the endpoint fails or replies off-schema.
    pub fallback_to_scripted: bool,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Scripted,
            endpoint: None,
            model_name: None,
            token: None,
            max_steps: 16,
            temperature: 0.0,
            timeout_secs: 60,
            retries: 1,
            fallback_to_scripted: true,
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(CoreError::Config("max_steps must be at least 1".into()));
        }
        if self.backend == Backend::Llm && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(CoreError::Config("llm backend needs an endpoint".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonStage {
    Preprocessing,
    Ranking,
    SwitchRanking,
    DiagnosisNarration,
}

impl ReasonStage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "preprocessing" => Ok(Self::Preprocessing),
            "ranking" => Ok(Self::Ranking),
            "switch_ranking" => Ok(Self::SwitchRanking),
            "diagnosis_narration" => Ok(Self::DiagnosisNarration),
            other => Err(CoreError::Reasoner(format!("unknown reasoning stage `{other}`"))),
        }
    }
}

/// Everything a backend may see when making one decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub stage: ReasonStage,
    pub qoi: Option<Qoi>,
    pub profile_text: String,
    pub fraction_near_zero: Option<f64>,
    /// Cards eligible for ranking, in registry order.
    pub candidates: Vec<Family>,
    /// Cards tried so far with their best validation R².
    pub history: Vec<(Family, Option<f64>)>,
    pub diagnosis: Option<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub document: Value,
    pub backend: Backend,
    /// Set when the LLM backend failed and the scripted answer was used.
    pub fallback: Option<String>,
}

fn schema_err(field: &str, reason: impl Into<String>) -> CoreError {
    CoreError::Schema {
        field: field.into(),
        reason: reason.into(),
    }
}

fn require_str<'a>(doc: &'a Value, field: &str) -> Result<&'a str> {
    doc.get(field)
        .ok_or_else(|| schema_err(field, "missing"))?
        .as_str()
        .ok_or_else(|| schema_err(field, "must be a string"))
}

/// Checks a decision document against the stage's schema.
pub fn validate_decision(req: &DecisionRequest, doc: &Value) -> Result<()> {
    if !doc.is_object() {
        return Err(schema_err("$", "decision must be a JSON object"));
    }
    match req.stage {
        ReasonStage::Ranking | ReasonStage::SwitchRanking => {
            require_str(doc, "rationale")?;
            let list = doc
                .get("ranking")
                .ok_or_else(|| schema_err("ranking", "missing"))?
                .as_array()
                .ok_or_else(|| schema_err("ranking", "must be an array"))?;
            let mut seen = Vec::new();
            for (i, item) in list.iter().enumerate() {
                let field = format!("ranking[{i}]");
                let name = item.as_str().ok_or_else(|| schema_err(&field, "must be a string"))?;
                let fam = Family::parse(name).ok_or_else(|| schema_err(&field, format!("unknown architecture `{name}`")))?;
                if !req.candidates.contains(&fam) {
                    return Err(schema_err(&field, format!("`{name}` is not a candidate")));
                }
                if seen.contains(&fam) {
                    return Err(schema_err(&field, format!("`{name}` listed twice")));
                }
                seen.push(fam);
            }
            if seen.is_empty() {
                return Err(schema_err("ranking", "must not be empty"));
            }
            Ok(())
        }
        ReasonStage::Preprocessing => {
            require_str(doc, "rationale")?;
            if require_str(doc, "pressure")? != "zscore" {
                return Err(schema_err("pressure", "must be \"zscore\""));
            }
            if require_str(doc, "saturation")? != "identity" {
                return Err(schema_err("saturation", "must be \"identity\""));
            }
            Ok(())
        }
        ReasonStage::DiagnosisNarration => require_str(doc, "narrative").map(|_| ()),
    }
}

/// Ranking from a validated document; candidates the backend omitted are
/// appended in registry order.
pub fn ranking_of(doc: &Value, candidates: &[Family]) -> Vec<Family> {
    let mut out: Vec<Family> = doc
        .get("ranking")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|v| v.as_str().and_then(Family::parse)).collect())
        .unwrap_or_default();
    for &c in candidates {
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.retain(|c| candidates.contains(c));
    out
}

/// Deterministic reference decisions.
pub fn scripted_reason(req: &DecisionRequest) -> Value {
    match req.stage {
        ReasonStage::Preprocessing => json!({
            "pressure": "zscore",
            "saturation": "identity",
            "rationale": "Pressure varies smoothly around a large hydrostatic offset, so it is scaled to bar and \
                          standardised with training statistics. Saturation already lies in [0, 1] and is kept as is.",
        }),
        ReasonStage::Ranking | ReasonStage::SwitchRanking => {
            let sparse = req.fraction_near_zero.unwrap_or(0.0) > 0.9;
            let order = zoo::scripted_ranking(req.fraction_near_zero.unwrap_or(0.0));
            let ranking: Vec<&str> = order
                .iter()
                .filter(|f| req.candidates.contains(f))
                .map(|f| f.as_str())
                .collect();
            let rationale = if sparse {
                format!(
                    "Most of the {} field is near zero with a sharp displacement front. Architectures that support the \
                     auxiliary occupancy loss and keep full-resolution skip connections come first; residual blocks \
                     before plain ones.",
                    req.qoi.map_or("target", Qoi::as_str)
                )
            } else {
                format!(
                    "The {} field is dense and smooth with multi-scale structure. Residual multi-scale U-Nets come first, \
                     followed by spectral operators that capture global coupling.",
                    req.qoi.map_or("target", Qoi::as_str)
                )
            };
            let rationale = if req.stage == ReasonStage::SwitchRanking && !req.history.is_empty() {
                let tried: Vec<String> = req
                    .history
                    .iter()
                    .map(|(f, q)| match q {
                        Some(q) => format!("{f} (best R2 {q:.4})"),
                        None => format!("{f} (no valid result)"),
                    })
                    .collect();
                format!("{rationale} Already tried: {}.", tried.join(", "))
            } else {
                rationale
            };
            json!({ "ranking": ranking, "rationale": rationale })
        }
        ReasonStage::DiagnosisNarration => {
            let state = req
                .diagnosis
                .as_ref()
                .and_then(|d| d.get("state"))
                .and_then(Value::as_str)
                .unwrap_or("unknown");
            let text = match state {
                "unstable" => "Training became numerically unstable; the search is restarted with a lower learning-rate ceiling and stronger clipping.",
                "converging" => "Validation quality is still improving, so training continues from the latest checkpoint.",
                "underperforming" => "Validation quality has plateaued below the target; another architecture is tried.",
                _ => "No diagnosis available.",
            };
            json!({ "narrative": text })
        }
    }
}

pub trait Reasoner {
    fn backend(&self) -> Backend;
    fn decide(&mut self, req: &DecisionRequest) -> Result<Decision>;
}

#[derive(Clone, Debug, Default)]
pub struct ScriptedReasoner;

impl Reasoner for ScriptedReasoner {
    fn backend(&self) -> Backend {
        Backend::Scripted
    }

    fn decide(&mut self, req: &DecisionRequest) -> Result<Decision> {
        let document = scripted_reason(req);
        validate_decision(req, &document)?;
        Ok(Decision {
            document,
            backend: Backend::Scripted,
            fallback: None,
        })
    }
}

fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut s = template.to_string();
    for (k, v) in vars {
        s = s.replace(&format!("{{{{{k}}}}}"), v);
    }
    s
}

pub fn build_prompt(req: &DecisionRequest) -> Vec<AgentMessage> {
    let cards: Vec<String> = zoo::list_models()
        .into_iter()
        .filter(|c| req.candidates.contains(&c.name))
        .map(|c| format!("- {}: {}", c.name, c.description))
        .collect();
    let history: Vec<String> = req
        .history
        .iter()
        .map(|(f, q)| format!("- {f}: {}", q.map_or("none".to_string(), |q| format!("{q:.4}"))))
        .collect();
    let vars = [
        ("qoi", req.qoi.map_or("all", Qoi::as_str).to_string()),
        ("profile", req.profile_text.clone()),
        ("cards", cards.join("\n")),
        ("history", history.join("\n")),
        (
            "diagnosis",
            req.diagnosis.as_ref().map(|d| d.to_string()).unwrap_or_default(),
        ),
    ];
    let template = match req.stage {
        ReasonStage::Ranking => RANKING_PROMPT,
        ReasonStage::SwitchRanking => SWITCH_PROMPT,
        ReasonStage::Preprocessing => PREPROCESSING_PROMPT,
        ReasonStage::DiagnosisNarration => DIAGNOSIS_PROMPT,
    };
    vec![
        AgentMessage::new(Role::System, SYSTEM_PROMPT.trim()),
        AgentMessage::new(Role::User, fill(template, &vars)),
    ]
}

/// Pulls the first JSON object out of a reply that may wrap it in prose.
pub fn extract_json(text: &str) -> Result<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(text.trim()) {
        return Ok(v);
    }
    let start = text.find('{').ok_or_else(|| schema_err("content", "no JSON object in reply"))?;
    let end = text.rfind('}').ok_or_else(|| schema_err("content", "no JSON object in reply"))?;
    if end < start {
        return Err(schema_err("content", "no JSON object in reply"));
    }
    serde_json::from_str(&text[start..=end]).map_err(|e| schema_err("content", e.to_string()))
}

/// Chat-completion client. Every request/response pair is archived.
pub struct LlmReasoner {
    config: ReasonerConfig,
    agent: ureq::Agent,
    payload_dir: Option<PathBuf>,
    calls: u32,
}

impl LlmReasoner {
    pub fn new(config: ReasonerConfig, payload_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            agent,
            payload_dir,
            calls: 0,
        })
    }

    fn archive(&self, name: &str, value: &Value) {
        if let Some(dir) = &self.payload_dir {
            if let Ok(bytes) = serde_json::to_vec_pretty(value) {
                let _ = write_file(&dir.join(name), &bytes);
            }
        }
    }

    fn post(&self, body: &Value) -> Result<Value> {
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let mut req = self.agent.post(endpoint).header("Content-Type", "application/json");
        if let Some(t) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| CoreError::Reasoner(format!("request to {endpoint} failed: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| CoreError::Reasoner(format!("reading response failed: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(CoreError::Reasoner(format!("endpoint returned HTTP {status}")));
        }
        serde_json::from_str(&text).map_err(|e| schema_err("$", format!("response is not JSON: {e}")))
    }

    /// One chat-completion round trip.
    pub fn complete(&mut self, messages: &[AgentMessage]) -> Result<AgentMessage> {
        validate_transcript(messages)?;
        let body = json!({
            "model": self.config.model_name.clone().unwrap_or_else(|| "default".into()),
            "messages": messages.iter().map(|m| json!({"role": m.role, "content": m.content})).collect::<Vec<_>>(),
            "temperature": self.config.temperature,
        });
        self.calls += 1;
        let n = self.calls;
        self.archive(&format!("{n:04}-request.json"), &body);
        let mut last_err = None;
        for _ in 0..=self.config.retries {
            match self.post(&body) {
                Ok(reply) => {
                    self.archive(&format!("{n:04}-response.json"), &reply);
                    return parse_completion(&reply);
                }
                Err(e @ CoreError::Schema { .. }) => return Err(e),
                Err(e) => last_err = Some(e),
            }
        }
        Err(last_err.unwrap_or_else(|| CoreError::Reasoner("no attempt made".into())))
    }

    /// Sends a minimal request to confirm the endpoint answers.
    pub fn probe(&mut self) -> Result<()> {
        self.complete(&[AgentMessage::new(Role::User, "Reply with {}")]).map(|_| ())
    }
}

/// `choices[0].message` of a chat-completion response.
pub fn parse_completion(reply: &Value) -> Result<AgentMessage> {
    let choices = reply
        .get("choices")
        .ok_or_else(|| schema_err("choices", "missing"))?
        .as_array()
        .ok_or_else(|| schema_err("choices", "must be an array"))?;
    let msg = choices
        .first()
        .ok_or_else(|| schema_err("choices[0]", "missing"))?
        .get("message")
        .ok_or_else(|| schema_err("choices[0].message", "missing"))?;
    let content = msg
        .get("content")
        .ok_or_else(|| schema_err("choices[0].message.content", "missing"))?
        .as_str()
        .ok_or_else(|| schema_err("choices[0].message.content", "must be a string"))?;
    Ok(AgentMessage::new(Role::Assistant, content))
}

impl Reasoner for LlmReasoner {
    fn backend(&self) -> Backend {
        Backend::Llm
    }

    fn decide(&mut self, req: &DecisionRequest) -> Result<Decision> {
        let mut messages = build_prompt(req);
        let mut failure = String::new();
        for attempt in 0..2 {
            match self.complete(&messages) {
                Ok(reply) => {
                    let parsed = extract_json(&reply.content).and_then(|doc| validate_decision(req, &doc).map(|_| doc));
                    match parsed {
                        Ok(document) => {
                            return Ok(Decision {
                                document,
                                backend: Backend::Llm,
                                fallback: None,
                            })
                        }
                        Err(e) => {
                            failure = e.to_string();
                            if attempt == 0 {
                                messages.push(reply);
                                messages.push(AgentMessage::new(
                                    Role::User,
                                    format!("Your reply did not match the required format ({failure}). Answer again with only the JSON object."),
                                ));
                            }
                        }
                    }
                }
                Err(e) => {
                    failure = e.to_string();
                    break;
                }
            }
        }
        if !self.config.fallback_to_scripted {
            return Err(CoreError::Reasoner(failure));
        }
        let document = scripted_reason(req);
        validate_decision(req, &document)?;
        Ok(Decision {
            document,
            backend: Backend::Scripted,
            fallback: Some(failure),
        })
    }
}

/// Result of [`parse_instruction`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsedInstruction {
    pub targets: TaskTargets,
    pub recognized: bool,
    pub warnings: Vec<String>,
}

fn number_after(s: &str) -> Option<f64> {
    let s = s.trim_start();
    let end = s
        .char_indices()
        .find(|&(_, c)| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+' || c == 'e' || c == 'E'))
        .map_or(s.len(), |(i, _)| i);
    let mut tok = &s[..end];
    while tok.ends_with('.') {
        tok = &tok[..tok.len() - 1];
    }
    tok.parse().ok()
}

fn clause_target(clause: &str) -> Option<TargetSpec> {
    if clause.contains("as high as possible") || clause.contains("maximi") {
        return Some(TargetSpec::maximize());
    }
    for key in ["higher than", "greater than", "above", "at least", ">=", ">"] {
        if let Some(pos) = clause.find(key) {
            if let Some(t) = number_after(&clause[pos + key.len()..]) {
                return TargetSpec::threshold(t).ok();
            }
        }
    }
    None
}

/// Scripted instruction grammar. Clauses are separated by `;`, `,` or
/// ` and `; a clause naming a quantity applies to it alone, otherwise to both.
pub fn parse_instruction(text: &str) -> ParsedInstruction {
    let lower = text.to_lowercase().replace("r²", "r2");
    let mut targets = TaskTargets::default();
    let mut recognized = false;
    let mut warnings = Vec::new();
    let clauses: Vec<&str> = lower
        .split([';', ','])
        .flat_map(|c| c.split(" and "))
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .collect();
    for clause in clauses {
        let Some(spec) = clause_target(clause) else {
            continue;
        };
        recognized = true;
        let named: Vec<Qoi> = Qoi::ALL
            .into_iter()
            .filter(|q| clause.contains(q.as_str()))
            .collect();
        let apply = if named.is_empty() { Qoi::ALL.to_vec() } else { named };
        for q in apply {
            targets.per_qoi.insert(q, spec);
        }
    }
    if !recognized {
        warnings.push(if text.trim().is_empty() {
            "empty instruction; default targets used".to_string()
        } else {
            format!("instruction `{text}` not understood; default targets used")
        });
    }
    ParsedInstruction {
        targets,
        recognized,
        warnings,
    }
}

/// One decision of a loop policy.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyStep {
    /// Invoke a tool. A successful `terminal` call completes the objective.
    Call { tool: String, args: Value, thought: String, terminal: bool },
    /// Give up with a reason.
    Abort { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tool: String,
    pub args: Value,
    pub result: std::result::Result<Value, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopOutcome {
    pub complete: bool,
    pub steps: usize,
    pub observations: Vec<Observation>,
    pub abort_reason: Option<String>,
}

/// Bounded reason-act loop: at most one tool call per step, at most
/// `max_steps` steps. `on_step` sees every step for auditing.
pub fn agent_loop(
    max_steps: usize,
    policy: &mut dyn FnMut(&[Observation]) -> PolicyStep,
    tools: &mut dyn FnMut(&str, &Value) -> Result<Value>,
    on_step: &mut dyn FnMut(usize, &str, &Observation),
) -> LoopOutcome {
    let mut observations: Vec<Observation> = Vec::new();
    for step in 0..max_steps {
        match policy(&observations) {
            PolicyStep::Abort { reason } => {
                return LoopOutcome {
                    complete: false,
                    steps: step,
                    observations,
                    abort_reason: Some(reason),
                }
            }
            PolicyStep::Call {
                tool,
                args,
                thought,
                terminal,
            } => {
                let result = tools(&tool, &args).map_err(|e| e.to_string());
                let ok = result.is_ok();
                let obs = Observation { tool, args, result };
                on_step(step, &thought, &obs);
                observations.push(obs);
                if terminal && ok {
                    return LoopOutcome {
                        complete: true,
                        steps: step + 1,
                        observations,
                        abort_reason: None,
                    };
                }
            }
        }
    }
    LoopOutcome {
        complete: false,
        steps: max_steps,
        observations,
        abort_reason: Some(format!("step limit {max_steps} reached")),
    }
}

/// Scripted policy of the model-selection agent: rank, then probe memory
/// down the ranking until a card fits, then commit it. A failed tool call is
/// retried once before giving up.
pub fn model_selection_policy(obs: &[Observation]) -> PolicyStep {
    let call = |tool: &str, args: Value, thought: String, terminal: bool| PolicyStep::Call {
        tool: tool.into(),
        args,
        thought,
        terminal,
    };
    let Some(last) = obs.last() else {
        return call("rank", json!({}), "Rank the zoo for this quantity of interest.".into(), false);
    };
    if let Err(e) = &last.result {
        let repeats = obs.iter().rev().take_while(|o| o.tool == last.tool && o.result.is_err()).count();
        if repeats >= 2 {
            return PolicyStep::Abort {
                reason: format!("tool `{}` failed twice: {e}", last.tool),
            };
        }
        return call(&last.tool, last.args.clone(), format!("Retry `{}` after error.", last.tool), last.tool == "commit");
    }
    let ranking: Vec<String> = obs
        .iter()
        .rev()
        .find(|o| o.tool == "rank")
        .and_then(|o| o.result.as_ref().ok())
        .and_then(|v| v.get("ranking"))
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|x| x.as_str().map(String::from)).collect())
        .unwrap_or_default();
    let probed: Vec<&Observation> = obs
        .iter()
        .filter(|o| o.tool == "estimate_memory" && o.result.is_ok())
        .collect();
    if let Some(p) = probed.last().filter(|_| last.tool == "estimate_memory") {
        let feasible = p
            .result
            .as_ref()
            .ok()
            .and_then(|v| v.get("feasible"))
            .and_then(Value::as_bool)
            .unwrap_or(false);
        if feasible {
            let card = p.args.get("card").cloned().unwrap_or(Value::Null);
            return call("commit", json!({ "card": card }), "Highest-ranked feasible card.".into(), true);
        }
    }
    match ranking.get(probed.len()) {
        Some(card) => call(
            "estimate_memory",
            json!({ "card": card }),
            format!("Check that {card} fits the memory budget."),
            false,
        ),
        None => PolicyStep::Abort {
            reason: "no ranked card fits the memory budget".into(),
        },
    }
}
