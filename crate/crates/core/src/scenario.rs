//! Recorded-trace scenarios: concrete HTTP event sequences with per-step
//! expectations, replayed through a fresh monitor context.
//!
//! A scenario file is line-delimited JSON: a header object followed by one
//! object per step. Step strings may embed `{{placeholder:id}}`, which the
//! runner resolves to the placeholder most recently created for `id` — the
//! client can only echo what it observed, and that is a placeholder.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::automaton::{compose, CompileError, ViolationKind};
use crate::engine::{
    EngineConfig, EngineError, EventOutcome, MonitorContext, RewriteScope, VaultEntry, Verdict,
    VerdictRecord,
};
use crate::http::{origin_of, parse_url, HttpError, HttpEvent, HttpRequest, HttpResponse};
use crate::spec::{parse_spec, SpecError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario header: {0}")]
    Header(String),
    #[error("scenario `{scenario}` step {step}: {message}")]
    Step {
        scenario: String,
        step: usize,
        message: String,
    },
    #[error("unknown spec `{0}` referenced by scenario")]
    UnknownSpec(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Http(#[from] HttpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Actor {
    Browser,
    AttackerPage,
    Rp,
    Idp,
    Tracker,
}

impl Actor {
    fn parse(s: &str) -> Option<Actor> {
        match s {
            "browser" => Some(Actor::Browser),
            "attacker-page" => Some(Actor::AttackerPage),
            "rp" => Some(Actor::Rp),
            "idp" => Some(Actor::Idp),
            "tracker" => Some(Actor::Tracker),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Actor::Browser => "browser",
            Actor::AttackerPage => "attacker-page",
            Actor::Rp => "rp",
            Actor::Idp => "idp",
            Actor::Tracker => "tracker",
        }
    }
}

/// Per-step expectation, checked against the verdict and its observable
/// content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    /// Allowed; no rewrite assertion.
    Allow,
    /// Allowed and at least one placeholder was created (a secret stripped).
    AllowCreated,
    /// Allowed and at least one placeholder was exchanged for its secret.
    AllowSubstituted,
    /// Allowed; the event still carries a placeholder whose secrecy set
    /// excludes the destination, and no such secret appears in plaintext.
    AllowConfined,
    BlockFlowDeviation,
    BlockIntegrityFailure,
}

impl Expectation {
    fn parse(expect: &str, reason: Option<&str>) -> Option<Expectation> {
        match (expect, reason) {
            ("allow", None) => Some(Expectation::Allow),
            ("allow", Some("placeholder-confined")) => Some(Expectation::AllowConfined),
            ("allow-rewritten", Some("placeholder-created")) => Some(Expectation::AllowCreated),
            ("allow-rewritten", Some("placeholder-substituted")) => {
                Some(Expectation::AllowSubstituted)
            }
            ("block", Some("flow-deviation")) => Some(Expectation::BlockFlowDeviation),
            ("block", Some("integrity-failure")) => Some(Expectation::BlockIntegrityFailure),
            _ => None,
        }
    }

    pub fn describe(&self) -> &'static str {
        match self {
            Expectation::Allow => "allow",
            Expectation::AllowCreated => "allow (placeholder created)",
            Expectation::AllowSubstituted => "allow (placeholder substituted)",
            Expectation::AllowConfined => "allow (placeholder confined)",
            Expectation::BlockFlowDeviation => "block (flow-deviation)",
            Expectation::BlockIntegrityFailure => "block (integrity-failure)",
        }
    }
}

/// Event template of one step; strings may contain `{{placeholder:id}}`.
#[derive(Debug, Clone, PartialEq)]
pub enum StepEvent {
    Request {
        method: String,
        url: String,
        headers: Vec<(String, String)>,
        /// Convenience: non-empty params become a form-urlencoded body.
        params: Vec<(String, String)>,
        body: Option<String>,
    },
    Response {
        status: u16,
        url: String,
        headers: Vec<(String, String)>,
        body: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioStep {
    pub actor: Actor,
    pub event: StepEvent,
    pub expect: Expectation,
    pub time_offset: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    /// Spec file names, in composition order.
    pub specs: Vec<String>,
    /// Catalog grouping: "benign", "attack" or "compat".
    pub kind: String,
    pub rewrite: RewriteScope,
    pub steps: Vec<ScenarioStep>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    name: String,
    #[serde(default)]
    description: String,
    specs: Vec<String>,
    #[serde(default)]
    kind: Option<String>,
    #[serde(default)]
    rewrite: Option<RewriteLine>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewriteLine {
    headers: Option<bool>,
    url_params: Option<bool>,
    form_body: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    actor: String,
    direction: String,
    #[serde(default)]
    method: Option<String>,
    url: String,
    #[serde(default)]
    status: Option<u16>,
    #[serde(default)]
    headers: Vec<(String, String)>,
    #[serde(default)]
    params: Vec<(String, String)>,
    #[serde(default)]
    body: Option<String>,
    expect: String,
    #[serde(default)]
    expect_reason: Option<String>,
    #[serde(default)]
    time_offset_s: Option<f64>,
}

/// Parse one scenario document (header line plus one line per step; blank
/// lines and `#` comments are skipped).
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header: HeaderLine = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| ScenarioError::Header("empty scenario file".to_string()))?,
    )
    .map_err(|e| ScenarioError::Header(e.to_string()))?;

    let mut rewrite = RewriteScope::default();
    if let Some(r) = &header.rewrite {
        if let Some(v) = r.headers {
            rewrite.headers = v;
        }
        if let Some(v) = r.url_params {
            rewrite.url_params = v;
        }
        if let Some(v) = r.form_body {
            rewrite.form_body = v;
        }
    }

    let mut steps = Vec::new();
    let mut last_offset = 0.0f64;
    for (i, line) in lines.enumerate() {
        let step_no = i + 1;
        let err = |message: String| ScenarioError::Step {
            scenario: header.name.clone(),
            step: step_no,
            message,
        };
        let line: StepLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let actor = Actor::parse(&line.actor)
            .ok_or_else(|| err(format!("unknown actor `{}`", line.actor)))?;
        let expect = Expectation::parse(&line.expect, line.expect_reason.as_deref())
            .ok_or_else(|| {
                err(format!(
                    "unknown expectation `{}` / `{:?}`",
                    line.expect, line.expect_reason
                ))
            })?;
        let offset = line.time_offset_s.unwrap_or(last_offset);
        if offset < last_offset {
            return Err(err("time_offset_s must be non-decreasing".to_string()));
        }
        last_offset = offset;
        let event = match line.direction.as_str() {
            "request" => StepEvent::Request {
                method: line.method.unwrap_or_else(|| "GET".to_string()),
                url: line.url,
                headers: line.headers,
                params: line.params,
                body: line.body,
            },
            "response" => {
                if !line.params.is_empty() {
                    return Err(err("responses do not take `params`".to_string()));
                }
                StepEvent::Response {
                    status: line.status.unwrap_or(200),
                    url: line.url,
                    headers: line.headers,
                    body: line.body,
                }
            }
            other => return Err(err(format!("unknown direction `{other}`"))),
        };
        steps.push(ScenarioStep {
            actor,
            event,
            expect,
            time_offset: Duration::from_secs_f64(offset),
        });
    }

    Ok(Scenario {
        name: header.name,
        description: header.description,
        specs: header.specs,
        kind: header.kind.unwrap_or_else(|| "benign".to_string()),
        rewrite,
        steps,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StepResult {
    pub index: usize,
    pub actor: Actor,
    pub expected: Expectation,
    pub actual: String,
    pub pass: bool,
    pub record: VerdictRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub pass: bool,
    pub steps: Vec<StepResult>,
}

impl ScenarioReport {
    /// Index (1-based) of the first blocked step, if any.
    pub fn first_block_step(&self) -> Option<usize> {
        self.steps
            .iter()
            .find(|s| s.record.classification == "violation")
            .map(|s| s.index)
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "scenario {} [{}] seed={}: {}",
            self.name,
            self.kind,
            self.seed,
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        for s in &self.steps {
            writeln!(
                f,
                "  step {:>2} {:<13} expect {:<32} got {:<40} {}",
                s.index,
                s.actor.as_str(),
                s.expected.describe(),
                s.actual,
                if s.pass { "ok" } else { "MISMATCH" }
            )?;
        }
        Ok(())
    }
}

/// Replay a scenario through a fresh, seeded monitor context.
///
/// `resolve_spec` maps a spec file name from the header to its XML text.
pub fn run_scenario(
    scenario: &Scenario,
    resolve_spec: &(dyn Fn(&str) -> Option<String> + Sync),
    seed: u64,
) -> Result<ScenarioReport, ScenarioError> {
    let mut specs = Vec::new();
    for name in &scenario.specs {
        let xml = resolve_spec(name).ok_or_else(|| ScenarioError::UnknownSpec(name.clone()))?;
        specs.push(parse_spec(&xml)?);
    }
    let automaton = std::sync::Arc::new(compose(&specs)?);
    let config = EngineConfig {
        rewrite_scope: scenario.rewrite,
        ..EngineConfig::default()
    };
    let mut ctx = MonitorContext::with_seed(automaton, config, scenario.name.clone(), seed)?;

    let mut placeholder_map: BTreeMap<String, String> = BTreeMap::new();
    let mut vault_history: Vec<VaultEntry> = Vec::new();
    let mut seen_request_endpoints: Vec<String> = Vec::new();
    let mut results = Vec::new();
    let mut pass = true;

    for (i, step) in scenario.steps.iter().enumerate() {
        let step_no = i + 1;
        let err = |message: String| ScenarioError::Step {
            scenario: scenario.name.clone(),
            step: step_no,
            message,
        };
        let event = build_event(&step.event, &placeholder_map).map_err(&err)?;
        match &event {
            HttpEvent::Request(r) => seen_request_endpoints.push(r.url.endpoint()),
            HttpEvent::Response(r) => {
                let endpoint = r.request_url.endpoint();
                if !seen_request_endpoints.contains(&endpoint) {
                    return Err(err(format!(
                        "response references endpoint `{endpoint}` with no prior request step"
                    )));
                }
            }
        }

        let outcome = ctx.on_event(event, step.time_offset);
        for c in &outcome.record.placeholders_created {
            placeholder_map.insert(c.identifier.clone(), c.placeholder.clone());
        }
        vault_history.extend(outcome.vault_added.iter().cloned());

        let (ok, actual) = check_expectation(step.expect, &outcome, &vault_history);
        pass &= ok;
        results.push(StepResult {
            index: step_no,
            actor: step.actor,
            expected: step.expect,
            actual,
            pass: ok,
            record: outcome.record,
        });
    }

    Ok(ScenarioReport {
        name: scenario.name.clone(),
        kind: scenario.kind.clone(),
        seed,
        pass,
        steps: results,
    })
}

fn resolve_placeholders(
    text: &str,
    map: &BTreeMap<String, String>,
) -> Result<String, String> {
    let mut out = String::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{placeholder:") {
        out.push_str(&rest[..start]);
        let after = &rest[start + "{{placeholder:".len()..];
        let end = after
            .find("}}")
            .ok_or_else(|| format!("unterminated placeholder reference in `{text}`"))?;
        let id = &after[..end];
        let value = map
            .get(id)
            .ok_or_else(|| format!("no placeholder observed yet for identifier `{id}`"))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

fn build_event(
    template: &StepEvent,
    map: &BTreeMap<String, String>,
) -> Result<HttpEvent, String> {
    let resolve = |s: &str| resolve_placeholders(s, map);
    match template {
        StepEvent::Request {
            method,
            url,
            headers,
            params,
            body,
        } => {
            let url = parse_url(&resolve(url)?).map_err(|e| e.to_string())?;
            let mut req = HttpRequest::new(method.clone(), url);
            for (n, v) in headers {
                req.headers.push(n.clone(), resolve(v)?);
            }
            if !params.is_empty() {
                if body.is_some() {
                    return Err("step has both `params` and `body`".to_string());
                }
                let mut ser = form_urlencoded::Serializer::new(String::new());
                for (n, v) in params {
                    ser.append_pair(n, &resolve(v)?);
                }
                if req.headers.get_first("content-type").is_none() {
                    req.headers
                        .push("Content-Type", "application/x-www-form-urlencoded");
                }
                req.body = Some(ser.finish().into_bytes());
            } else if let Some(b) = body {
                req.body = Some(resolve(b)?.into_bytes());
            }
            Ok(HttpEvent::Request(req))
        }
        StepEvent::Response {
            status,
            url,
            headers,
            body,
        } => {
            let url = parse_url(&resolve(url)?).map_err(|e| e.to_string())?;
            let mut resp = HttpResponse::new(*status, url).map_err(|e| e.to_string())?;
            for (n, v) in headers {
                resp.headers.push(n.clone(), resolve(v)?);
            }
            if let Some(b) = body {
                resp.body = Some(resolve(b)?.into_bytes());
            }
            Ok(HttpEvent::Response(resp))
        }
    }
}

fn check_expectation(
    expect: Expectation,
    outcome: &EventOutcome,
    vault_history: &[VaultEntry],
) -> (bool, String) {
    let actual = match &outcome.verdict {
        Verdict::Allow(_) => {
            let r = &outcome.record;
            let mut s = format!("allow/{}", r.classification);
            if !r.placeholders_created.is_empty() {
                s.push_str(&format!(" created={}", r.placeholders_created.len()));
            }
            if !r.placeholders_substituted.is_empty() {
                s.push_str(&format!(" substituted={}", r.placeholders_substituted.len()));
            }
            if !r.placeholders_confined.is_empty() {
                s.push_str(&format!(" confined={}", r.placeholders_confined.len()));
            }
            s
        }
        Verdict::Block { reason, .. } => format!("block/{}", reason.as_str()),
    };

    let ok = match (expect, &outcome.verdict) {
        (Expectation::Allow, Verdict::Allow(_)) => true,
        (Expectation::AllowCreated, Verdict::Allow(_)) => {
            !outcome.record.placeholders_created.is_empty()
        }
        (Expectation::AllowSubstituted, Verdict::Allow(_)) => {
            !outcome.record.placeholders_substituted.is_empty()
        }
        (Expectation::AllowConfined, Verdict::Allow(event)) => {
            confinement_holds(event, vault_history)
        }
        (Expectation::BlockFlowDeviation, Verdict::Block { reason, .. }) => {
            *reason == ViolationKind::FlowDeviation
        }
        (Expectation::BlockIntegrityFailure, Verdict::Block { reason, .. }) => {
            *reason == ViolationKind::IntegrityFailure
        }
        _ => false,
    };
    (ok, actual)
}

/// A confined step must be a request that still carries a placeholder whose
/// secret it is not entitled to, and must not carry any such secret in
/// plaintext.
fn confinement_holds(event: &HttpEvent, vault_history: &[VaultEntry]) -> bool {
    let HttpEvent::Request(req) = event else {
        return false;
    };
    let destination = origin_of(&req.url);
    let text = event.searchable_text();
    let mut confined_placeholder_seen = false;
    for entry in vault_history {
        if entry.secrecy_set.contains(&destination) {
            continue;
        }
        if text.contains(&entry.secret) {
            return false; // plaintext leaked toward an unauthorized origin
        }
        if text.contains(&entry.placeholder) {
            confined_placeholder_seen = true;
        }
    }
    confined_placeholder_seen
}
