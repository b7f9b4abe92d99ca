//! The runtime monitor: drives the automaton over one client's event stream,
//! maintains identifier bindings, confines secrets behind placeholders and
//! produces allow/block verdicts.
//!
//! Responses are classified on their original content and then stripped:
//! values covered by a secrecy policy are replaced with fresh random
//! placeholders before the client sees them. Requests are processed the other
//! way around: placeholders are exchanged back for the original values first,
//! but only when the request's destination origin is in the secret's secrecy
//! set, and the post-substitution request is classified. The client therefore
//! only ever handles placeholders, while the network sees the protocol
//! unchanged.

use std::sync::Arc;
use std::time::Duration;

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::automaton::{Automaton, BindingLookup, Classification, StateId, ViolationKind};
use crate::http::{origin_of, HttpEvent, HttpRequest, HttpResponse, Origin};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("entropy unavailable: {0}")]
    EntropyUnavailable(String),
}

/// Which message parts the monitor may rewrite. The default mirrors a
/// browser-extension deployment: headers and URL parameters only; message
/// bodies are reachable for a proxy deployment behind the `form_body` flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewriteScope {
    pub headers: bool,
    pub url_params: bool,
    pub form_body: bool,
}

impl Default for RewriteScope {
    fn default() -> RewriteScope {
        RewriteScope {
            headers: true,
            url_params: true,
            form_body: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub placeholder_prefix: String,
    pub placeholder_entropy_bytes: usize,
    /// Mid-run inactivity (no protocol progress) after which the run is
    /// abandoned and the context reset.
    pub run_timeout: Duration,
    pub rewrite_scope: RewriteScope,
}

pub const DEFAULT_PLACEHOLDER_PREFIX: &str = "WPSE-";

impl Default for EngineConfig {
    fn default() -> EngineConfig {
        EngineConfig {
            placeholder_prefix: DEFAULT_PLACEHOLDER_PREFIX.to_string(),
            placeholder_entropy_bytes: 16,
            run_timeout: Duration::from_secs(300),
            rewrite_scope: RewriteScope::default(),
        }
    }
}

impl EngineConfig {
    fn validate(&self) -> Result<(), EngineError> {
        if self.placeholder_entropy_bytes < 16 {
            return Err(EngineError::Config(
                "placeholder_entropy_bytes must be at least 16".to_string(),
            ));
        }
        Ok(())
    }
}

/// Identifier bindings of one protocol run. Write-once per run; entries are
/// scoped to the subtree below their introduction edge, which the tree shape
/// of the automaton guarantees by construction.
#[derive(Debug, Clone, Default)]
pub struct BindingEnv {
    entries: Vec<(String, String, StateId)>,
}

impl BindingEnv {
    pub fn get(&self, id: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == id)
            .map(|(_, v, _)| v.as_str())
    }

    pub fn bound_at(&self, id: &str) -> Option<StateId> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == id)
            .map(|(_, _, at)| *at)
    }

    fn insert(&mut self, id: String, value: String, at: StateId) {
        debug_assert!(
            self.get(&id).is_none(),
            "identifier `{id}` rebound within one run"
        );
        self.entries.push((id, value, at));
    }

    fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v, _)| (k.as_str(), v.as_str()))
    }
}

impl BindingLookup for BindingEnv {
    fn lookup(&self, id: &str) -> Option<&str> {
        self.get(id)
    }
}

/// One confined secret of the current run.
#[derive(Debug, Clone)]
pub struct VaultEntry {
    pub identifier: String,
    pub placeholder: String,
    pub secret: String,
    pub secrecy_set: Vec<Origin>,
}

/// Placeholder table for one protocol run; emptied on reset.
#[derive(Debug, Clone, Default)]
pub struct SecretVault {
    entries: Vec<VaultEntry>,
}

impl SecretVault {
    pub fn entries(&self) -> &[VaultEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_placeholder(&self, placeholder: &str) -> bool {
        self.entries.iter().any(|e| e.placeholder == placeholder)
    }
}

/// Generate a fresh placeholder: the configured prefix followed by the hex
/// encoding of `placeholder_entropy_bytes` random bytes, regenerated on the
/// (cosmically unlikely) collision with an existing vault entry.
pub fn make_placeholder(
    config: &EngineConfig,
    rng: &mut dyn RngCore,
    vault: &SecretVault,
) -> Result<String, EngineError> {
    let mut buf = vec![0u8; config.placeholder_entropy_bytes];
    loop {
        rng.try_fill_bytes(&mut buf)
            .map_err(|e| EngineError::EntropyUnavailable(e.to_string()))?;
        let candidate = format!("{}{}", config.placeholder_prefix, hex::encode(&buf));
        if !vault.contains_placeholder(&candidate) {
            return Ok(candidate);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    /// Pass the event on, possibly rewritten.
    Allow(HttpEvent),
    /// Drop the event; the context has been reset to init.
    Block {
        reason: ViolationKind,
        diagnostics: Vec<String>,
    },
}

impl Verdict {
    pub fn is_allow(&self) -> bool {
        matches!(self, Verdict::Allow(_))
    }

    pub fn allowed_event(&self) -> Option<&HttpEvent> {
        match self {
            Verdict::Allow(e) => Some(e),
            Verdict::Block { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CreatedPlaceholder {
    pub identifier: String,
    pub placeholder: String,
}

/// One structured verdict-log line. Never contains secret plaintext.
#[derive(Debug, Clone, Serialize)]
pub struct VerdictRecord {
    pub timestamp_s: f64,
    pub context_id: String,
    pub state_before: String,
    pub state_after: String,
    pub classification: &'static str,
    pub block_reason: Option<&'static str>,
    /// Name of the specification owning the fired transition.
    pub spec: Option<String>,
    /// Description of the fired transition within its specification.
    pub step: Option<String>,
    pub placeholders_created: Vec<CreatedPlaceholder>,
    pub placeholders_substituted: Vec<String>,
    /// Placeholders present in the event but left unsubstituted because the
    /// destination origin is not in the secret's secrecy set (or the part
    /// carrying them is outside the rewrite scope).
    pub placeholders_confined: Vec<String>,
    /// Engine notes (unusable policy origins and the like); never secrets.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EventOutcome {
    pub verdict: Verdict,
    pub record: VerdictRecord,
    /// Vault entries created while processing this event. Survives the
    /// auto-reset on run completion, unlike the context's own vault; the
    /// replay harness uses this to track secrets across a whole run.
    pub vault_added: Vec<VaultEntry>,
}

/// Monitor state for one client session. Events for one context must be fed
/// in arrival order, one at a time; distinct contexts are independent.
#[derive(Debug, Clone)]
pub struct MonitorContext {
    automaton: Arc<Automaton>,
    config: EngineConfig,
    context_id: String,
    state: StateId,
    env: BindingEnv,
    vault: SecretVault,
    rng: ChaCha20Rng,
    last_progress: Option<Duration>,
}

impl MonitorContext {
    pub fn new(
        automaton: Arc<Automaton>,
        config: EngineConfig,
        context_id: impl Into<String>,
    ) -> Result<MonitorContext, EngineError> {
        config.validate()?;
        Ok(MonitorContext {
            state: automaton.init(),
            automaton,
            config,
            context_id: context_id.into(),
            env: BindingEnv::default(),
            vault: SecretVault::default(),
            rng: ChaCha20Rng::from_entropy(),
            last_progress: None,
        })
    }

    /// Deterministic placeholder generation for replay harnesses.
    pub fn with_seed(
        automaton: Arc<Automaton>,
        config: EngineConfig,
        context_id: impl Into<String>,
        seed: u64,
    ) -> Result<MonitorContext, EngineError> {
        let mut ctx = MonitorContext::new(automaton, config, context_id)?;
        ctx.rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(ctx)
    }

    pub fn automaton(&self) -> &Automaton {
        &self.automaton
    }

    pub fn state(&self) -> StateId {
        self.state
    }

    pub fn state_name(&self) -> &str {
        self.automaton.state_name(self.state)
    }

    pub fn env(&self) -> &BindingEnv {
        &self.env
    }

    pub fn vault(&self) -> &SecretVault {
        &self.vault
    }

    /// Back to init: bindings, vault and the run timer are cleared.
    pub fn reset(&mut self) {
        self.state = self.automaton.init();
        self.env.clear();
        self.vault = SecretVault::default();
        self.last_progress = None;
    }

    fn expire_stale_run(&mut self, now: Duration) {
        if self.state != self.automaton.init() {
            if let Some(at) = self.last_progress {
                if now.saturating_sub(at) > self.config.run_timeout {
                    self.reset();
                }
            }
        }
    }

    fn gen_placeholder(&mut self) -> String {
        make_placeholder(&self.config, &mut self.rng, &self.vault)
            .expect("placeholder entropy source failed")
    }

    /// Process a response arriving for the monitored client. Classification
    /// sees the original content; secrets introduced on the fired edge are
    /// then stripped and replaced by placeholders before the response is
    /// allowed through.
    pub fn on_response(&mut self, resp: HttpResponse, now: Duration) -> EventOutcome {
        self.expire_stale_run(now);
        let state_before = self.state;
        let classification =
            self.automaton
                .classify(self.state, &HttpEvent::Response(resp.clone()), &self.env);

        match classification {
            Classification::Step(step) => {
                let mut resp = resp;
                let mut created = Vec::new();
                let mut added = Vec::new();
                let mut diagnostics = Vec::new();
                let transition = self.automaton.transition_at(step.source, step.index);
                let (spec, desc, target_state) = (
                    transition.origin_spec.clone(),
                    transition.guard.desc.clone(),
                    transition.target,
                );
                let secrecy = transition.secrecy.clone();
                for (id, value) in step.bindings {
                    self.env.insert(id, value, target_state);
                }
                for policy in &secrecy {
                    let Some(secret) = self.env.get(&policy.target).map(str::to_string) else {
                        diagnostics.push(format!(
                            "secrecy target `${{{}}}` not bound on its edge",
                            policy.target
                        ));
                        continue;
                    };
                    if secret.is_empty() {
                        diagnostics.push(format!(
                            "secrecy target `${{{}}}` bound to an empty value; not stripped",
                            policy.target
                        ));
                        continue;
                    }
                    let mut secrecy_set = Vec::new();
                    for origin in &policy.origins {
                        match origin
                            .expand(&|id| self.env.get(id).map(str::to_string))
                            .as_deref()
                            .map(Origin::parse)
                        {
                            Some(Ok(o)) => secrecy_set.push(o),
                            Some(Err(e)) => diagnostics
                                .push(format!("unusable origin `{}`: {e}", origin.raw())),
                            None => diagnostics
                                .push(format!("unresolvable origin reference `{}`", origin.raw())),
                        }
                    }
                    let placeholder = self.gen_placeholder();
                    strip_secret_from_response(&mut resp, &secret, &placeholder, self.config.rewrite_scope);
                    created.push(CreatedPlaceholder {
                        identifier: policy.target.clone(),
                        placeholder: placeholder.clone(),
                    });
                    let entry = VaultEntry {
                        identifier: policy.target.clone(),
                        placeholder,
                        secret,
                        secrecy_set,
                    };
                    added.push(entry.clone());
                    self.vault.entries.push(entry);
                }
                let mut record = self.advance(
                    state_before,
                    target_state,
                    now,
                    Some(spec),
                    Some(desc),
                    created,
                    Vec::new(),
                    Vec::new(),
                );
                record.notes = diagnostics;
                EventOutcome {
                    verdict: Verdict::Allow(HttpEvent::Response(resp)),
                    record,
                    vault_added: added,
                }
            }
            Classification::Unrelated => EventOutcome {
                verdict: Verdict::Allow(HttpEvent::Response(resp)),
                record: self.record(state_before, self.state, now, "unrelated", None, None, None),
                vault_added: Vec::new(),
            },
            Classification::Violation(reason) => self.block(state_before, reason, now),
        }
    }

    /// Process a request leaving the monitored client. Placeholders are
    /// exchanged back for their secrets first — only toward origins in the
    /// secrecy set — and the post-substitution request is classified.
    pub fn on_request(&mut self, req: HttpRequest, now: Duration) -> EventOutcome {
        self.expire_stale_run(now);
        let state_before = self.state;
        let mut req = req;

        let destination = origin_of(&req.url);
        let mut substituted = Vec::new();
        let mut confined = Vec::new();
        let pre_text = HttpEvent::Request(req.clone()).searchable_text();
        for entry in self.vault.entries.clone() {
            if !pre_text.contains(&entry.placeholder) {
                continue;
            }
            let authorized = entry.secrecy_set.contains(&destination);
            let replaced = authorized
                && substitute_placeholder_in_request(
                    &mut req,
                    &entry.placeholder,
                    &entry.secret,
                    self.config.rewrite_scope,
                );
            if replaced {
                substituted.push(entry.placeholder.clone());
            } else {
                confined.push(entry.placeholder.clone());
            }
        }

        let classification =
            self.automaton
                .classify(self.state, &HttpEvent::Request(req.clone()), &self.env);
        match classification {
            Classification::Step(step) => {
                let transition = self.automaton.transition_at(step.source, step.index);
                let (spec, desc, target_state) = (
                    transition.origin_spec.clone(),
                    transition.guard.desc.clone(),
                    transition.target,
                );
                for (id, value) in step.bindings {
                    self.env.insert(id, value, target_state);
                }
                let record = self.advance(
                    state_before,
                    target_state,
                    now,
                    Some(spec),
                    Some(desc),
                    Vec::new(),
                    substituted,
                    confined,
                );
                EventOutcome {
                    verdict: Verdict::Allow(HttpEvent::Request(req)),
                    record,
                    vault_added: Vec::new(),
                }
            }
            Classification::Unrelated => {
                let mut record =
                    self.record(state_before, self.state, now, "unrelated", None, None, None);
                record.placeholders_substituted = substituted;
                record.placeholders_confined = confined;
                EventOutcome {
                    verdict: Verdict::Allow(HttpEvent::Request(req)),
                    record,
                    vault_added: Vec::new(),
                }
            }
            // The substituted request is never emitted on a block.
            Classification::Violation(reason) => self.block(state_before, reason, now),
        }
    }

    /// Feed any event.
    pub fn on_event(&mut self, event: HttpEvent, now: Duration) -> EventOutcome {
        match event {
            HttpEvent::Request(r) => self.on_request(r, now),
            HttpEvent::Response(r) => self.on_response(r, now),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn advance(
        &mut self,
        state_before: StateId,
        target: StateId,
        now: Duration,
        spec: Option<String>,
        step: Option<String>,
        created: Vec<CreatedPlaceholder>,
        substituted: Vec<String>,
        confined: Vec<String>,
    ) -> VerdictRecord {
        self.state = target;
        let mut record = self.record(state_before, target, now, "step", None, spec, step);
        record.placeholders_created = created;
        record.placeholders_substituted = substituted;
        record.placeholders_confined = confined;
        if self.automaton.is_final(target) {
            // A completed run immediately re-arms the monitor.
            self.reset();
        } else {
            self.last_progress = Some(now);
        }
        record
    }

    fn block(&mut self, state_before: StateId, reason: ViolationKind, now: Duration) -> EventOutcome {
        let record = self.record(
            state_before,
            self.automaton.init(),
            now,
            "violation",
            Some(reason.as_str()),
            None,
            None,
        );
        self.reset();
        EventOutcome {
            verdict: Verdict::Block {
                reason,
                diagnostics: vec![format!(
                    "event classified as {} at state `{}`",
                    reason.as_str(),
                    self.automaton.state_name(state_before)
                )],
            },
            record,
            vault_added: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        before: StateId,
        after: StateId,
        now: Duration,
        classification: &'static str,
        block_reason: Option<&'static str>,
        spec: Option<String>,
        step: Option<String>,
    ) -> VerdictRecord {
        VerdictRecord {
            timestamp_s: now.as_secs_f64(),
            context_id: self.context_id.clone(),
            state_before: self.automaton.state_name(before).to_string(),
            state_after: self.automaton.state_name(after).to_string(),
            classification,
            block_reason,
            spec,
            step,
            placeholders_created: Vec::new(),
            placeholders_substituted: Vec::new(),
            placeholders_confined: Vec::new(),
            notes: Vec::new(),
        }
    }
}

/// Unreserved URL characters stay verbatim when computing the percent-encoded
/// spelling of a secret.
const URL_ENCODE_SET: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~');

fn pct_encoded(s: &str) -> String {
    utf8_percent_encode(s, URL_ENCODE_SET).to_string()
}

fn replace_all(haystack: &str, needle: &str, replacement: &str) -> Option<String> {
    if needle.is_empty() || !haystack.contains(needle) {
        return None;
    }
    Some(haystack.replace(needle, replacement))
}

fn replace_bytes(haystack: &[u8], needle: &str, replacement: &str) -> Option<Vec<u8>> {
    let text = String::from_utf8_lossy(haystack);
    replace_all(&text, needle, replacement).map(String::into_bytes)
}

/// Strip a secret from a response: every raw or percent-encoded occurrence in
/// header values (and, when in scope, the body) becomes the placeholder.
fn strip_secret_from_response(
    resp: &mut HttpResponse,
    secret: &str,
    placeholder: &str,
    scope: RewriteScope,
) {
    let encoded = pct_encoded(secret);
    let spellings: Vec<&str> = if encoded == secret {
        vec![secret]
    } else {
        vec![secret, &encoded]
    };
    if scope.headers {
        resp.headers.map_values(|_, v| {
            let mut out: Option<String> = None;
            for s in &spellings {
                let cur = out.as_deref().unwrap_or(v);
                if let Some(next) = replace_all(cur, s, placeholder) {
                    out = Some(next);
                }
            }
            out
        });
    }
    if scope.form_body {
        if let Some(body) = &resp.body {
            let mut cur = body.clone();
            let mut changed = false;
            for s in &spellings {
                if let Some(next) = replace_bytes(&cur, s, placeholder) {
                    cur = next;
                    changed = true;
                }
            }
            if changed {
                resp.body = Some(cur);
            }
        }
    }
}

/// Exchange a placeholder back for its secret inside a request, limited to the
/// configured rewrite scope. Returns whether anything changed.
fn substitute_placeholder_in_request(
    req: &mut HttpRequest,
    placeholder: &str,
    secret: &str,
    scope: RewriteScope,
) -> bool {
    let mut changed = false;
    if scope.headers {
        req.headers.map_values(|_, v| {
            let out = replace_all(v, placeholder, secret);
            if out.is_some() {
                changed = true;
            }
            out
        });
    }
    if scope.url_params {
        let query = req.url.query().to_string();
        if let Some(next) = replace_all(&query, placeholder, secret) {
            req.url.set_query(Some(next));
            changed = true;
        }
    }
    if scope.form_body {
        if let Some(body) = &req.body {
            if let Some(next) = replace_bytes(body, placeholder, secret) {
                req.body = Some(next);
                changed = true;
            }
        }
    }
    changed
}
