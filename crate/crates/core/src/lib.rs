//! Browser-protocol security monitoring: XML protocol specifications are
//! compiled into guarded finite-state automata and enforced over a stream of
//! HTTP request/response events. The monitor blocks protocol-flow deviations,
//! confines secrets to their authorized origins by placeholder substitution,
//! and checks cross-message integrity constraints.
//!
//! The crate is organized around the event path:
//!
//! * [`http`] — normalized HTTP messages and the URL/origin algebra;
//! * [`spec`] — the XML specification format, validation and serialization;
//! * [`automaton`] — compilation into one deterministic guarded automaton and
//!   per-event classification;
//! * [`engine`] — the runtime monitor (bindings, secret vault, verdicts);
//! * [`scenario`] — recorded-trace replay with per-step expectations;
//! * [`harness`] — batch replay, exhaustive-trace and fuzzing drivers
//!   (data-parallel under the default `parallel` feature);
//! * [`catalog`] — the bundled protocol specs and scenario suite.

pub mod automaton;
pub mod catalog;
pub mod engine;
pub mod harness;
pub mod http;
pub mod scenario;
pub mod spec;

pub use automaton::{compile, compose, Automaton, Classification, StateId, ViolationKind};
pub use engine::{EngineConfig, EventOutcome, MonitorContext, RewriteScope, Verdict};
pub use http::{parse_url, HttpEvent, HttpRequest, HttpResponse, Origin};
pub use scenario::{parse_scenario, run_scenario, Scenario, ScenarioReport};
pub use spec::{parse_spec, serialize_spec, validate_spec, ProtocolSpec};
