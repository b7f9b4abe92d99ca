//! Compilation of protocol specifications into a single deterministic guarded
//! automaton, and event classification against it.
//!
//! The automaton is a tree rooted at `init`: one state per protocol stage,
//! forward edges guarded by message patterns, and an implicit self-loop on
//! every non-final state accepting exactly the messages that match no guard
//! anywhere in the automaton. Composing several specifications fans the init
//! state out into one branch per specification, in the given order; that order
//! also resolves any matching ambiguity.

use std::fmt::Write as _;

use thiserror::Error;

use crate::http::HttpEvent;
use crate::spec::{
    validate_spec, Diagnostic, Direction, EndpointPattern, FlowNode, IdentifierDefinition,
    IntegrityPolicy, MatchesPattern, MessagePattern, ProtocolSpec, SecrecyPolicy,
};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("specification `{spec}` failed validation:\n{}", format_diags(.diagnostics))]
    InvalidSpec {
        spec: String,
        diagnostics: Vec<Diagnostic>,
    },
    #[error("duplicate specification name `{0}` in composition")]
    DuplicateSpecName(String),
}

fn format_diags(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| format!("  {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateId(pub usize);

#[derive(Debug)]
struct StateInfo {
    name: String,
    is_final: bool,
}

/// One guarded forward edge.
#[derive(Debug)]
pub struct Transition {
    pub guard: MessagePattern,
    pub source: StateId,
    pub target: StateId,
    /// Identifiers first bound on this edge: pattern captures in component
    /// order, then definitions in document order.
    pub bindings_introduced: Vec<String>,
    /// Definitions evaluated as part of this edge's guard.
    pub definitions: Vec<IdentifierDefinition>,
    pub secrecy: Vec<SecrecyPolicy>,
    pub integrity: Vec<IntegrityPolicy>,
    pub origin_spec: String,
}

/// Read access to bound identifier values during classification.
pub trait BindingLookup {
    fn lookup(&self, id: &str) -> Option<&str>;
}

impl BindingLookup for () {
    fn lookup(&self, _id: &str) -> Option<&str> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMatch {
    pub source: StateId,
    pub index: usize,
    pub bindings: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// The event is protocol-shaped but no transition at the current state
    /// accepts it.
    FlowDeviation,
    /// A guard at the current state matched the event's shape but an
    /// integrity policy on it failed.
    IntegrityFailure,
}

impl ViolationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationKind::FlowDeviation => "flow-deviation",
            ViolationKind::IntegrityFailure => "integrity-failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classification {
    Step(StepMatch),
    Unrelated,
    Violation(ViolationKind),
}

#[derive(Debug)]
pub struct Automaton {
    states: Vec<StateInfo>,
    transitions: Vec<Vec<Transition>>,
    spec_names: Vec<String>,
}

/// Compile a single specification. The flow becomes a chain (or, with
/// branches, a tree) of states with one transition per message.
pub fn compile(spec: &ProtocolSpec) -> Result<Automaton, CompileError> {
    let mut b = Builder::new();
    b.add_spec(spec, "")?;
    Ok(b.finish(vec![spec.name.clone()]))
}

/// Compose several specifications into one automaton whose init state fans
/// out to one branch per specification, in order. Earlier specifications win
/// matching ties, and the self-loops narrow to messages matching no pattern
/// of any composed specification.
pub fn compose(specs: &[ProtocolSpec]) -> Result<Automaton, CompileError> {
    for (i, s) in specs.iter().enumerate() {
        if specs[..i].iter().any(|p| p.name == s.name) {
            return Err(CompileError::DuplicateSpecName(s.name.clone()));
        }
    }
    let mut b = Builder::new();
    for spec in specs {
        let prefix = if specs.len() > 1 {
            format!("{}:", spec.name)
        } else {
            String::new()
        };
        b.add_spec(spec, &prefix)?;
    }
    Ok(b.finish(specs.iter().map(|s| s.name.clone()).collect()))
}

struct Builder {
    states: Vec<StateInfo>,
    transitions: Vec<Vec<Transition>>,
}

impl Builder {
    fn new() -> Builder {
        Builder {
            states: vec![StateInfo {
                name: "init".to_string(),
                is_final: false,
            }],
            transitions: vec![Vec::new()],
        }
    }

    fn add_spec(&mut self, spec: &ProtocolSpec, name_prefix: &str) -> Result<(), CompileError> {
        let diags = validate_spec(spec);
        if crate::spec::has_errors(&diags) {
            return Err(CompileError::InvalidSpec {
                spec: spec.name.clone(),
                diagnostics: diags,
            });
        }

        // Edge creation mirrors the skeleton's pre-order walk, so skeleton
        // node indices address the created transitions one to one.
        let mut created: Vec<(StateId, usize)> = Vec::new();
        self.build_seq(&spec.flow, StateId(0), spec, name_prefix, &mut created);

        let (skeleton, mut diags) = crate::spec::FlowSkeleton::build(&spec.flow);
        let sites = crate::spec::introduction_sites(spec, &skeleton, &mut diags);
        let site_of = |id: &str| {
            sites
                .iter()
                .find(|(i, _)| i == id)
                .map(|(_, at)| *at)
                .expect("validated spec has introduction sites for all identifiers")
        };

        for def in &spec.definitions {
            let (state, idx) = created[site_of(&def.id)];
            let t = &mut self.transitions[state.0][idx];
            t.definitions.push(def.clone());
            t.bindings_introduced.push(def.id.clone());
        }
        for policy in &spec.secrecy_policies {
            let (state, idx) = created[site_of(&policy.target)];
            self.transitions[state.0][idx].secrecy.push(policy.clone());
        }
        for policy in &spec.integrity_policies {
            let (state, idx) = created[site_of(&policy.target)];
            self.transitions[state.0][idx].integrity.push(policy.clone());
        }
        Ok(())
    }

    fn build_seq(
        &mut self,
        seq: &[FlowNode],
        mut cursor: StateId,
        spec: &ProtocolSpec,
        name_prefix: &str,
        created: &mut Vec<(StateId, usize)>,
    ) {
        for node in seq {
            match node {
                FlowNode::Message(msg) => {
                    let target = self.new_state(format!("{name_prefix}{}", msg.desc));
                    let index = self.transitions[cursor.0].len();
                    self.transitions[cursor.0].push(Transition {
                        guard: msg.clone(),
                        source: cursor,
                        target,
                        bindings_introduced: msg.bound_ids().map(str::to_string).collect(),
                        definitions: Vec::new(),
                        secrecy: Vec::new(),
                        integrity: Vec::new(),
                        origin_spec: spec.name.clone(),
                    });
                    created.push((cursor, index));
                    cursor = target;
                }
                FlowNode::Branch(paths) => {
                    for path in paths {
                        self.build_seq(path, cursor, spec, name_prefix, created);
                    }
                    return; // branches are tail-position; validated earlier
                }
            }
        }
    }

    fn new_state(&mut self, base_name: String) -> StateId {
        let mut name = base_name.clone();
        let mut n = 1;
        while self.states.iter().any(|s| s.name == name) {
            n += 1;
            name = format!("{base_name}#{n}");
        }
        self.states.push(StateInfo {
            name,
            is_final: false,
        });
        self.transitions.push(Vec::new());
        StateId(self.states.len() - 1)
    }

    fn finish(mut self, spec_names: Vec<String>) -> Automaton {
        for (i, state) in self.states.iter_mut().enumerate() {
            state.is_final = self.transitions[i].is_empty();
        }
        Automaton {
            states: self.states,
            transitions: self.transitions,
            spec_names,
        }
    }
}

impl Automaton {
    pub fn init(&self) -> StateId {
        StateId(0)
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn state_name(&self, state: StateId) -> &str {
        &self.states[state.0].name
    }

    pub fn is_final(&self, state: StateId) -> bool {
        self.states[state.0].is_final
    }

    pub fn final_states(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.states.len())
            .map(StateId)
            .filter(|s| self.is_final(*s))
    }

    pub fn transitions(&self, state: StateId) -> &[Transition] {
        &self.transitions[state.0]
    }

    pub fn all_transitions(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().flatten()
    }

    pub fn transition_at(&self, source: StateId, index: usize) -> &Transition {
        &self.transitions[source.0][index]
    }

    /// Identifiers first bound on the edge entering `state`.
    pub fn introduced(&self, state: StateId) -> &[String] {
        self.all_transitions()
            .find(|t| t.target == state)
            .map(|t| t.bindings_introduced.as_slice())
            .unwrap_or(&[])
    }

    pub fn spec_names(&self) -> &[String] {
        &self.spec_names
    }

    /// Classify one event at `state` with the run's bindings in scope.
    ///
    /// Exactly one outcome: the first in-order transition whose guard matches
    /// and whose integrity policies hold steps; an event matching a guard
    /// shape at this state but failing integrity is an integrity violation;
    /// an event matching some guard anywhere else in the automaton is a flow
    /// deviation; everything else is unrelated and rides the self-loop.
    pub fn classify(
        &self,
        state: StateId,
        event: &HttpEvent,
        env: &dyn BindingLookup,
    ) -> Classification {
        let mut integrity_failed = false;
        for (index, t) in self.transitions[state.0].iter().enumerate() {
            let Some(bindings) = match_guard(t, event, env) else {
                continue;
            };
            if integrity_holds(t, &bindings, env) {
                return Classification::Step(StepMatch {
                    source: state,
                    index,
                    bindings,
                });
            }
            integrity_failed = true;
        }
        if integrity_failed {
            return Classification::Violation(ViolationKind::IntegrityFailure);
        }
        let protocol_shaped = self
            .all_transitions()
            .any(|t| match_guard(t, event, env).is_some());
        if protocol_shaped {
            Classification::Violation(ViolationKind::FlowDeviation)
        } else {
            Classification::Unrelated
        }
    }

    /// DOT rendering of the automaton for debugging: forward edges with guard
    /// descriptions and policy annotations, plus the implicit self-loops.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph monitor {\n  rankdir=LR;\n");
        for (i, s) in self.states.iter().enumerate() {
            let shape = if s.is_final { "doublecircle" } else { "circle" };
            let _ = writeln!(out, "  s{i} [label=\"{}\", shape={shape}];", s.name);
        }
        for t in self.all_transitions() {
            let mut label = format!("{} {}", t.guard.direction, t.guard.desc);
            if !t.secrecy.is_empty() {
                label.push_str(" :: secrecy");
            }
            if !t.integrity.is_empty() {
                label.push_str(" + integrity");
            }
            let _ = writeln!(
                out,
                "  s{} -> s{} [label=\"{}\"];",
                t.source.0, t.target.0, label
            );
        }
        for (i, s) in self.states.iter().enumerate() {
            if !s.is_final {
                let _ = writeln!(out, "  s{i} -> s{i} [label=\"unrelated\", style=dashed];");
            }
        }
        out.push_str("}\n");
        out
    }
}

fn lookup_in<'a>(
    bindings: &'a [(String, String)],
    env: &'a dyn BindingLookup,
    id: &str,
) -> Option<&'a str> {
    bindings
        .iter()
        .find(|(k, _)| k == id)
        .map(|(_, v)| v.as_str())
        .or_else(|| env.lookup(id))
}

/// Shape match of one guard against an event, yielding the identifier
/// bindings (pattern captures plus evaluated definitions) on success.
/// Integrity policies are not part of the shape.
fn match_guard(
    t: &Transition,
    event: &HttpEvent,
    env: &dyn BindingLookup,
) -> Option<Vec<(String, String)>> {
    let guard = &t.guard;
    let endpoint = event.endpoint();
    let mut bindings: Vec<(String, String)> = Vec::new();

    let components: Vec<(String, String)> = match (guard.direction, event) {
        (Direction::Request, HttpEvent::Request(req)) => {
            if let Some(m) = &guard.method {
                if m != &req.method {
                    return None;
                }
            }
            req.params()
        }
        (Direction::Response, HttpEvent::Response(resp)) => resp
            .headers
            .iter()
            .map(|(n, v)| (n.to_string(), v.to_string()))
            .collect(),
        _ => return None,
    };

    let endpoint_capture: &str = match &guard.endpoint {
        EndpointPattern::Any => &endpoint,
        EndpointPattern::Regex(re) => re.extract(&endpoint)?,
        EndpointPattern::Template(template) => {
            match template.expand(&|id| env.lookup(id).map(str::to_string)) {
                Some(expected) => {
                    if expected != endpoint {
                        return None;
                    }
                    &endpoint
                }
                // Unbound back-reference: undecidable here, treat as matching
                // so out-of-turn events block rather than slip through.
                None => &endpoint,
            }
        }
    };
    if let Some(id) = &guard.endpoint_id {
        bindings.push((id.clone(), endpoint_capture.to_string()));
    }

    let name_matches = |pattern_name: &str, component_name: &str| match guard.direction {
        Direction::Request => pattern_name == component_name,
        Direction::Response => pattern_name.eq_ignore_ascii_case(component_name),
    };
    for c in &guard.components {
        let captured = components
            .iter()
            .filter(|(n, _)| name_matches(&c.name, n))
            .find_map(|(_, v)| c.pattern.capture(v))?;
        if let Some(id) = &c.id {
            bindings.push((id.clone(), captured.to_string()));
        }
    }

    for def in &t.definitions {
        let source = def
            .source
            .expand(&|id| lookup_in(&bindings, env, id).map(str::to_string));
        match source {
            Some(source) => {
                // Extraction failure means the component does not carry the
                // expected value; the message is not of this guard's shape.
                let value = def.regexp.extract(&source)?;
                bindings.push((def.id.clone(), value.to_string()));
            }
            // Source references outside the current scope cannot be decided;
            // skip the definition for shape purposes.
            None => continue,
        }
    }

    Some(bindings)
}

fn integrity_holds(t: &Transition, bindings: &[(String, String)], env: &dyn BindingLookup) -> bool {
    t.integrity.iter().all(|policy| {
        let Some(target) = lookup_in(bindings, env, &policy.target) else {
            return false;
        };
        match &policy.matches {
            MatchesPattern::Equality(template) => {
                match template.expand(&|id| lookup_in(bindings, env, id).map(str::to_string)) {
                    Some(expected) => expected == target,
                    None => false,
                }
            }
            MatchesPattern::Regex(re) => re.is_match(target),
        }
    })
}
