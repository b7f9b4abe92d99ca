//! Typed protocol specifications: the XML format, its validation rules and a
//! canonical serializer.
//!
//! A specification describes a protocol flow as an ordered sequence of message
//! patterns (with optional branching), identifier definitions extracting
//! values from bound components, and secrecy/integrity policies over those
//! identifiers.

mod parse;
mod pattern;

pub use parse::parse_spec;
pub use pattern::{EndpointPattern, SpecRegex, Template, ValuePattern};

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("xml syntax error: {0}")]
    XmlSyntax(String),
    #[error("unknown tag <{tag}> at {location}")]
    UnknownTag { tag: String, location: String },
    #[error("missing attribute `{attribute}` on <{tag}> at {location}")]
    MissingAttribute {
        tag: String,
        attribute: String,
        location: String,
    },
    #[error("duplicate identifier `{0}`")]
    DuplicateIdentifier(String),
    #[error("unresolved reference `${{{0}}}`")]
    UnresolvedReference(String),
    #[error("invalid regex `{pattern}` at {location}: {message}")]
    InvalidRegex {
        pattern: String,
        location: String,
        message: String,
    },
    #[error("invalid specification structure: {message} at {location}")]
    InvalidStructure { message: String, location: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Request,
    Response,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Request => f.write_str("request"),
            Direction::Response => f.write_str("response"),
        }
    }
}

/// One guarded message of the protocol flow. Requests constrain the endpoint
/// and parameters, responses the endpoint and headers.
#[derive(Debug, Clone, PartialEq)]
pub struct MessagePattern {
    pub direction: Direction,
    pub desc: String,
    /// Requests only; `None` matches any method.
    pub method: Option<String>,
    pub endpoint: EndpointPattern,
    pub endpoint_id: Option<String>,
    /// Parameters (requests) or headers (responses), in document order.
    pub components: Vec<ComponentPattern>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPattern {
    pub name: String,
    pub pattern: ValuePattern,
    pub id: Option<String>,
}

impl MessagePattern {
    /// Identifiers bound directly by this pattern, in component order.
    pub fn bound_ids(&self) -> impl Iterator<Item = &str> {
        self.endpoint_id
            .as_deref()
            .into_iter()
            .chain(self.components.iter().filter_map(|c| c.id.as_deref()))
    }
}

/// A node of the protocol flow: either a message or a branch over
/// alternative continuations. A branch must be the last node of its
/// sequence; every path runs to the end of the protocol.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowNode {
    Message(MessagePattern),
    Branch(Vec<Vec<FlowNode>>),
}

/// A derived identifier: the first capture group of `regexp` (or the whole
/// match) applied to the expanded `source` template.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierDefinition {
    pub id: String,
    pub source: Template,
    pub regexp: SpecRegex,
}

/// Confines the value bound to `target` to the listed origins.
#[derive(Debug, Clone, PartialEq)]
pub struct SecrecyPolicy {
    pub target: String,
    pub origins: Vec<Template>,
}

/// Requires the value bound to `target` to match `matches` when it is bound.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrityPolicy {
    pub target: String,
    pub matches: MatchesPattern,
}

/// The right-hand side of an integrity policy: templates compare by string
/// equality after expansion, plain patterns are regex-matched.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchesPattern {
    Equality(Template),
    Regex(SpecRegex),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSpec {
    pub name: String,
    pub flow: Vec<FlowNode>,
    pub definitions: Vec<IdentifierDefinition>,
    pub secrecy_policies: Vec<SecrecyPolicy>,
    pub integrity_policies: Vec<IntegrityPolicy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    fn error(message: impl Into<String>) -> Diagnostic {
        Diagnostic {
            severity: Severity::Error,
            message: message.into(),
        }
    }

    fn warning(message: impl Into<String>) -> Diagnostic {
        Diagnostic {
            severity: Severity::Warning,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.severity {
            Severity::Error => write!(f, "error: {}", self.message),
            Severity::Warning => write!(f, "warning: {}", self.message),
        }
    }
}

/// The message skeleton of a flow: every message with its tree parent.
/// Scope questions ("is `a` visible where `b` is introduced?") reduce to
/// ancestor queries on this tree.
pub(crate) struct FlowSkeleton<'a> {
    pub nodes: Vec<SkeletonNode<'a>>,
}

pub(crate) struct SkeletonNode<'a> {
    pub msg: &'a MessagePattern,
    pub parent: Option<usize>,
}

impl<'a> FlowSkeleton<'a> {
    pub fn build(flow: &'a [FlowNode]) -> (FlowSkeleton<'a>, Vec<Diagnostic>) {
        let mut sk = FlowSkeleton { nodes: Vec::new() };
        let mut diags = Vec::new();
        sk.walk(flow, None, &mut diags);
        (sk, diags)
    }

    fn walk(&mut self, seq: &'a [FlowNode], mut parent: Option<usize>, diags: &mut Vec<Diagnostic>) {
        for (i, node) in seq.iter().enumerate() {
            match node {
                FlowNode::Message(msg) => {
                    self.nodes.push(SkeletonNode { msg, parent });
                    parent = Some(self.nodes.len() - 1);
                }
                FlowNode::Branch(paths) => {
                    if i + 1 != seq.len() {
                        diags.push(Diagnostic::error(
                            "a <Branch> must be the last element of its sequence; \
                             messages after it are unreachable",
                        ));
                    }
                    if paths.len() < 2 {
                        diags.push(Diagnostic::error("a <Branch> needs at least two <Path> children"));
                    }
                    for path in paths {
                        self.walk(path, parent, diags);
                    }
                    return;
                }
            }
        }
    }

    /// True when `a` is `b` or one of `b`'s ancestors.
    pub fn in_scope_at(&self, a: usize, b: usize) -> bool {
        let mut cur = Some(b);
        while let Some(n) = cur {
            if n == a {
                return true;
            }
            cur = self.nodes[n].parent;
        }
        false
    }

    /// The deeper of two nodes when they lie on one root path.
    pub fn deeper(&self, a: usize, b: usize) -> Option<usize> {
        if self.in_scope_at(a, b) {
            Some(b)
        } else if self.in_scope_at(b, a) {
            Some(a)
        } else {
            None
        }
    }
}

/// Compute the introduction node of every identifier: the message that binds
/// it, or for defined identifiers the deepest node among the sources'
/// introductions. Emits diagnostics for unresolvable placements.
pub(crate) fn introduction_sites(
    spec: &ProtocolSpec,
    skeleton: &FlowSkeleton<'_>,
    diags: &mut Vec<Diagnostic>,
) -> Vec<(String, usize)> {
    let mut sites: Vec<(String, usize)> = Vec::new();
    for (idx, node) in skeleton.nodes.iter().enumerate() {
        for id in node.msg.bound_ids() {
            sites.push((id.to_string(), idx));
        }
    }
    for def in &spec.definitions {
        let mut place: Option<usize> = None;
        let mut ok = true;
        for r in def.source.refs() {
            match sites.iter().find(|(id, _)| id == r) {
                Some((_, at)) => {
                    place = match place {
                        None => Some(*at),
                        Some(p) => match skeleton.deeper(p, *at) {
                            Some(d) => Some(d),
                            None => {
                                diags.push(Diagnostic::error(format!(
                                    "definition `{}`: sources `${{{r}}}` span sibling branches",
                                    def.id
                                )));
                                ok = false;
                                break;
                            }
                        },
                    };
                }
                None => {
                    diags.push(Diagnostic::error(format!(
                        "definition `{}`: identifier `{r}` referenced before introduction",
                        def.id
                    )));
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            match place {
                Some(at) => sites.push((def.id.clone(), at)),
                None => diags.push(Diagnostic::error(format!(
                    "definition `{}` has no `${{...}}` source reference",
                    def.id
                ))),
            }
        }
    }
    sites
}

/// Semantic validation of a parsed specification. Errors make the spec
/// uncompilable; warnings are advisory.
pub fn validate_spec(spec: &ProtocolSpec) -> Vec<Diagnostic> {
    let (skeleton, mut diags) = FlowSkeleton::build(&spec.flow);
    if skeleton.nodes.is_empty() {
        diags.push(Diagnostic::error("protocol flow is empty"));
        return diags;
    }

    let sites = introduction_sites(spec, &skeleton, &mut diags);
    let site_of = |id: &str| sites.iter().find(|(i, _)| i == id).map(|(_, at)| *at);

    // Endpoint back-references must be bound strictly before their message.
    for (idx, node) in skeleton.nodes.iter().enumerate() {
        if let EndpointPattern::Template(t) = &node.msg.endpoint {
            for r in t.refs() {
                let visible = site_of(r).map_or(false, |at| {
                    at != idx && skeleton.in_scope_at(at, idx)
                });
                if !visible {
                    diags.push(Diagnostic::error(format!(
                        "message `{}`: endpoint reference `${{{r}}}` is not bound by any \
                         earlier message",
                        node.msg.desc
                    )));
                }
            }
        }
    }

    for policy in &spec.secrecy_policies {
        let Some(at) = site_of(&policy.target) else {
            diags.push(Diagnostic::error(format!(
                "secrecy target `${{{}}}` is never introduced",
                policy.target
            )));
            continue;
        };
        if skeleton.nodes[at].msg.direction == Direction::Request {
            diags.push(Diagnostic::error(format!(
                "secrecy target `${{{}}}`: secret must originate in a response",
                policy.target
            )));
        }
        for origin in &policy.origins {
            for r in origin.refs() {
                let visible = site_of(r).map_or(false, |s| skeleton.in_scope_at(s, at));
                if !visible {
                    diags.push(Diagnostic::error(format!(
                        "secrecy policy on `${{{}}}`: origin reference `${{{r}}}` is not in \
                         scope where the target is introduced",
                        policy.target
                    )));
                }
            }
        }
    }

    for policy in &spec.integrity_policies {
        let Some(at) = site_of(&policy.target) else {
            diags.push(Diagnostic::error(format!(
                "integrity target `${{{}}}` is never introduced",
                policy.target
            )));
            continue;
        };
        if let MatchesPattern::Equality(t) = &policy.matches {
            for r in t.refs() {
                let visible = site_of(r).map_or(false, |s| skeleton.in_scope_at(s, at));
                if !visible {
                    diags.push(Diagnostic::error(format!(
                        "integrity policy on `${{{}}}`: operand `${{{r}}}` is never jointly \
                         in scope with the target",
                        policy.target
                    )));
                }
            }
        }
    }

    // Unreferenced identifiers are legal but usually a spec bug.
    let referenced: Vec<&str> = spec
        .definitions
        .iter()
        .flat_map(|d| d.source.refs())
        .chain(spec.secrecy_policies.iter().flat_map(|p| {
            std::iter::once(p.target.as_str()).chain(p.origins.iter().flat_map(|o| o.refs()))
        }))
        .chain(spec.integrity_policies.iter().flat_map(|p| {
            let matches_refs: Box<dyn Iterator<Item = &str>> = match &p.matches {
                MatchesPattern::Equality(t) => Box::new(t.refs()),
                MatchesPattern::Regex(_) => Box::new(std::iter::empty()),
            };
            std::iter::once(p.target.as_str()).chain(matches_refs)
        }))
        .chain(skeleton.nodes.iter().flat_map(|n| {
            let refs: Box<dyn Iterator<Item = &str>> = match &n.msg.endpoint {
                EndpointPattern::Template(t) => Box::new(t.refs()),
                _ => Box::new(std::iter::empty()),
            };
            refs
        }))
        .collect();
    for (id, _) in &sites {
        if !referenced.contains(&id.as_str()) {
            diags.push(Diagnostic::warning(format!(
                "identifier `{id}` is bound but never referenced"
            )));
        }
    }

    diags
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.severity == Severity::Error)
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Canonical XML serialization; `parse_spec(serialize_spec(s))` reproduces `s`.
pub fn serialize_spec(spec: &ProtocolSpec) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<Specification name=\"{}\">\n",
        xml_escape(&spec.name)
    ));
    out.push_str("  <Protocol>\n");
    serialize_flow(&spec.flow, 4, &mut out);
    out.push_str("  </Protocol>\n");
    if !spec.definitions.is_empty() {
        out.push_str("  <Identifiers>\n");
        for def in &spec.definitions {
            out.push_str(&format!(
                "    <Definition id=\"{}\">\n      <Source>{}</Source>\n      <Regexp>{}</Regexp>\n    </Definition>\n",
                xml_escape(&def.id),
                xml_escape(def.source.raw()),
                xml_escape(def.regexp.pattern())
            ));
        }
        out.push_str("  </Identifiers>\n");
    }
    if !spec.secrecy_policies.is_empty() || !spec.integrity_policies.is_empty() {
        out.push_str("  <Policy>\n");
        for p in &spec.secrecy_policies {
            out.push_str("    <Secrecy>\n");
            out.push_str(&format!(
                "      <Target>${{{}}}</Target>\n",
                xml_escape(&p.target)
            ));
            for o in &p.origins {
                out.push_str(&format!("      <Origin>{}</Origin>\n", xml_escape(o.raw())));
            }
            out.push_str("    </Secrecy>\n");
        }
        for p in &spec.integrity_policies {
            out.push_str("    <Integrity>\n");
            out.push_str(&format!(
                "      <Target>${{{}}}</Target>\n",
                xml_escape(&p.target)
            ));
            let matches = match &p.matches {
                MatchesPattern::Equality(t) => t.raw().to_string(),
                MatchesPattern::Regex(re) => re.pattern().to_string(),
            };
            out.push_str(&format!("      <Matches>{}</Matches>\n", xml_escape(&matches)));
            out.push_str("    </Integrity>\n");
        }
        out.push_str("  </Policy>\n");
    }
    out.push_str("</Specification>\n");
    out
}

fn serialize_flow(flow: &[FlowNode], indent: usize, out: &mut String) {
    let pad = " ".repeat(indent);
    for node in flow {
        match node {
            FlowNode::Message(msg) => {
                match msg.direction {
                    Direction::Request => {
                        out.push_str(&pad);
                        out.push_str("<Request");
                        if let Some(m) = &msg.method {
                            out.push_str(&format!(" method=\"{}\"", xml_escape(m)));
                        }
                        out.push_str(&format!(" desc=\"{}\">\n", xml_escape(&msg.desc)));
                    }
                    Direction::Response => {
                        out.push_str(&pad);
                        out.push_str(&format!("<Response desc=\"{}\">\n", xml_escape(&msg.desc)));
                    }
                }
                serialize_endpoint(msg, indent + 2, out);
                let tag = match msg.direction {
                    Direction::Request => "Parameter",
                    Direction::Response => "Header",
                };
                for c in &msg.components {
                    serialize_component(c, tag, indent + 2, out);
                }
                out.push_str(&pad);
                out.push_str(match msg.direction {
                    Direction::Request => "</Request>\n",
                    Direction::Response => "</Response>\n",
                });
            }
            FlowNode::Branch(paths) => {
                out.push_str(&pad);
                out.push_str("<Branch>\n");
                for path in paths {
                    out.push_str(&pad);
                    out.push_str("  <Path>\n");
                    serialize_flow(path, indent + 4, out);
                    out.push_str(&pad);
                    out.push_str("  </Path>\n");
                }
                out.push_str(&pad);
                out.push_str("</Branch>\n");
            }
        }
    }
}

fn serialize_endpoint(msg: &MessagePattern, indent: usize, out: &mut String) {
    let pad = " ".repeat(indent);
    let id_attr = msg
        .endpoint_id
        .as_ref()
        .map(|id| format!(" id=\"{}\"", xml_escape(id)))
        .unwrap_or_default();
    match &msg.endpoint {
        EndpointPattern::Any => out.push_str(&format!("{pad}<Endpoint{id_attr}/>\n")),
        EndpointPattern::Regex(re) => out.push_str(&format!(
            "{pad}<Endpoint{id_attr}>\n{pad}  <Regexp>{}</Regexp>\n{pad}</Endpoint>\n",
            xml_escape(re.pattern())
        )),
        EndpointPattern::Template(t) => out.push_str(&format!(
            "{pad}<Endpoint{id_attr}>{}</Endpoint>\n",
            xml_escape(t.raw())
        )),
    }
}

fn serialize_component(c: &ComponentPattern, tag: &str, indent: usize, out: &mut String) {
    let pad = " ".repeat(indent);
    let id_attr = c
        .id
        .as_ref()
        .map(|id| format!(" id=\"{}\"", xml_escape(id)))
        .unwrap_or_default();
    let name = xml_escape(&c.name);
    match &c.pattern {
        ValuePattern::Any => out.push_str(&format!("{pad}<{tag} name=\"{name}\"{id_attr}/>\n")),
        ValuePattern::Literal(l) => out.push_str(&format!(
            "{pad}<{tag} name=\"{name}\"{id_attr}>{}</{tag}>\n",
            xml_escape(l)
        )),
        ValuePattern::Regex(re) => out.push_str(&format!(
            "{pad}<{tag} name=\"{name}\"{id_attr}>\n{pad}  <Regexp>{}</Regexp>\n{pad}</{tag}>\n",
            xml_escape(re.pattern())
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE_SPEC: &str =
        include_str!("../../tests/fixtures/google-explicit-nostate.xml");

    #[test]
    fn reference_document_parses_with_all_identifiers() {
        let spec = parse_spec(REFERENCE_SPEC).unwrap();
        assert_eq!(spec.name, "google-explicit-nostate");
        let (skeleton, diags) = FlowSkeleton::build(&spec.flow);
        assert!(diags.is_empty());
        assert_eq!(skeleton.nodes.len(), 3);

        let mut ids: Vec<&str> = skeleton
            .nodes
            .iter()
            .flat_map(|n| n.msg.bound_ids())
            .chain(spec.definitions.iter().map(|d| d.id.as_str()))
            .collect();
        ids.sort_unstable();
        assert_eq!(
            ids,
            vec![
                "authcode",
                "origin",
                "req_init_redirect_uri",
                "resp_init_location",
                "uri1",
                "uri2"
            ]
        );
        assert_eq!(spec.secrecy_policies.len(), 1);
        assert_eq!(spec.secrecy_policies[0].origins.len(), 2);
        assert_eq!(spec.integrity_policies.len(), 1);
    }

    #[test]
    fn xml_entities_decode_inside_patterns() {
        let spec = parse_spec(REFERENCE_SPEC).unwrap();
        let authcode = spec.definitions.iter().find(|d| d.id == "authcode").unwrap();
        assert_eq!(authcode.regexp.pattern(), "[?&]code=(.*?)(?:&|$)");
    }

    #[test]
    fn pattern_text_is_trimmed() {
        let spec = parse_spec(REFERENCE_SPEC).unwrap();
        let FlowNode::Message(first) = &spec.flow[0] else {
            panic!()
        };
        match &first.components[0].pattern {
            ValuePattern::Literal(l) => assert_eq!(l, "code"),
            other => panic!("expected literal, got {other:?}"),
        }
        match &first.endpoint {
            EndpointPattern::Regex(re) => {
                assert!(!re.pattern().starts_with(' '));
                assert!(!re.pattern().ends_with(' '));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dangling_reference_is_rejected() {
        let xml = r#"<Specification name="bad">
            <Protocol>
              <Request method="GET" desc="r">
                <Endpoint><Regexp> x </Regexp></Endpoint>
              </Request>
            </Protocol>
            <Identifiers>
              <Definition id="d"><Source> ${undefined} </Source><Regexp> (.*) </Regexp></Definition>
            </Identifiers>
          </Specification>"#;
        assert_eq!(
            parse_spec(xml),
            Err(SpecError::UnresolvedReference("undefined".to_string()))
        );
    }

    #[test]
    fn duplicate_identifier_is_rejected() {
        let xml = r#"<Specification name="bad">
            <Protocol>
              <Request method="GET" desc="r">
                <Endpoint id="x"><Regexp> e </Regexp></Endpoint>
                <Parameter name="p" id="x" />
              </Request>
            </Protocol>
          </Specification>"#;
        assert_eq!(
            parse_spec(xml),
            Err(SpecError::DuplicateIdentifier("x".to_string()))
        );
    }

    #[test]
    fn unknown_tags_are_errors_not_ignored() {
        let xml = r#"<Specification name="bad">
            <Protocol>
              <Message desc="r" />
            </Protocol>
          </Specification>"#;
        assert!(matches!(
            parse_spec(xml),
            Err(SpecError::UnknownTag { tag, .. }) if tag == "Message"
        ));
    }

    #[test]
    fn lookaround_is_rejected_with_pattern_and_location() {
        let xml = r#"<Specification name="bad">
            <Protocol>
              <Request method="GET" desc="r">
                <Endpoint><Regexp> (?=x) </Regexp></Endpoint>
              </Request>
            </Protocol>
          </Specification>"#;
        match parse_spec(xml) {
            Err(SpecError::InvalidRegex { pattern, location, .. }) => {
                assert_eq!(pattern, "(?=x)");
                assert_eq!(location, "r");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_name_attribute_is_reported() {
        let xml = r#"<Specification name="bad">
            <Protocol>
              <Request method="GET" desc="r">
                <Endpoint><Regexp> e </Regexp></Endpoint>
                <Parameter id="p" />
              </Request>
            </Protocol>
          </Specification>"#;
        assert!(matches!(
            parse_spec(xml),
            Err(SpecError::MissingAttribute { attribute, .. }) if attribute == "name"
        ));
    }

    #[test]
    fn reference_document_validates_cleanly() {
        let spec = parse_spec(REFERENCE_SPEC).unwrap();
        assert_eq!(validate_spec(&spec), Vec::new());
    }

    #[test]
    fn secrecy_target_bound_in_request_is_diagnosed() {
        let xml = r#"<Specification name="bad">
            <Protocol>
              <Request method="GET" desc="r">
                <Endpoint><Regexp> e </Regexp></Endpoint>
                <Parameter name="token" id="tok" />
              </Request>
            </Protocol>
            <Policy>
              <Secrecy><Target> ${tok} </Target><Origin> https://a.example/ </Origin></Secrecy>
            </Policy>
          </Specification>"#;
        let diags = validate_spec(&parse_spec(xml).unwrap());
        assert!(
            diags
                .iter()
                .any(|d| d.severity == Severity::Error
                    && d.message.contains("secret must originate in a response")),
            "{diags:?}"
        );
    }

    #[test]
    fn integrity_operand_scope_violation_is_diagnosed() {
        // the reference flow reordered so the uri2-introducing message comes
        // first: at uri2's introduction, uri1 is not yet bound
        let xml = r#"<Specification name="reordered">
            <Protocol>
              <Request method="GET" desc="req_code">
                <Endpoint id="uri2"/>
                <Parameter name="code"><Regexp> [^\s]{40,} </Regexp></Parameter>
              </Request>
              <Request method="GET" desc="req_init">
                <Endpoint><Regexp> auth </Regexp></Endpoint>
                <Parameter name="redirect_uri" id="req_init_redirect_uri" />
              </Request>
            </Protocol>
            <Identifiers>
              <Definition id="uri1">
                <Source> ${req_init_redirect_uri} </Source>
                <Regexp> ^(https?://.*?)(?:\?|$) </Regexp>
              </Definition>
            </Identifiers>
            <Policy>
              <Integrity><Target> ${uri2} </Target><Matches> ${uri1} </Matches></Integrity>
            </Policy>
          </Specification>"#;
        let diags = validate_spec(&parse_spec(xml).unwrap());
        assert!(
            diags
                .iter()
                .any(|d| d.severity == Severity::Error
                    && d.message.contains("never jointly in scope")),
            "{diags:?}"
        );
    }

    #[test]
    fn empty_flow_is_diagnosed() {
        let spec = parse_spec(r#"<Specification name="e"><Protocol/></Specification>"#).unwrap();
        let diags = validate_spec(&spec);
        assert!(diags.iter().any(|d| d.message.contains("flow is empty")));
    }

    #[test]
    fn messages_after_a_branch_are_diagnosed() {
        let xml = r#"<Specification name="bad">
            <Protocol>
              <Branch>
                <Path>
                  <Request method="GET" desc="l"><Endpoint><Regexp> l </Regexp></Endpoint></Request>
                </Path>
                <Path>
                  <Request method="GET" desc="r"><Endpoint><Regexp> r </Regexp></Endpoint></Request>
                </Path>
              </Branch>
              <Request method="GET" desc="after"><Endpoint><Regexp> x </Regexp></Endpoint></Request>
            </Protocol>
          </Specification>"#;
        let diags = validate_spec(&parse_spec(xml).unwrap());
        assert!(
            diags.iter().any(|d| d.message.contains("last element")),
            "{diags:?}"
        );
    }

    #[test]
    fn unused_identifier_gets_a_warning_only() {
        let xml = r#"<Specification name="w">
            <Protocol>
              <Request method="GET" desc="r">
                <Endpoint><Regexp> e </Regexp></Endpoint>
                <Parameter name="p" id="never_used" />
              </Request>
            </Protocol>
          </Specification>"#;
        let diags = validate_spec(&parse_spec(xml).unwrap());
        assert!(diags.iter().all(|d| d.severity == Severity::Warning));
        assert!(!has_errors(&diags));
    }

    #[test]
    fn endpoint_backreference_parses_and_checks_scope() {
        let xml = r#"<Specification name="backref">
            <Protocol>
              <Request method="GET" desc="one">
                <Endpoint><Regexp> ^https://a\.example/x$ </Regexp></Endpoint>
                <Parameter name="next" id="next_url" />
              </Request>
              <Request method="GET" desc="two">
                <Endpoint>${next_url}</Endpoint>
              </Request>
            </Protocol>
          </Specification>"#;
        let spec = parse_spec(xml).unwrap();
        assert!(!has_errors(&validate_spec(&spec)));

        // referencing an id bound by the same (not an earlier) message is an error
        let bad = r#"<Specification name="backref">
            <Protocol>
              <Request method="GET" desc="one">
                <Endpoint>${par}</Endpoint>
                <Parameter name="p" id="par" />
              </Request>
            </Protocol>
          </Specification>"#;
        assert!(has_errors(&validate_spec(&parse_spec(bad).unwrap())));
    }

    #[test]
    fn parsing_is_deterministic() {
        let a = parse_spec(REFERENCE_SPEC).unwrap();
        let b = parse_spec(REFERENCE_SPEC).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_serialization_round_trips() {
        let mut docs: Vec<String> = crate::catalog::BUILTIN_SPECS
            .iter()
            .map(|(_, xml)| xml.to_string())
            .collect();
        docs.push(REFERENCE_SPEC.to_string());
        docs.push(crate::harness::fixtures::TOY_ALPHA_XML.to_string());
        docs.push(crate::harness::fixtures::TOY_BETA_XML.to_string());
        for doc in docs {
            let parsed = parse_spec(&doc).unwrap();
            let reparsed = parse_spec(&serialize_spec(&parsed)).unwrap();
            assert_eq!(parsed, reparsed, "round-trip mismatch for {}", parsed.name);
        }
    }
}
