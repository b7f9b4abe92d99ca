//! XML parsing for protocol specifications.
//!
//! The accepted document shape:
//!
//! ```text
//! <Specification name="...">
//!   <Protocol>
//!     <Request method="GET" desc="...">
//!       <Endpoint id?> <Regexp>...</Regexp> | ${ref} | (empty) </Endpoint>
//!       <Parameter name="..." id?> literal | <Regexp>...</Regexp> | (empty) </Parameter>
//!     </Request>
//!     <Response desc="...">
//!       <Endpoint .../>
//!       <Header name="..." id?> ... </Header>
//!     </Response>
//!     <Branch> <Path> ...messages... </Path> <Path> ... </Path> </Branch>
//!   </Protocol>
//!   <Identifiers>
//!     <Definition id="..."> <Source>...</Source> <Regexp>...</Regexp> </Definition>
//!   </Identifiers>
//!   <Policy>
//!     <Secrecy> <Target>${id}</Target> <Origin>...</Origin>+ </Secrecy>
//!     <Integrity> <Target>${id}</Target> <Matches>...</Matches> </Integrity>
//!   </Policy>
//! </Specification>
//! ```
//!
//! Unknown tags and attributes are errors. Text inside pattern-bearing
//! elements is trimmed.

use roxmltree::{Document, Node};

use super::pattern::{EndpointPattern, SpecRegex, Template, ValuePattern};
use super::{
    ComponentPattern, Direction, FlowNode, IdentifierDefinition, IntegrityPolicy, MatchesPattern,
    MessagePattern, ProtocolSpec, SecrecyPolicy, SpecError,
};

pub fn parse_spec(xml: &str) -> Result<ProtocolSpec, SpecError> {
    let doc = Document::parse(xml).map_err(|e| SpecError::XmlSyntax(e.to_string()))?;
    let root = doc.root_element();
    expect_tag(&root, "Specification")?;
    let name = require_attr(&root, "name")?;
    check_attrs(&root, &["name"])?;

    let mut flow = None;
    let mut definitions = Vec::new();
    let mut secrecy_policies = Vec::new();
    let mut integrity_policies = Vec::new();
    let mut desc_counter = 0usize;

    for child in element_children(&root)? {
        match child.tag_name().name() {
            "Protocol" => {
                check_attrs(&child, &[])?;
                if flow.is_some() {
                    return Err(invalid(&child, "duplicate <Protocol> element"));
                }
                flow = Some(parse_flow(&child, &mut desc_counter)?);
            }
            "Identifiers" => {
                check_attrs(&child, &[])?;
                for def in element_children(&child)? {
                    expect_tag(&def, "Definition")?;
                    definitions.push(parse_definition(&def)?);
                }
            }
            "Policy" => {
                check_attrs(&child, &[])?;
                for pol in element_children(&child)? {
                    match pol.tag_name().name() {
                        "Secrecy" => secrecy_policies.push(parse_secrecy(&pol)?),
                        "Integrity" => integrity_policies.push(parse_integrity(&pol)?),
                        other => return Err(unknown_tag(&pol, other)),
                    }
                }
            }
            other => return Err(unknown_tag(&child, other)),
        }
    }

    let spec = ProtocolSpec {
        name,
        flow: flow.ok_or_else(|| invalid(&root, "missing <Protocol> element"))?,
        definitions,
        secrecy_policies,
        integrity_policies,
    };
    check_identifiers(&spec)?;
    Ok(spec)
}

fn parse_flow(node: &Node, desc_counter: &mut usize) -> Result<Vec<FlowNode>, SpecError> {
    let mut out = Vec::new();
    for child in element_children(node)? {
        match child.tag_name().name() {
            "Request" => out.push(FlowNode::Message(parse_message(
                &child,
                Direction::Request,
                desc_counter,
            )?)),
            "Response" => out.push(FlowNode::Message(parse_message(
                &child,
                Direction::Response,
                desc_counter,
            )?)),
            "Branch" => {
                check_attrs(&child, &[])?;
                let mut paths = Vec::new();
                for path in element_children(&child)? {
                    expect_tag(&path, "Path")?;
                    check_attrs(&path, &[])?;
                    paths.push(parse_flow(&path, desc_counter)?);
                }
                if paths.is_empty() {
                    return Err(invalid(&child, "<Branch> has no <Path> children"));
                }
                out.push(FlowNode::Branch(paths));
            }
            other => return Err(unknown_tag(&child, other)),
        }
    }
    Ok(out)
}

fn parse_message(
    node: &Node,
    direction: Direction,
    desc_counter: &mut usize,
) -> Result<MessagePattern, SpecError> {
    *desc_counter += 1;
    let (allowed_attrs, component_tag) = match direction {
        Direction::Request => (&["method", "desc"][..], "Parameter"),
        Direction::Response => (&["desc"][..], "Header"),
    };
    check_attrs(node, allowed_attrs)?;
    let desc = node
        .attribute("desc")
        .map(str::to_string)
        .unwrap_or_else(|| format!("step{desc_counter}"));
    let method = node.attribute("method").map(str::to_string);

    let mut endpoint = None;
    let mut endpoint_id = None;
    let mut components = Vec::new();
    for child in element_children(node)? {
        match child.tag_name().name() {
            "Endpoint" => {
                check_attrs(&child, &["id"])?;
                if endpoint.is_some() {
                    return Err(invalid(&child, "duplicate <Endpoint>"));
                }
                endpoint_id = child.attribute("id").map(str::to_string);
                endpoint = Some(parse_endpoint(&child, &desc)?);
            }
            t if t == component_tag => {
                check_attrs(&child, &["name", "id"])?;
                let name = require_attr(&child, "name")?;
                let id = child.attribute("id").map(str::to_string);
                let pattern = parse_value_pattern(&child, &format!("{desc}/{name}"))?;
                components.push(ComponentPattern { name, pattern, id });
            }
            other => return Err(unknown_tag(&child, other)),
        }
    }

    Ok(MessagePattern {
        direction,
        desc,
        method,
        endpoint: endpoint.ok_or_else(|| invalid(node, "message without <Endpoint>"))?,
        endpoint_id,
        components,
    })
}

fn parse_endpoint(node: &Node, location: &str) -> Result<EndpointPattern, SpecError> {
    if let Some(re) = single_regexp_child(node, location)? {
        return Ok(EndpointPattern::Regex(re));
    }
    let text = trimmed_text(node);
    if text.is_empty() {
        return Ok(EndpointPattern::Any);
    }
    let template = Template::parse(&text).map_err(|e| locate(e, node))?;
    if !template.has_refs() {
        return Err(invalid(
            node,
            "literal endpoints must be written as a <Regexp> (or use a ${id} back-reference)",
        ));
    }
    Ok(EndpointPattern::Template(template))
}

fn parse_value_pattern(node: &Node, location: &str) -> Result<ValuePattern, SpecError> {
    if let Some(re) = single_regexp_child(node, location)? {
        return Ok(ValuePattern::Regex(re));
    }
    let text = trimmed_text(node);
    if text.is_empty() {
        return Ok(ValuePattern::Any);
    }
    if text.contains("${") {
        return Err(invalid(
            node,
            "parameter and header patterns do not support ${id} references; \
             use an <Integrity> policy instead",
        ));
    }
    Ok(ValuePattern::Literal(text))
}

fn parse_definition(node: &Node) -> Result<IdentifierDefinition, SpecError> {
    check_attrs(node, &["id"])?;
    let id = require_attr(node, "id")?;
    let mut source = None;
    let mut regexp = None;
    for child in element_children(node)? {
        match child.tag_name().name() {
            "Source" => {
                check_attrs(&child, &[])?;
                source = Some(Template::parse(&trimmed_text(&child)).map_err(|e| locate(e, &child))?)
            }
            "Regexp" => {
                check_attrs(&child, &[])?;
                regexp = Some(SpecRegex::compile(
                    &trimmed_text(&child),
                    &format!("definition {id}"),
                )?)
            }
            other => return Err(unknown_tag(&child, other)),
        }
    }
    Ok(IdentifierDefinition {
        source: source.ok_or_else(|| invalid(node, "definition without <Source>"))?,
        regexp: regexp.ok_or_else(|| invalid(node, "definition without <Regexp>"))?,
        id,
    })
}

fn parse_secrecy(node: &Node) -> Result<SecrecyPolicy, SpecError> {
    check_attrs(node, &[])?;
    let mut target = None;
    let mut origins = Vec::new();
    for child in element_children(node)? {
        match child.tag_name().name() {
            "Target" => target = Some(parse_target(&child)?),
            "Origin" => {
                check_attrs(&child, &[])?;
                origins.push(Template::parse(&trimmed_text(&child)).map_err(|e| locate(e, &child))?)
            }
            other => return Err(unknown_tag(&child, other)),
        }
    }
    if origins.is_empty() {
        return Err(invalid(node, "secrecy policy without <Origin>"));
    }
    Ok(SecrecyPolicy {
        target: target.ok_or_else(|| invalid(node, "secrecy policy without <Target>"))?,
        origins,
    })
}

fn parse_integrity(node: &Node) -> Result<IntegrityPolicy, SpecError> {
    check_attrs(node, &[])?;
    let mut target = None;
    let mut matches = None;
    for child in element_children(node)? {
        match child.tag_name().name() {
            "Target" => target = Some(parse_target(&child)?),
            "Matches" => {
                check_attrs(&child, &[])?;
                let text = trimmed_text(&child);
                let template = Template::parse(&text).map_err(|e| locate(e, &child))?;
                matches = Some(if template.has_refs() {
                    MatchesPattern::Equality(template)
                } else {
                    MatchesPattern::Regex(SpecRegex::compile(&text, "integrity matches")?)
                });
            }
            other => return Err(unknown_tag(&child, other)),
        }
    }
    Ok(IntegrityPolicy {
        target: target.ok_or_else(|| invalid(node, "integrity policy without <Target>"))?,
        matches: matches.ok_or_else(|| invalid(node, "integrity policy without <Matches>"))?,
    })
}

fn parse_target(node: &Node) -> Result<String, SpecError> {
    check_attrs(node, &[])?;
    let text = trimmed_text(node);
    let template = Template::parse(&text).map_err(|e| locate(e, node))?;
    match template.as_single_ref() {
        Some(id) => Ok(id.to_string()),
        None => Err(invalid(node, "policy <Target> must be a single ${id} reference")),
    }
}

/// Declaration and reference hygiene over the whole spec: every identifier is
/// declared exactly once, every `${id}` resolves to a declared identifier.
fn check_identifiers(spec: &ProtocolSpec) -> Result<(), SpecError> {
    fn collect<'a>(flow: &'a [FlowNode], out: &mut Vec<&'a str>) {
        for node in flow {
            match node {
                FlowNode::Message(msg) => out.extend(msg.bound_ids()),
                FlowNode::Branch(paths) => {
                    for path in paths {
                        collect(path, out);
                    }
                }
            }
        }
    }
    let mut declared: Vec<&str> = Vec::new();
    collect(&spec.flow, &mut declared);
    declared.extend(spec.definitions.iter().map(|d| d.id.as_str()));
    for (i, id) in declared.iter().enumerate() {
        if declared[..i].contains(id) {
            return Err(SpecError::DuplicateIdentifier(id.to_string()));
        }
    }

    let mut check_ref = |id: &str| -> Result<(), SpecError> {
        if declared.contains(&id) {
            Ok(())
        } else {
            Err(SpecError::UnresolvedReference(id.to_string()))
        }
    };
    fn walk_templates<'a>(
        flow: &'a [FlowNode],
        check: &mut dyn FnMut(&'a str) -> Result<(), SpecError>,
    ) -> Result<(), SpecError> {
        for node in flow {
            match node {
                FlowNode::Message(msg) => {
                    if let EndpointPattern::Template(t) = &msg.endpoint {
                        for r in t.refs() {
                            check(r)?;
                        }
                    }
                }
                FlowNode::Branch(paths) => {
                    for path in paths {
                        walk_templates(path, check)?;
                    }
                }
            }
        }
        Ok(())
    }
    walk_templates(&spec.flow, &mut check_ref)?;
    for def in &spec.definitions {
        for r in def.source.refs() {
            check_ref(r)?;
        }
    }
    for p in &spec.secrecy_policies {
        check_ref(&p.target)?;
        for o in &p.origins {
            for r in o.refs() {
                check_ref(r)?;
            }
        }
    }
    for p in &spec.integrity_policies {
        check_ref(&p.target)?;
        if let MatchesPattern::Equality(t) = &p.matches {
            for r in t.refs() {
                check_ref(r)?;
            }
        }
    }
    Ok(())
}

fn element_children<'a, 'd>(node: &Node<'a, 'd>) -> Result<Vec<Node<'a, 'd>>, SpecError> {
    let mut out = Vec::new();
    for child in node.children() {
        if child.is_element() {
            out.push(child);
        } else if child.is_text() {
            // Mixed content is only meaningful for pattern-bearing leaves,
            // which never reach here (they have no element children).
            let text = child.text().unwrap_or("");
            if !text.trim().is_empty() && node.children().any(|c| c.is_element()) {
                return Err(invalid(node, "unexpected text content"));
            }
        }
    }
    Ok(out)
}

fn single_regexp_child(node: &Node, location: &str) -> Result<Option<SpecRegex>, SpecError> {
    let mut found = None;
    for child in node.children().filter(|c| c.is_element()) {
        expect_tag(&child, "Regexp")?;
        check_attrs(&child, &[])?;
        if found.is_some() {
            return Err(invalid(node, "more than one <Regexp>"));
        }
        found = Some(SpecRegex::compile(&trimmed_text(&child), location)?);
    }
    Ok(found)
}

fn trimmed_text(node: &Node) -> String {
    node.children()
        .filter_map(|c| if c.is_text() { c.text() } else { None })
        .collect::<String>()
        .trim()
        .to_string()
}

fn expect_tag(node: &Node, tag: &str) -> Result<(), SpecError> {
    if node.tag_name().name() == tag {
        Ok(())
    } else {
        Err(unknown_tag(node, node.tag_name().name()))
    }
}

fn check_attrs(node: &Node, allowed: &[&str]) -> Result<(), SpecError> {
    for attr in node.attributes() {
        if !allowed.contains(&attr.name()) {
            return Err(invalid(
                node,
                &format!("unexpected attribute `{}`", attr.name()),
            ));
        }
    }
    Ok(())
}

fn require_attr(node: &Node, attr: &str) -> Result<String, SpecError> {
    node.attribute(attr)
        .map(str::to_string)
        .ok_or_else(|| SpecError::MissingAttribute {
            tag: node.tag_name().name().to_string(),
            attribute: attr.to_string(),
            location: position(node),
        })
}

fn position(node: &Node) -> String {
    let pos = node.document().text_pos_at(node.range().start);
    format!("{}:{}", pos.row, pos.col)
}

fn unknown_tag(node: &Node, tag: &str) -> SpecError {
    SpecError::UnknownTag {
        tag: tag.to_string(),
        location: position(node),
    }
}

fn invalid(node: &Node, message: &str) -> SpecError {
    SpecError::InvalidStructure {
        message: message.to_string(),
        location: position(node),
    }
}

fn locate(err: SpecError, node: &Node) -> SpecError {
    match err {
        SpecError::InvalidStructure { message, .. } => SpecError::InvalidStructure {
            message,
            location: position(node),
        },
        other => other,
    }
}
