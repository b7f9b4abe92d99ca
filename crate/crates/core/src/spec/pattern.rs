//! Pattern primitives shared by message guards, identifier definitions and
//! policies: regexes, `${id}` templates and component value patterns.

use std::fmt;

use regex::Regex;

use super::SpecError;

/// A compiled guard regex. The accepted dialect covers character classes,
/// anchors, alternation, non-capturing groups and bounded or non-greedy
/// repetition; backreferences and lookaround are rejected at parse time.
/// Patterns are substring-searched unless they anchor themselves with `^`/`$`.
#[derive(Debug, Clone)]
pub struct SpecRegex {
    pattern: String,
    re: Regex,
}

impl SpecRegex {
    pub fn compile(pattern: &str, location: &str) -> Result<SpecRegex, SpecError> {
        let re = Regex::new(pattern).map_err(|e| SpecError::InvalidRegex {
            pattern: pattern.to_string(),
            location: location.to_string(),
            message: e.to_string(),
        })?;
        Ok(SpecRegex {
            pattern: pattern.to_string(),
            re,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn is_match(&self, text: &str) -> bool {
        self.re.is_match(text)
    }

    /// Match and extract: the first capture group if the pattern has one,
    /// otherwise the whole matched substring.
    pub fn extract<'t>(&self, text: &'t str) -> Option<&'t str> {
        let caps = self.re.captures(text)?;
        match caps.get(1) {
            Some(g) => Some(g.as_str()),
            None => Some(caps.get(0).expect("group 0").as_str()),
        }
    }
}

impl PartialEq for SpecRegex {
    fn eq(&self, other: &Self) -> bool {
        self.pattern == other.pattern
    }
}

impl fmt::Display for SpecRegex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pattern)
    }
}

/// A string with `${id}` references, expanded by literal substitution.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    parts: Vec<TemplatePart>,
    raw: String,
}

#[derive(Debug, Clone, PartialEq)]
enum TemplatePart {
    Literal(String),
    Ref(String),
}

impl Template {
    pub fn parse(text: &str) -> Result<Template, SpecError> {
        let mut parts = Vec::new();
        let mut literal = String::new();
        let mut rest = text;
        while let Some(start) = rest.find("${") {
            literal.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find('}').ok_or_else(|| SpecError::InvalidStructure {
                message: format!("unterminated `${{` reference in `{text}`"),
                location: String::new(),
            })?;
            let id = &after[..end];
            if id.is_empty() {
                return Err(SpecError::InvalidStructure {
                    message: format!("empty `${{}}` reference in `{text}`"),
                    location: String::new(),
                });
            }
            if !literal.is_empty() {
                parts.push(TemplatePart::Literal(std::mem::take(&mut literal)));
            }
            parts.push(TemplatePart::Ref(id.to_string()));
            rest = &after[end + 1..];
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            parts.push(TemplatePart::Literal(literal));
        }
        Ok(Template {
            parts,
            raw: text.to_string(),
        })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn refs(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            TemplatePart::Ref(id) => Some(id.as_str()),
            TemplatePart::Literal(_) => None,
        })
    }

    pub fn has_refs(&self) -> bool {
        self.refs().next().is_some()
    }

    /// If the template is exactly one `${id}` reference, return the id.
    pub fn as_single_ref(&self) -> Option<&str> {
        match self.parts.as_slice() {
            [TemplatePart::Ref(id)] => Some(id),
            _ => None,
        }
    }

    /// Expand references via `lookup`; `None` when any reference is unbound.
    pub fn expand(&self, lookup: &dyn Fn(&str) -> Option<String>) -> Option<String> {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                TemplatePart::Literal(l) => out.push_str(l),
                TemplatePart::Ref(id) => out.push_str(&lookup(id)?),
            }
        }
        Some(out)
    }
}

/// Pattern for one named message component (a parameter or a header).
#[derive(Debug, Clone, PartialEq)]
pub enum ValuePattern {
    /// Presence with any value, including empty.
    Any,
    /// Exact string equality.
    Literal(String),
    Regex(SpecRegex),
}

impl ValuePattern {
    /// Match a component value; on success return the value to bind when the
    /// component carries an `id` (the regex capture, or the whole value).
    pub fn capture<'t>(&self, value: &'t str) -> Option<&'t str> {
        match self {
            ValuePattern::Any => Some(value),
            ValuePattern::Literal(l) => (l == value).then_some(value),
            ValuePattern::Regex(re) => re.extract(value),
        }
    }
}

impl fmt::Display for ValuePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValuePattern::Any => f.write_str("*"),
            ValuePattern::Literal(l) => write!(f, "{l:?}"),
            ValuePattern::Regex(re) => write!(f, "/{re}/"),
        }
    }
}

/// Pattern for the endpoint component of a message.
#[derive(Debug, Clone, PartialEq)]
pub enum EndpointPattern {
    /// Any endpoint (used with an id to capture the whole component).
    Any,
    Regex(SpecRegex),
    /// Back-reference: the endpoint must equal the expanded template.
    Template(Template),
}

impl fmt::Display for EndpointPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EndpointPattern::Any => f.write_str("*"),
            EndpointPattern::Regex(re) => write!(f, "/{re}/"),
            EndpointPattern::Template(t) => f.write_str(t.raw()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_splits_refs_and_literals() {
        let t = Template::parse("x${a}-${b}y").unwrap();
        assert_eq!(t.refs().collect::<Vec<_>>(), vec!["a", "b"]);
        let expanded = t.expand(&|id| Some(format!("<{id}>"))).unwrap();
        assert_eq!(expanded, "x<a>-<b>y");
    }

    #[test]
    fn template_single_ref() {
        assert_eq!(Template::parse("${uri1}").unwrap().as_single_ref(), Some("uri1"));
        assert_eq!(Template::parse(" ${uri1}").unwrap().as_single_ref(), None);
    }

    #[test]
    fn template_unbound_ref_fails_expansion() {
        let t = Template::parse("${missing}").unwrap();
        assert_eq!(t.expand(&|_| None), None);
    }

    #[test]
    fn template_rejects_unterminated_ref() {
        assert!(Template::parse("${oops").is_err());
    }

    #[test]
    fn regex_dialect_rejects_lookaround_and_backreferences() {
        assert!(SpecRegex::compile("(?=x)", "t").is_err());
        assert!(SpecRegex::compile(r"(a)\1", "t").is_err());
    }

    #[test]
    fn regex_supports_bounded_and_nongreedy_repetition() {
        let re = SpecRegex::compile(r"[?&]code=(.*?)(?:&|$)", "t").unwrap();
        assert_eq!(
            re.extract("https://rp.example/cb?code=abc&state=s"),
            Some("abc")
        );
        let re = SpecRegex::compile(r"[^\s]{40,}", "t").unwrap();
        assert!(re.is_match(&"x".repeat(40)));
        assert!(!re.is_match(&"x".repeat(39)));
    }

    #[test]
    fn unanchored_patterns_substring_search() {
        let re = SpecRegex::compile("oauth2", "t").unwrap();
        assert!(re.is_match("https://accounts.google.com/o/oauth2/auth"));
        let re = SpecRegex::compile("^https://a", "t").unwrap();
        assert!(!re.is_match("xhttps://a"));
    }

    #[test]
    fn value_pattern_semantics() {
        assert_eq!(ValuePattern::Any.capture(""), Some(""));
        assert_eq!(ValuePattern::Literal("code".into()).capture("code"), Some("code"));
        assert_eq!(ValuePattern::Literal("code".into()).capture("token"), None);
        let re = SpecRegex::compile("^(https?://.*?/).*", "t").unwrap();
        assert_eq!(
            ValuePattern::Regex(re).capture("https://rp.example/cb?x=1"),
            Some("https://rp.example/")
        );
    }
}
