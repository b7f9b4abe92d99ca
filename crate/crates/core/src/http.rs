//! Normalized HTTP messages and the URL/origin algebra that guards match against.
//!
//! Requests are modeled as an endpoint plus a parameter list (query string and,
//! for form-urlencoded bodies, the decoded body), responses as an endpoint plus
//! a header list. Everything here is a pure value type.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HttpError {
    #[error("malformed url `{0}`: expected an absolute http(s) URL")]
    MalformedUrl(String),
    #[error("invalid status code {0}: expected 100..=599")]
    InvalidStatus(u16),
}

/// An absolute http(s) URL decomposed into components.
///
/// Path, query and fragment are preserved byte-exactly; serialization elides
/// the scheme default port, so `serialize(parse(t)) == t` modulo that elision.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AbsoluteUrl {
    scheme: String,
    host: String,
    port: u16,
    path: String,
    query: Option<String>,
    fragment: Option<String>,
}

fn default_port(scheme: &str) -> Option<u16> {
    match scheme {
        "http" => Some(80),
        "https" => Some(443),
        _ => None,
    }
}

/// Decompose an absolute http(s) URL. Relative or unparseable input is rejected.
pub fn parse_url(text: &str) -> Result<AbsoluteUrl, HttpError> {
    let err = || HttpError::MalformedUrl(text.to_string());
    let rest = text.strip_prefix("http").ok_or_else(err)?;
    let (scheme, rest) = if let Some(r) = rest.strip_prefix("s://") {
        ("https", r)
    } else if let Some(r) = rest.strip_prefix("://") {
        ("http", r)
    } else {
        return Err(err());
    };

    let authority_end = rest
        .find(|c| c == '/' || c == '?' || c == '#')
        .unwrap_or(rest.len());
    let authority = &rest[..authority_end];
    let tail = &rest[authority_end..];
    if authority.is_empty() || authority.contains('@') {
        return Err(err());
    }

    let (host, port) = match authority.rsplit_once(':') {
        Some((h, p)) => {
            let port: u16 = p.parse().map_err(|_| err())?;
            if port == 0 {
                return Err(err());
            }
            (h, port)
        }
        None => (authority, default_port(scheme).expect("http(s) scheme")),
    };
    if host.is_empty() {
        return Err(err());
    }

    let (path_query, fragment) = match tail.split_once('#') {
        Some((pq, f)) => (pq, Some(f.to_string())),
        None => (tail, None),
    };
    let (path, query) = match path_query.split_once('?') {
        Some((p, q)) => (p.to_string(), Some(q.to_string())),
        None => (path_query.to_string(), None),
    };

    Ok(AbsoluteUrl {
        scheme: scheme.to_string(),
        host: host.to_ascii_lowercase(),
        port,
        path,
        query,
        fragment,
    })
}

impl AbsoluteUrl {
    pub fn scheme(&self) -> &str {
        &self.scheme
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    /// Raw query string without the leading `?`; empty when absent.
    pub fn query(&self) -> &str {
        self.query.as_deref().unwrap_or("")
    }

    pub fn set_query(&mut self, query: Option<String>) {
        self.query = query;
    }

    /// Raw fragment without the leading `#`; empty when absent.
    pub fn fragment(&self) -> &str {
        self.fragment.as_deref().unwrap_or("")
    }

    /// `scheme://host[:port]path` with the default port elided and query and
    /// fragment excluded. This is the string endpoint patterns match against.
    pub fn endpoint(&self) -> String {
        let mut s = String::new();
        self.write_origin_prefix(&mut s);
        s.push_str(&self.path);
        s
    }

    fn write_origin_prefix(&self, out: &mut String) {
        out.push_str(&self.scheme);
        out.push_str("://");
        out.push_str(&self.host);
        if default_port(&self.scheme) != Some(self.port) {
            out.push(':');
            out.push_str(&self.port.to_string());
        }
    }

    /// Path plus raw query, as it appears in an origin-form request line.
    pub fn path_and_query(&self) -> String {
        let mut s = if self.path.is_empty() {
            "/".to_string()
        } else {
            self.path.clone()
        };
        if let Some(q) = &self.query {
            s.push('?');
            s.push_str(q);
        }
        s
    }
}

impl fmt::Display for AbsoluteUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = self.endpoint();
        if let Some(q) = &self.query {
            s.push('?');
            s.push_str(q);
        }
        if let Some(frag) = &self.fragment {
            s.push('#');
            s.push_str(frag);
        }
        f.write_str(&s)
    }
}

/// A web origin: scheme, host and port. Hosts compare case-insensitively
/// (normalized to lowercase on construction).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Origin {
    scheme: String,
    host: String,
    port: u16,
}

impl Origin {
    /// Parse from any absolute URL; path, query and fragment are ignored.
    pub fn parse(text: &str) -> Result<Origin, HttpError> {
        Ok(origin_of(&parse_url(text)?))
    }
}

/// The origin of a URL.
pub fn origin_of(url: &AbsoluteUrl) -> Origin {
    Origin {
        scheme: url.scheme.clone(),
        host: url.host.clone(),
        port: url.port,
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.scheme, self.host)?;
        if default_port(&self.scheme) != Some(self.port) {
            write!(f, ":{}", self.port)?;
        }
        write!(f, "/")
    }
}

/// Ordered multimap of header fields. Names compare case-insensitively,
/// values are kept byte-exact; duplicates and ordering are preserved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Headers {
    entries: Vec<(String, String)>,
}

impl Headers {
    pub fn new() -> Headers {
        Headers::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.entries.push((name.into(), value.into()));
    }

    pub fn get_first(&self, name: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn values<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Apply a rewrite to every header value.
    pub fn map_values(&mut self, mut f: impl FnMut(&str, &str) -> Option<String>) {
        for (n, v) in self.entries.iter_mut() {
            if let Some(new) = f(n, v) {
                *v = new;
            }
        }
    }
}

impl FromIterator<(String, String)> for Headers {
    fn from_iter<T: IntoIterator<Item = (String, String)>>(iter: T) -> Headers {
        Headers {
            entries: iter.into_iter().collect(),
        }
    }
}

/// An HTTP request as observed leaving the monitored client.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    pub method: String,
    pub url: AbsoluteUrl,
    pub headers: Headers,
    pub body: Option<Vec<u8>>,
}

impl HttpRequest {
    pub fn new(method: impl Into<String>, url: AbsoluteUrl) -> HttpRequest {
        HttpRequest {
            method: method.into(),
            url,
            headers: Headers::new(),
            body: None,
        }
    }

    fn has_form_body(&self) -> bool {
        self.headers
            .get_first("content-type")
            .map(|ct| {
                ct.split(';')
                    .next()
                    .unwrap_or("")
                    .trim()
                    .eq_ignore_ascii_case("application/x-www-form-urlencoded")
            })
            .unwrap_or(false)
    }

    /// Parameter view: query pairs in URL order followed by form-body pairs in
    /// body order, percent-decoded, duplicates preserved. Multipart and other
    /// body encodings are not parameter sources.
    pub fn params(&self) -> Vec<(String, String)> {
        let mut out = decode_form_pairs(self.url.query().as_bytes());
        if self.has_form_body() {
            if let Some(body) = &self.body {
                out.extend(decode_form_pairs(body));
            }
        }
        out
    }
}

/// An HTTP response as observed arriving at the monitored client.
/// `request_url` is the URL of the request this response answers.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub request_url: AbsoluteUrl,
    pub headers: Headers,
    pub body: Option<Vec<u8>>,
}

impl HttpResponse {
    pub fn new(status: u16, request_url: AbsoluteUrl) -> Result<HttpResponse, HttpError> {
        if !(100..=599).contains(&status) {
            return Err(HttpError::InvalidStatus(status));
        }
        Ok(HttpResponse {
            status,
            request_url,
            headers: Headers::new(),
            body: None,
        })
    }
}

/// One message of the browser-relayed event stream.
#[derive(Debug, Clone, PartialEq)]
pub enum HttpEvent {
    Request(HttpRequest),
    Response(HttpResponse),
}

impl HttpEvent {
    pub fn is_request(&self) -> bool {
        matches!(self, HttpEvent::Request(_))
    }

    /// The endpoint string the event is matched against: the request target
    /// for requests, the answered request's URL for responses.
    pub fn endpoint(&self) -> String {
        match self {
            HttpEvent::Request(r) => r.url.endpoint(),
            HttpEvent::Response(r) => r.request_url.endpoint(),
        }
    }

    pub fn headers(&self) -> &Headers {
        match self {
            HttpEvent::Request(r) => &r.headers,
            HttpEvent::Response(r) => &r.headers,
        }
    }

    /// Searchable text rendering (request line or status, headers, body) used
    /// by the harness for containment assertions.
    pub fn searchable_text(&self) -> String {
        let mut out = String::new();
        match self {
            HttpEvent::Request(r) => {
                out.push_str(&r.method);
                out.push(' ');
                out.push_str(&r.url.to_string());
                out.push('\n');
            }
            HttpEvent::Response(r) => {
                out.push_str(&format!("{} {}\n", r.status, r.request_url));
            }
        }
        for (n, v) in self.headers().iter() {
            out.push_str(n);
            out.push_str(": ");
            out.push_str(v);
            out.push('\n');
        }
        let body = match self {
            HttpEvent::Request(r) => r.body.as_deref(),
            HttpEvent::Response(r) => r.body.as_deref(),
        };
        if let Some(b) = body {
            out.push_str(&String::from_utf8_lossy(b));
        }
        out
    }
}

fn decode_form_pairs(raw: &[u8]) -> Vec<(String, String)> {
    if raw.is_empty() {
        return Vec::new();
    }
    form_urlencoded::parse(raw)
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect()
}
