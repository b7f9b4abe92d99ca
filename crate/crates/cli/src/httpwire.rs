//! Minimal HTTP/1.1 wire handling for the proxy and its test servers: head
//! parsing, content-length and chunked bodies, and serialization. The proxy
//! speaks one exchange per connection and answers `Connection: close`.

use std::io::{self, BufRead, Write};

use wpmon_core::http::{AbsoluteUrl, Headers, HttpRequest, HttpResponse};

#[derive(Debug)]
pub struct RequestHead {
    pub method: String,
    pub target: String,
    pub version: String,
    pub headers: Vec<(String, String)>,
}

#[derive(Debug)]
pub struct ResponseHead {
    pub status: u16,
    pub reason: String,
    pub headers: Vec<(String, String)>,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_line(r: &mut impl BufRead) -> io::Result<Option<String>> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Ok(None);
    }
    while line.ends_with('\n') || line.ends_with('\r') {
        line.pop();
    }
    Ok(Some(line))
}

fn read_header_block(r: &mut impl BufRead) -> io::Result<Vec<(String, String)>> {
    let mut headers = Vec::new();
    loop {
        let line = read_line(r)?.ok_or_else(|| bad("eof inside header block"))?;
        if line.is_empty() {
            return Ok(headers);
        }
        let (name, value) = line
            .split_once(':')
            .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        headers.push((name.trim().to_string(), value.trim().to_string()));
    }
}

/// Read a request head; `None` on a cleanly closed connection.
pub fn read_request_head(r: &mut impl BufRead) -> io::Result<Option<RequestHead>> {
    let Some(line) = read_line(r)? else {
        return Ok(None);
    };
    if line.is_empty() {
        return Ok(None);
    }
    let mut parts = line.split_whitespace();
    let (method, target, version) = match (parts.next(), parts.next(), parts.next()) {
        (Some(m), Some(t), Some(v)) => (m.to_string(), t.to_string(), v.to_string()),
        _ => return Err(bad(format!("malformed request line `{line}`"))),
    };
    Ok(Some(RequestHead {
        method,
        target,
        version,
        headers: read_header_block(r)?,
    }))
}

pub fn read_response_head(r: &mut impl BufRead) -> io::Result<ResponseHead> {
    let line = read_line(r)?.ok_or_else(|| bad("eof before response status line"))?;
    let mut parts = line.splitn(3, ' ');
    let _version = parts.next().ok_or_else(|| bad("empty status line"))?;
    let status: u16 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("malformed status line `{line}`")))?;
    let reason = parts.next().unwrap_or("").to_string();
    Ok(ResponseHead {
        status,
        reason,
        headers: read_header_block(r)?,
    })
}

fn header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

fn read_chunked(r: &mut impl BufRead) -> io::Result<Vec<u8>> {
    let mut body = Vec::new();
    loop {
        let line = read_line(r)?.ok_or_else(|| bad("eof inside chunked body"))?;
        let size_str = line.split(';').next().unwrap_or("").trim();
        let size = usize::from_str_radix(size_str, 16)
            .map_err(|_| bad(format!("malformed chunk size `{line}`")))?;
        if size == 0 {
            // trailers (if any) up to the final blank line
            while let Some(t) = read_line(r)? {
                if t.is_empty() {
                    break;
                }
            }
            return Ok(body);
        }
        let mut chunk = vec![0u8; size];
        r.read_exact(&mut chunk)?;
        body.extend_from_slice(&chunk);
        let _crlf = read_line(r)?;
    }
}

/// Read a message body according to its headers. For responses without
/// explicit framing the body extends to EOF (`Connection: close` delimited).
pub fn read_body(
    r: &mut impl BufRead,
    headers: &[(String, String)],
    close_delimited_fallback: bool,
) -> io::Result<Option<Vec<u8>>> {
    if let Some(te) = header(headers, "transfer-encoding") {
        if te.to_ascii_lowercase().contains("chunked") {
            return Ok(Some(read_chunked(r)?));
        }
    }
    if let Some(cl) = header(headers, "content-length") {
        let n: usize = cl
            .trim()
            .parse()
            .map_err(|_| bad(format!("malformed content-length `{cl}`")))?;
        if n == 0 {
            return Ok(None);
        }
        let mut body = vec![0u8; n];
        r.read_exact(&mut body)?;
        return Ok(Some(body));
    }
    if close_delimited_fallback {
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        return Ok(if body.is_empty() { None } else { Some(body) });
    }
    Ok(None)
}

/// Convert a parsed head plus body into the engine's request type.
/// `url` is the absolute request target.
pub fn to_engine_request(
    head: &RequestHead,
    url: AbsoluteUrl,
    body: Option<Vec<u8>>,
) -> HttpRequest {
    let mut req = HttpRequest::new(head.method.clone(), url);
    for (n, v) in &head.headers {
        // hop-by-hop and proxy-control headers never travel upstream
        if matches!(
            n.to_ascii_lowercase().as_str(),
            "proxy-connection" | "proxy-authorization" | "connection" | "keep-alive" | "te"
        ) {
            continue;
        }
        // the body is decoded before forwarding
        if n.eq_ignore_ascii_case("transfer-encoding") {
            continue;
        }
        req.headers.push(n.clone(), v.clone());
    }
    req.body = body;
    req
}

/// Serialize a request in origin-form for the upstream server.
pub fn write_upstream_request(w: &mut impl Write, req: &HttpRequest) -> io::Result<()> {
    write!(w, "{} {} HTTP/1.1\r\n", req.method, req.url.path_and_query())?;
    let mut has_host = false;
    let mut wrote_cl = false;
    for (n, v) in req.headers.iter() {
        if n.eq_ignore_ascii_case("host") {
            has_host = true;
        }
        if n.eq_ignore_ascii_case("content-length") {
            // recomputed below so rewrites cannot desynchronize the framing
            continue;
        }
        write!(w, "{n}: {v}\r\n")?;
    }
    if !has_host {
        let url = &req.url;
        let default = matches!(
            (url.scheme(), url.port()),
            ("http", 80) | ("https", 443)
        );
        if default {
            write!(w, "Host: {}\r\n", url.host())?;
        } else {
            write!(w, "Host: {}:{}\r\n", url.host(), url.port())?;
        }
    }
    if let Some(body) = &req.body {
        write!(w, "Content-Length: {}\r\n", body.len())?;
        wrote_cl = true;
    }
    if !wrote_cl && matches!(req.method.as_str(), "POST" | "PUT" | "PATCH") {
        write!(w, "Content-Length: 0\r\n")?;
    }
    write!(w, "Connection: close\r\n\r\n")?;
    if let Some(body) = &req.body {
        w.write_all(body)?;
    }
    w.flush()
}

/// Relay an engine response to the client with explicit framing.
pub fn write_client_response(w: &mut impl Write, resp: &HttpResponse) -> io::Result<()> {
    write!(w, "HTTP/1.1 {} {}\r\n", resp.status, reason_phrase(resp.status))?;
    for (n, v) in resp.headers.iter() {
        if n.eq_ignore_ascii_case("content-length")
            || n.eq_ignore_ascii_case("transfer-encoding")
            || n.eq_ignore_ascii_case("connection")
        {
            continue;
        }
        write!(w, "{n}: {v}\r\n")?;
    }
    let len = resp.body.as_ref().map(Vec::len).unwrap_or(0);
    write!(w, "Content-Length: {len}\r\nConnection: close\r\n\r\n")?;
    if let Some(body) = &resp.body {
        w.write_all(body)?;
    }
    w.flush()
}

pub fn write_simple_response(
    w: &mut impl Write,
    status: u16,
    extra_headers: &[(&str, &str)],
    content_type: &str,
    body: &[u8],
) -> io::Result<()> {
    write!(w, "HTTP/1.1 {} {}\r\n", status, reason_phrase(status))?;
    for (n, v) in extra_headers {
        write!(w, "{n}: {v}\r\n")?;
    }
    write!(
        w,
        "Content-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    w.write_all(body)?;
    w.flush()
}

fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        204 => "No Content",
        302 => "Found",
        303 => "See Other",
        307 => "Temporary Redirect",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        502 => "Bad Gateway",
        _ => "Status",
    }
}

/// Build the engine's response type from a parsed upstream response.
pub fn to_engine_response(
    head: &ResponseHead,
    request_url: AbsoluteUrl,
    body: Option<Vec<u8>>,
) -> io::Result<HttpResponse> {
    let mut resp = HttpResponse::new(head.status, request_url)
        .map_err(|e| bad(format!("upstream response: {e}")))?;
    let mut headers = Headers::new();
    for (n, v) in &head.headers {
        if n.eq_ignore_ascii_case("connection")
            || n.eq_ignore_ascii_case("keep-alive")
            || n.eq_ignore_ascii_case("transfer-encoding")
        {
            continue;
        }
        headers.push(n.clone(), v.clone());
    }
    resp.headers = headers;
    resp.body = body;
    Ok(resp)
}
