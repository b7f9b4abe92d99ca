//! Threaded intercepting HTTP proxy. Plain-HTTP exchanges (absolute-form
//! request targets) run through the monitor; CONNECT tunnels are either
//! relayed blindly or TLS-terminated with a local CA.
//!
//! All events of one monitor context pass through that context's mutex, so
//! per-context processing is strictly serialized while distinct clients
//! proxy in parallel.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use wpmon_core::automaton::compose;
use wpmon_core::engine::{EventOutcome, MonitorContext, Verdict};
use wpmon_core::http::{parse_url, HttpEvent, HttpRequest, HttpResponse};
use wpmon_core::spec::parse_spec;
use wpmon_core::Automaton;

use crate::config::{Keying, ProxyConfig, TlsMode};
use crate::httpwire::{
    read_body, read_request_head, read_response_head, to_engine_request, to_engine_response,
    write_client_response, write_simple_response, write_upstream_request, RequestHead,
};
use crate::tls::TlsTerminator;

const BLOCK_PAGE: &[u8] = b"<!doctype html>\n<html><head><title>Request blocked</title></head>\n\
<body><h1>Request blocked by the protocol monitor</h1>\n\
<p>This message deviated from the active web-protocol specification and was not delivered.\n\
The protocol run has been reset; retry the login from the start.</p></body></html>\n";

pub struct ProxyServer {
    config: ProxyConfig,
    automaton: Arc<Automaton>,
    contexts: Mutex<HashMap<String, Arc<Mutex<MonitorContext>>>>,
    log: Mutex<Box<dyn Write + Send>>,
    epoch: Instant,
    tls: Option<TlsTerminator>,
}

impl ProxyServer {
    pub fn new(config: ProxyConfig) -> Result<ProxyServer> {
        config.validate()?;
        let mut specs = Vec::new();
        for path in &config.specs {
            let xml = std::fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            specs.push(parse_spec(&xml).with_context(|| format!("parsing {}", path.display()))?);
        }
        let automaton = Arc::new(compose(&specs)?);
        let log: Box<dyn Write + Send> = match &config.log {
            Some(path) => Box::new(
                std::fs::File::create(path)
                    .with_context(|| format!("opening log {}", path.display()))?,
            ),
            None => Box::new(std::io::stderr()),
        };
        let tls = match &config.tls {
            TlsMode::Passthrough => None,
            TlsMode::Terminate {
                ca_cert,
                ca_key,
                upstream_ca,
            } => Some(TlsTerminator::new(ca_cert, ca_key, upstream_ca)?),
        };
        Ok(ProxyServer {
            config,
            automaton,
            contexts: Mutex::new(HashMap::new()),
            log: Mutex::new(log),
            epoch: Instant::now(),
            tls,
        })
    }

    pub fn bind(&self) -> Result<(TcpListener, SocketAddr)> {
        let listener = TcpListener::bind(&self.config.listen)
            .with_context(|| format!("binding {}", self.config.listen))?;
        let addr = listener.local_addr()?;
        Ok((listener, addr))
    }

    /// Accept loop; runs until the listener fails.
    pub fn run(self: &Arc<Self>, listener: TcpListener) {
        for stream in listener.incoming() {
            match stream {
                Ok(stream) => {
                    let server = Arc::clone(self);
                    std::thread::spawn(move || {
                        if let Err(e) = server.handle_connection(stream) {
                            eprintln!("wpmon: connection error: {e:#}");
                        }
                    });
                }
                Err(e) => eprintln!("wpmon: accept error: {e}"),
            }
        }
    }

    fn context_key(&self, peer: SocketAddr, head: &RequestHead) -> String {
        match self.config.keying {
            Keying::PerClientIp => format!("ip:{}", peer.ip()),
            Keying::PerProxyCredential => head
                .headers
                .iter()
                .find(|(n, _)| n.eq_ignore_ascii_case("proxy-authorization"))
                .map(|(_, v)| format!("cred:{v}"))
                .unwrap_or_else(|| "cred:anonymous".to_string()),
            Keying::Single => "single".to_string(),
        }
    }

    fn context(&self, key: &str) -> Arc<Mutex<MonitorContext>> {
        let mut contexts = self.contexts.lock().expect("contexts lock");
        contexts
            .entry(key.to_string())
            .or_insert_with(|| {
                Arc::new(Mutex::new(
                    MonitorContext::new(
                        self.automaton.clone(),
                        self.config.engine.clone(),
                        key.to_string(),
                    )
                    .expect("engine config validated at startup"),
                ))
            })
            .clone()
    }

    fn log_outcome(&self, outcome: &EventOutcome) {
        if let Ok(mut log) = self.log.lock() {
            if let Ok(line) = serde_json::to_string(&outcome.record) {
                let _ = writeln!(log, "{line}");
                let _ = log.flush();
            }
        }
    }

    /// Feed one request through its context, strictly serialized per context.
    pub fn process_request(&self, key: &str, req: HttpRequest) -> EventOutcome {
        let ctx = self.context(key);
        let now = self.epoch.elapsed();
        let outcome = {
            let mut ctx = ctx.lock().expect("context lock");
            ctx.on_request(req, now)
        };
        self.log_outcome(&outcome);
        outcome
    }

    pub fn process_response(&self, key: &str, resp: HttpResponse) -> EventOutcome {
        let ctx = self.context(key);
        let now = self.epoch.elapsed();
        let outcome = {
            let mut ctx = ctx.lock().expect("context lock");
            ctx.on_response(resp, now)
        };
        self.log_outcome(&outcome);
        outcome
    }

    fn handle_connection(&self, stream: TcpStream) -> Result<()> {
        let peer = stream.peer_addr()?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = stream;
        let Some(head) = read_request_head(&mut reader)? else {
            return Ok(());
        };
        let key = self.context_key(peer, &head);

        if head.method == "CONNECT" {
            return self.handle_connect(&head, reader, writer, &key);
        }

        let Ok(url) = parse_url(&head.target) else {
            write_simple_response(
                &mut writer,
                400,
                &[],
                "text/plain",
                b"proxy requires an absolute request target\n",
            )?;
            return Ok(());
        };
        let body = read_body(&mut reader, &head.headers, false)?;
        let request = to_engine_request(&head, url, body);
        self.exchange(request, &key, &mut writer)
    }

    /// One monitored request/response exchange: classify and rewrite the
    /// request, forward it, classify and rewrite the response, relay it.
    fn exchange(
        &self,
        request: HttpRequest,
        key: &str,
        client: &mut impl Write,
    ) -> Result<()> {
        match self.process_request(key, request).verdict {
            Verdict::Block { reason, .. } => {
                write_simple_response(
                    client,
                    403,
                    &[("X-Monitor-Block", reason.as_str())],
                    "text/html",
                    BLOCK_PAGE,
                )?;
                Ok(())
            }
            Verdict::Allow(HttpEvent::Request(outbound)) => {
                let response = match self.fetch_upstream(&outbound) {
                    Ok(r) => r,
                    Err(e) => {
                        write_simple_response(
                            client,
                            502,
                            &[],
                            "text/plain",
                            format!("upstream error: {e:#}\n").as_bytes(),
                        )?;
                        return Ok(());
                    }
                };
                match self.process_response(key, response).verdict {
                    Verdict::Block { reason, .. } => {
                        write_simple_response(
                            client,
                            403,
                            &[("X-Monitor-Block", reason.as_str())],
                            "text/html",
                            BLOCK_PAGE,
                        )?;
                        Ok(())
                    }
                    Verdict::Allow(HttpEvent::Response(inbound)) => {
                        write_client_response(client, &inbound)?;
                        Ok(())
                    }
                    Verdict::Allow(_) => unreachable!("response in, response out"),
                }
            }
            Verdict::Allow(_) => unreachable!("request in, request out"),
        }
    }

    fn fetch_upstream(&self, req: &HttpRequest) -> Result<HttpResponse> {
        if req.url.scheme() != "http" {
            return Err(anyhow!(
                "absolute-form proxying handles plain http; https goes through CONNECT"
            ));
        }
        let upstream = TcpStream::connect((req.url.host(), req.url.port()))
            .with_context(|| format!("connecting {}", req.url.endpoint()))?;
        upstream.set_read_timeout(Some(Duration::from_secs(30)))?;
        let mut upstream_writer = upstream.try_clone()?;
        write_upstream_request(&mut upstream_writer, req)?;
        let mut upstream_reader = BufReader::new(upstream);
        let head = read_response_head(&mut upstream_reader)?;
        let body = read_body(&mut upstream_reader, &head.headers, true)?;
        Ok(to_engine_response(&head, req.url.clone(), body)?)
    }

    fn handle_connect(
        &self,
        head: &RequestHead,
        client_reader: BufReader<TcpStream>,
        mut client_writer: TcpStream,
        key: &str,
    ) -> Result<()> {
        let (host, port) = head
            .target
            .rsplit_once(':')
            .and_then(|(h, p)| p.parse::<u16>().ok().map(|p| (h.to_string(), p)))
            .ok_or_else(|| anyhow!("malformed CONNECT target `{}`", head.target))?;

        match &self.tls {
            None => {
                // blind tunnel: traffic inside is not monitored
                let upstream = TcpStream::connect((host.as_str(), port))
                    .with_context(|| format!("connecting {}:{port}", host))?;
                client_writer.write_all(b"HTTP/1.1 200 Connection Established\r\n\r\n")?;
                client_writer.flush()?;
                let mut upstream_reader = upstream.try_clone()?;
                let mut client_read_half = client_reader;
                let up = std::thread::spawn(move || {
                    let mut upstream = upstream;
                    let _ = std::io::copy(&mut client_read_half, &mut upstream);
                    let _ = upstream.shutdown(std::net::Shutdown::Write);
                });
                let _ = std::io::copy(&mut upstream_reader, &mut client_writer);
                let _ = up.join();
                Ok(())
            }
            Some(tls) => tls.terminate(self, client_writer, &host, port, key),
        }
    }
}

/// Build the server and run it on its configured address until interrupted.
pub fn serve(config: ProxyConfig) -> Result<()> {
    let server = Arc::new(ProxyServer::new(config)?);
    let (listener, addr) = server.bind()?;
    println!("wpmon proxy listening on http://{addr}");
    println!(
        "monitoring {} composed spec(s); contexts keyed {:?}",
        server.automaton.spec_names().len(),
        server.config.keying
    );
    server.run(listener);
    Ok(())
}

impl ProxyServer {
    pub fn automaton(&self) -> &Arc<Automaton> {
        &self.automaton
    }
}
