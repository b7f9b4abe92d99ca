//! TLS-terminating CONNECT handling: leaf certificates are minted on demand
//! from a locally trusted CA, the decrypted exchange runs through the
//! monitor, and the upstream leg is re-encrypted and verified against the
//! configured trust anchors. Intended for desk-scale testing.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::TcpStream;
use std::path::Path;
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use rcgen::{CertificateParams, DnType, KeyPair};
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer, ServerName};
use rustls::{ClientConfig, ClientConnection, RootCertStore, ServerConfig, ServerConnection};

use wpmon_core::http::{parse_url, HttpEvent, HttpResponse, HttpRequest};
use wpmon_core::engine::Verdict;

use crate::httpwire::{
    read_body, read_request_head, read_response_head, to_engine_request, to_engine_response,
    write_client_response, write_simple_response, write_upstream_request,
};
use crate::proxy::ProxyServer;

pub struct TlsTerminator {
    ca_cert: rcgen::Certificate,
    ca_key: KeyPair,
    ca_der: CertificateDer<'static>,
    minted: Mutex<HashMap<String, Arc<ServerConfig>>>,
    upstream: Arc<ClientConfig>,
}

impl TlsTerminator {
    pub fn new(ca_cert: &Path, ca_key: &Path, upstream_ca: &Path) -> Result<TlsTerminator> {
        let cert_pem = std::fs::read_to_string(ca_cert)
            .with_context(|| format!("reading CA cert {}", ca_cert.display()))?;
        let key_pem = std::fs::read_to_string(ca_key)
            .with_context(|| format!("reading CA key {}", ca_key.display()))?;
        let key = KeyPair::from_pem(&key_pem).context("parsing CA key")?;
        let params =
            CertificateParams::from_ca_cert_pem(&cert_pem).context("parsing CA certificate")?;
        // Re-signing the parsed parameters with the CA key reproduces a
        // certificate with the same subject and key, which is all issuing
        // leaf certificates requires.
        let cert = params.self_signed(&key).context("reconstructing CA")?;
        let ca_der = cert.der().clone().into_owned();

        let mut roots = RootCertStore::empty();
        let pem = std::fs::read(upstream_ca)
            .with_context(|| format!("reading upstream CA {}", upstream_ca.display()))?;
        for cert in rustls_pemfile::certs(&mut BufReader::new(&pem[..])) {
            roots
                .add(cert.context("parsing upstream CA certificate")?)
                .context("adding upstream trust anchor")?;
        }
        if roots.is_empty() {
            anyhow::bail!("no certificates in {}", upstream_ca.display());
        }
        let upstream = Arc::new(
            ClientConfig::builder()
                .with_root_certificates(roots)
                .with_no_client_auth(),
        );

        Ok(TlsTerminator {
            ca_cert: cert,
            ca_key: key,
            ca_der,
            minted: Mutex::new(HashMap::new()),
            upstream,
        })
    }

    fn server_config_for(&self, host: &str) -> Result<Arc<ServerConfig>> {
        if let Some(found) = self.minted.lock().expect("mint lock").get(host) {
            return Ok(found.clone());
        }
        let mut params = CertificateParams::new(vec![host.to_string()])
            .with_context(|| format!("certificate params for {host}"))?;
        params
            .distinguished_name
            .push(DnType::CommonName, host.to_string());
        let leaf_key = KeyPair::generate().context("leaf key generation")?;
        let leaf = params
            .signed_by(&leaf_key, &self.ca_cert, &self.ca_key)
            .context("signing leaf certificate")?;
        let chain = vec![leaf.der().clone().into_owned(), self.ca_der.clone()];
        let key = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(leaf_key.serialize_der()));
        let config = Arc::new(
            ServerConfig::builder()
                .with_no_client_auth()
                .with_single_cert(chain, key)
                .context("assembling server config")?,
        );
        self.minted
            .lock()
            .expect("mint lock")
            .insert(host.to_string(), config.clone());
        Ok(config)
    }

    /// Terminate one CONNECT tunnel: complete the client handshake with a
    /// minted certificate, run the decrypted exchanges through the monitor,
    /// and re-encrypt the upstream leg.
    pub fn terminate(
        &self,
        proxy: &ProxyServer,
        mut client: TcpStream,
        host: &str,
        port: u16,
        key: &str,
    ) -> Result<()> {
        use std::io::Write as _;
        client.write_all(b"HTTP/1.1 200 Connection Established\r\n\r\n")?;
        client.flush()?;

        let config = self.server_config_for(host)?;
        let conn = ServerConnection::new(config).context("server connection")?;
        let tls = rustls::StreamOwned::new(conn, client);
        let mut reader = BufReader::new(tls);

        loop {
            let Some(head) = read_request_head(&mut reader)? else {
                return Ok(());
            };
            let body = read_body(&mut reader, &head.headers, false)?;
            let default_port = port == 443;
            let url_text = if default_port {
                format!("https://{host}{}", head.target)
            } else {
                format!("https://{host}:{port}{}", head.target)
            };
            let url = parse_url(&url_text)
                .map_err(|e| anyhow::anyhow!("inner request target: {e}"))?;
            let request = to_engine_request(&head, url, body);

            let done = self.monitored_exchange(proxy, key, request, reader.get_mut())?;
            if done {
                return Ok(());
            }
        }
    }

    fn monitored_exchange(
        &self,
        proxy: &ProxyServer,
        key: &str,
        request: HttpRequest,
        client: &mut rustls::StreamOwned<ServerConnection, TcpStream>,
    ) -> Result<bool> {
        match proxy.process_request(key, request).verdict {
            Verdict::Block { reason, .. } => {
                write_simple_response(
                    client,
                    403,
                    &[("X-Monitor-Block", reason.as_str())],
                    "text/html",
                    b"<h1>Request blocked by the protocol monitor</h1>\n",
                )?;
                Ok(true)
            }
            Verdict::Allow(HttpEvent::Request(outbound)) => {
                let response = self.fetch_upstream_tls(&outbound)?;
                match proxy.process_response(key, response).verdict {
                    Verdict::Block { reason, .. } => {
                        write_simple_response(
                            client,
                            403,
                            &[("X-Monitor-Block", reason.as_str())],
                            "text/html",
                            b"<h1>Response blocked by the protocol monitor</h1>\n",
                        )?;
                        Ok(true)
                    }
                    Verdict::Allow(HttpEvent::Response(inbound)) => {
                        write_client_response(client, &inbound)?;
                        Ok(true) // Connection: close framing, one exchange per tunnel
                    }
                    Verdict::Allow(_) => unreachable!(),
                }
            }
            Verdict::Allow(_) => unreachable!(),
        }
    }

    fn fetch_upstream_tls(&self, req: &HttpRequest) -> Result<HttpResponse> {
        let tcp = TcpStream::connect((req.url.host(), req.url.port()))
            .with_context(|| format!("connecting {}", req.url.endpoint()))?;
        let server_name = ServerName::try_from(req.url.host().to_string())
            .context("upstream server name")?;
        let conn = ClientConnection::new(self.upstream.clone(), server_name)
            .context("upstream TLS")?;
        let tls = rustls::StreamOwned::new(conn, tcp);
        let mut reader = BufReader::new(tls);
        write_upstream_request(reader.get_mut(), req)?;
        let head = read_response_head(&mut reader)?;
        let body = read_body(&mut reader, &head.headers, true)?;
        Ok(to_engine_response(&head, req.url.clone(), body)?)
    }
}
