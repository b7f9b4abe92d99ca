//! `key = value` configuration for the `serve` subcommand.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use wpmon_core::engine::EngineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keying {
    PerClientIp,
    PerProxyCredential,
    Single,
}

impl Keying {
    pub fn parse(s: &str) -> Result<Keying> {
        match s {
            "per-client-ip" => Ok(Keying::PerClientIp),
            "per-proxy-credential" => Ok(Keying::PerProxyCredential),
            "single" => Ok(Keying::Single),
            other => bail!("unknown keying mode `{other}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TlsMode {
    /// CONNECT tunnels are relayed blindly; only plain HTTP is monitored.
    Passthrough,
    /// CONNECT tunnels are terminated with certificates minted from a local
    /// CA; the decrypted exchanges are monitored and re-encrypted upstream.
    Terminate {
        ca_cert: PathBuf,
        ca_key: PathBuf,
        /// Trust anchors for upstream verification.
        upstream_ca: PathBuf,
    },
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub listen: String,
    pub specs: Vec<PathBuf>,
    pub keying: Keying,
    pub engine: EngineConfig,
    pub log: Option<PathBuf>,
    pub tls: TlsMode,
}

impl Default for ProxyConfig {
    fn default() -> ProxyConfig {
        ProxyConfig {
            listen: "127.0.0.1:8080".to_string(),
            specs: Vec::new(),
            keying: Keying::PerClientIp,
            engine: EngineConfig::default(),
            log: None,
            tls: TlsMode::Passthrough,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            bail!("at least one spec path is required");
        }
        let port = self
            .listen
            .rsplit_once(':')
            .and_then(|(_, p)| p.parse::<u32>().ok())
            .with_context(|| format!("listen address `{}` has no port", self.listen))?;
        if !(1..=65535).contains(&port) {
            bail!("listen port must be in 1..=65535");
        }
        Ok(())
    }
}

pub fn load(path: &Path) -> Result<ProxyConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    parse(&text, dir)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => bail!("{key}: expected true/false, got `{other}`"),
    }
}

fn parse(text: &str, base_dir: &Path) -> Result<ProxyConfig> {
    let mut cfg = ProxyConfig::default();
    let mut tls_mode = "passthrough".to_string();
    let mut ca_cert = None;
    let mut ca_key = None;
    let mut upstream_ca = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected `key = value`", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let rel = |v: &str| base_dir.join(v);
        match key {
            "listen" => cfg.listen = value.to_string(),
            "spec" => cfg.specs.push(rel(value)),
            "keying" => cfg.keying = Keying::parse(value)?,
            "placeholder_prefix" => cfg.engine.placeholder_prefix = value.to_string(),
            "placeholder_entropy_bytes" => {
                cfg.engine.placeholder_entropy_bytes =
                    value.parse().context("placeholder_entropy_bytes")?
            }
            "run_timeout_s" => {
                cfg.engine.run_timeout =
                    Duration::from_secs(value.parse().context("run_timeout_s")?)
            }
            "rewrite_headers" => cfg.engine.rewrite_scope.headers = parse_bool(key, value)?,
            "rewrite_url_params" => cfg.engine.rewrite_scope.url_params = parse_bool(key, value)?,
            "rewrite_form_body" => cfg.engine.rewrite_scope.form_body = parse_bool(key, value)?,
            "log" => cfg.log = Some(rel(value)),
            "tls" => tls_mode = value.to_string(),
            "tls_ca_cert" => ca_cert = Some(rel(value)),
            "tls_ca_key" => ca_key = Some(rel(value)),
            "tls_upstream_ca" => upstream_ca = Some(rel(value)),
            other => bail!("line {}: unknown config key `{other}`", lineno + 1),
        }
    }

    cfg.tls = match tls_mode.as_str() {
        "passthrough" => TlsMode::Passthrough,
        "terminate" => TlsMode::Terminate {
            ca_cert: ca_cert.context("tls = terminate requires tls_ca_cert")?,
            ca_key: ca_key.context("tls = terminate requires tls_ca_key")?,
            upstream_ca: upstream_ca.context("tls = terminate requires tls_upstream_ca")?,
        },
        other => bail!("unknown tls mode `{other}`"),
    };
    Ok(cfg)
}
