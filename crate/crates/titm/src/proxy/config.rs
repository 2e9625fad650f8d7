//! Proxy configuration: a flat `key = value` text file.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("i/o failure: {0}")]
    Io(String),
    #[error("line {0}: expected `key = value`")]
    BadLine(usize),
    #[error("line {0}: unknown key `{1}`")]
    UnknownKey(usize, String),
    #[error("line {0}: bad value for `{1}`")]
    BadValue(usize, String),
}

/// Everything the proxy needs to boot. Paths are where its artifacts and
/// state live; the tick counts bound how long idle sessions and pending
/// tunnels survive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProxyConfig {
    pub listen_address: String,
    pub db_path: PathBuf,
    pub manifest_path: PathBuf,
    pub pal_image: PathBuf,
    pub flicker_image: PathBuf,
    pub proxy_image: PathBuf,
    pub session_idle_ticks: u64,
    pub tunnel_pending_ticks: u64,
}

impl Default for ProxyConfig {
    fn default() -> ProxyConfig {
        ProxyConfig {
            listen_address: "proxy.local:7154".into(),
            db_path: "proxy.db".into(),
            manifest_path: "boot-manifest.txt".into(),
            pal_image: "pal.img".into(),
            flicker_image: "flicker.img".into(),
            proxy_image: "pm.img".into(),
            session_idle_ticks: 64,
            tunnel_pending_ticks: 8,
        }
    }
}

impl ProxyConfig {
    pub fn parse(text: &str) -> Result<ProxyConfig, ConfigError> {
        let mut cfg = ProxyConfig::default();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::BadLine(lineno))?;
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(ConfigError::BadValue(lineno, key.to_string()));
            }
            let ticks = |k: &str| {
                value
                    .parse::<u64>()
                    .map_err(|_| ConfigError::BadValue(lineno, k.to_string()))
            };
            match key {
                "listen_address" => cfg.listen_address = value.to_string(),
                "db_path" => cfg.db_path = value.into(),
                "manifest_path" => cfg.manifest_path = value.into(),
                "pal_image" => cfg.pal_image = value.into(),
                "flicker_image" => cfg.flicker_image = value.into(),
                "proxy_image" => cfg.proxy_image = value.into(),
                "session_idle_ticks" => cfg.session_idle_ticks = ticks(key)?,
                "tunnel_pending_ticks" => cfg.tunnel_pending_ticks = ticks(key)?,
                other => return Err(ConfigError::UnknownKey(lineno, other.to_string())),
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ProxyConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        ProxyConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "listen_address = {}\n\
             db_path = {}\n\
             manifest_path = {}\n\
             pal_image = {}\n\
             flicker_image = {}\n\
             proxy_image = {}\n\
             session_idle_ticks = {}\n\
             tunnel_pending_ticks = {}\n",
            self.listen_address,
            self.db_path.display(),
            self.manifest_path.display(),
            self.pal_image.display(),
            self.flicker_image.display(),
            self.proxy_image.display(),
            self.session_idle_ticks,
            self.tunnel_pending_ticks,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config_with_comments() {
        let text = "\
# proxy settings
listen_address = proxy.sim:9000

db_path = /var/lib/titm/proxy.db
manifest_path = /etc/titm/manifest.txt
pal_image = /opt/titm/pal.img
flicker_image = /opt/titm/flicker.img
proxy_image = /opt/titm/pm.img
session_idle_ticks = 32
tunnel_pending_ticks = 4
";
        let cfg = ProxyConfig::parse(text).unwrap();
        assert_eq!(cfg.listen_address, "proxy.sim:9000");
        assert_eq!(cfg.db_path, PathBuf::from("/var/lib/titm/proxy.db"));
        assert_eq!(cfg.session_idle_ticks, 32);
        assert_eq!(cfg.tunnel_pending_ticks, 4);
    }

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = ProxyConfig::parse("listen_address = a:1\n").unwrap();
        assert_eq!(cfg.session_idle_ticks, ProxyConfig::default().session_idle_ticks);
        assert_eq!(cfg.pal_image, ProxyConfig::default().pal_image);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert_eq!(
            ProxyConfig::parse("mystery = 1\n"),
            Err(ConfigError::UnknownKey(1, "mystery".into()))
        );
        assert_eq!(ProxyConfig::parse("no equals sign\n"), Err(ConfigError::BadLine(1)));
        assert_eq!(
            ProxyConfig::parse("session_idle_ticks = soon\n"),
            Err(ConfigError::BadValue(1, "session_idle_ticks".into()))
        );
    }

    #[test]
    fn text_round_trips() {
        let cfg = ProxyConfig {
            listen_address: "x:1".into(),
            db_path: "a.db".into(),
            manifest_path: "m.txt".into(),
            pal_image: "p.img".into(),
            flicker_image: "f.img".into(),
            proxy_image: "pm.img".into(),
            session_idle_ticks: 7,
            tunnel_pending_ticks: 3,
        };
        assert_eq!(ProxyConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
