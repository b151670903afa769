//! `key = value` configuration files. Blank lines and `#` comments are
//! ignored; later keys override earlier ones.

use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeConfig {
    /// Address the server listens on, or the device connects to.
    pub listen: Option<String>,
    pub devices: Option<usize>,
    pub device_id: Option<u32>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub timeout_ms: Option<u64>,
    pub rounds: Option<u32>,
    pub local_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<String>,
    pub max_frame: Option<usize>,
    pub data: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Option<T>, ConfigError> {
    raw.parse().map(Some).map_err(|_| ConfigError::Syntax {
        line,
        msg: format!("invalid value {raw:?} for {key}"),
    })
}

impl NodeConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, val)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("expected key = value, got {content:?}"),
                });
            };
            let (key, val) = (key.trim(), val.trim());
            match key {
                "listen" | "server" => cfg.listen = Some(val.to_string()),
                "devices" => cfg.devices = value(line, key, val)?,
                "device_id" => cfg.device_id = value(line, key, val)?,
                "preset" => cfg.preset = Some(val.to_string()),
                "seed" => cfg.seed = value(line, key, val)?,
                "timeout_ms" => cfg.timeout_ms = value(line, key, val)?,
                "rounds" => cfg.rounds = value(line, key, val)?,
                "local_epochs" => cfg.local_epochs = value(line, key, val)?,
                "learning_rate" => cfg.learning_rate = value(line, key, val)?,
                "batch_size" => cfg.batch_size = value(line, key, val)?,
                "optimizer" => cfg.optimizer = Some(val.to_string()),
                "max_frame" => cfg.max_frame = value(line, key, val)?,
                "data" => cfg.data = Some(val.to_string()),
                _ => {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = NodeConfig::parse(
            "# server\nlisten = 127.0.0.1:7000\ndevices=10 # ten\n\npreset = small\nlearning_rate = 0.05\n",
        )
        .unwrap();
        assert_eq!(cfg.listen.as_deref(), Some("127.0.0.1:7000"));
        assert_eq!(cfg.devices, Some(10));
        assert_eq!(cfg.preset.as_deref(), Some("small"));
        assert_eq!(cfg.learning_rate, Some(0.05));
        assert_eq!(cfg.rounds, None);
    }

    #[test]
    fn reports_the_offending_line() {
        let err = NodeConfig::parse("devices = 3\nrounds = many\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }), "{err}");
        assert!(NodeConfig::parse("colour = blue").is_err());
        assert!(NodeConfig::parse("just text").is_err());
    }
}
