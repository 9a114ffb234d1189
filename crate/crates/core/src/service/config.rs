use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub stage1_checkpoint: Option<PathBuf>,
    pub stage2_checkpoint: Option<PathBuf>,
    /// Saved gallery index. Built from the corpus photos when absent.
    pub index_path: Option<PathBuf>,
    /// Corpus root whose `photos/` directory backs thumbnails.
    pub corpus_root: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub k: usize,
    pub session_ttl_secs: u64,
    pub canvas_size: u32,
    pub stroke_width: f64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            stage1_checkpoint: None,
            stage2_checkpoint: None,
            index_path: None,
            corpus_root: None,
            host: "127.0.0.1".into(),
            port: 8080,
            k: 10,
            session_ttl_secs: 30 * 60,
            canvas_size: 299,
            stroke_width: 3.0,
        }
    }
}

/// Environment variables that override file settings.
pub const ENV_OVERRIDES: [(&str, &str); 10] = [
    ("SKETCHLESS_STAGE1", "stage1_checkpoint"),
    ("SKETCHLESS_STAGE2", "stage2_checkpoint"),
    ("SKETCHLESS_INDEX", "index_path"),
    ("SKETCHLESS_CORPUS", "corpus_root"),
    ("SKETCHLESS_HOST", "host"),
    ("SKETCHLESS_PORT", "port"),
    ("SKETCHLESS_K", "k"),
    ("SKETCHLESS_SESSION_TTL", "session_ttl_secs"),
    ("SKETCHLESS_CANVAS_SIZE", "canvas_size"),
    ("SKETCHLESS_STROKE_WIDTH", "stroke_width"),
];

fn parse<T: std::str::FromStr>(var: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("{var}={value:?} is not a valid value")))
}

impl ServeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `SKETCHLESS_*` overrides from `vars`.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (key, value) in vars {
            let (key, value) = (key.as_ref(), value.as_ref());
            let Some((_, field)) = ENV_OVERRIDES.iter().find(|(k, _)| *k == key) else {
                continue;
            };
            match *field {
                "stage1_checkpoint" => self.stage1_checkpoint = Some(value.into()),
                "stage2_checkpoint" => self.stage2_checkpoint = Some(value.into()),
                "index_path" => self.index_path = Some(value.into()),
                "corpus_root" => self.corpus_root = Some(value.into()),
                "host" => self.host = value.into(),
                "port" => self.port = parse(key, value)?,
                "k" => self.k = parse(key, value)?,
                "session_ttl_secs" => self.session_ttl_secs = parse(key, value)?,
                "canvas_size" => self.canvas_size = parse(key, value)?,
                "stroke_width" => self.stroke_width = parse(key, value)?,
                _ => unreachable!("every override names a field"),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if self.session_ttl_secs == 0 {
            return Err(invalid("session_ttl_secs must be positive"));
        }
        if !(8..=super::MAX_CANVAS).contains(&self.canvas_size) {
            return Err(invalid(format!("canvas_size must be within 8..={}", super::MAX_CANVAS)));
        }
        if !(self.stroke_width > 0.0) {
            return Err(invalid("stroke_width must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ServeConfig::default();
        assert_eq!((c.k, c.canvas_size, c.session_ttl_secs), (10, 299, 1800));
        c.validate().unwrap();
    }

    #[test]
    fn file_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("serve.toml");
        std::fs::write(&path, "port = 9000\nk = 5\nindex_path = \"g.idx\"\n").unwrap();
        let mut c = ServeConfig::load(&path).unwrap();
        assert_eq!((c.port, c.k), (9000, 5));
        c.apply_env([("SKETCHLESS_PORT", "9100"), ("HOME", "/x"), ("SKETCHLESS_INDEX", "h.idx")]).unwrap();
        assert_eq!(c.port, 9100);
        assert_eq!(c.index_path.as_deref(), Some(Path::new("h.idx")));
        assert!(c.apply_env([("SKETCHLESS_K", "many")]).is_err());
        assert!(c.apply_env([("SKETCHLESS_K", "0")]).is_err());
        std::fs::write(&path, "prot = 1\n").unwrap();
        assert!(ServeConfig::load(&path).is_err());
    }
}
