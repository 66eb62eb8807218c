use thiserror::Error;

/// Compilation and execution knobs shared by the pipeline and both
/// interpreters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    /// Keep selects as `cmov` instead of expanding them into diamonds.
    pub zicond: bool,
    /// Run CFG reconstruction (tail duplication of divergent CDG leaves).
    pub recon: bool,
    /// Honor `assume_uniform` annotations.
    pub annotations: bool,
    pub warp_size: u32,
    pub warp_count: u32,
    pub mem_words: usize,
    pub step_limit: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            zicond: false,
            recon: true,
            annotations: true,
            warp_size: 32,
            warp_count: 16,
            mem_words: 1 << 16,
            step_limit: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("invalid value '{value}' for '{key}'")]
    BadValue { key: String, value: String },
    #[error("warp size must be in 1..=32, got {0}")]
    WarpSize(u32),
    #[error("warp count must be positive")]
    WarpCount,
}

impl PipelineConfig {
    pub fn with_warps(mut self, warp_count: u32, warp_size: u32) -> Self {
        self.warp_count = warp_count;
        self.warp_size = warp_size;
        self
    }

    pub fn total_threads(&self) -> usize {
        (self.warp_count * self.warp_size) as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=32).contains(&self.warp_size) {
            return Err(ConfigError::WarpSize(self.warp_size));
        }
        if self.warp_count == 0 {
            return Err(ConfigError::WarpCount);
        }
        Ok(())
    }

    /// Set one option by name; names match the config-file keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        let flag = || match value {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(bad()),
        };
        match key {
            "zicond" => self.zicond = flag()?,
            "recon" => self.recon = flag()?,
            "annotations" => self.annotations = flag()?,
            "warp_size" | "threads" => self.warp_size = value.parse().map_err(|_| bad())?,
            "warp_count" | "warps" => self.warp_count = value.parse().map_err(|_| bad())?,
            "mem_words" => self.mem_words = value.parse().map_err(|_| bad())?,
            "step_limit" => self.step_limit = value.parse().map_err(|_| bad())?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Apply a `key = value` file on top of `self`. `#` starts a comment;
    /// quotes around values are stripped.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with('[') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let v = v.trim().trim_matches('"');
            self.set(k.trim(), v).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: i + 1, key },
                other => other,
            })?;
        }
        self.validate()
    }
}
