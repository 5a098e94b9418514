//! Provenance header shared by every text artifact.
//!
//! Text outputs start with one comment line:
//! `# nlgcl-<version> config_hash=<hex> seed=<n>`. Readers skip lines starting with `#`.

use std::fmt;

use crate::CODE_VERSION;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl ArtifactMeta {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            version: CODE_VERSION.to_string(),
        }
    }

    /// Parses a header line produced by the `Display` impl.
    pub fn parse_header(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# ")?;
        let mut parts = rest.split_whitespace();
        let version = parts.next()?.to_string();
        let mut config_hash = None;
        let mut seed = None;
        for p in parts {
            if let Some(v) = p.strip_prefix("config_hash=") {
                config_hash = Some(v.to_string());
            } else if let Some(v) = p.strip_prefix("seed=") {
                seed = v.parse().ok();
            }
        }
        Some(Self {
            config_hash: config_hash?,
            seed: seed?,
            version,
        })
    }
}

impl fmt::Display for ArtifactMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "# {} config_hash={} seed={}",
            self.version, self.config_hash, self.seed
        )
    }
}
