//! JSON instance files, report persistence and digests.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cake::{Interval, PiecewiseDensity, Profile};
use crate::error::{CakeError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub name: String,
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub cake: Interval,
    pub agents: Vec<AgentSpec>,
}

impl InstanceFile {
    /// Agents are named `a1`, `a2`, ...
    pub fn from_profile(profile: &Profile) -> Self {
        InstanceFile {
            cake: profile.cake(),
            agents: profile
                .densities()
                .iter()
                .enumerate()
                .map(|(i, d)| AgentSpec {
                    name: format!("a{}", i + 1),
                    breakpoints: d.breakpoints().to_vec(),
                    values: d.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            CakeError::domain(format!("instance parse error at line {}, column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CakeError::domain(format!("cannot read {}: {e}", path.display())))?;
        InstanceFile::parse(&text)
    }

    pub fn to_profile(&self) -> Result<Profile> {
        let densities = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                PiecewiseDensity::new(a.breakpoints.clone(), a.values.clone())
                    .map_err(|e| CakeError::domain(format!("agent #{} `{}`: {e}", i + 1, a.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Profile::new(densities, self.cake)
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("instance files always serialize");
        hex(&Sha256::digest(bytes))
    }
}

pub fn load_profile(path: &Path) -> Result<(InstanceFile, Profile)> {
    let file = InstanceFile::load(path)?;
    let profile = file.to_profile()?;
    Ok((file, profile))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports always serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const LB3: &str = r#"{
  "cake": {"lo": 0.0, "hi": 3.0},
  "agents": [
    {"name": "a1", "breakpoints": [0, 1, 2, 3], "values": [3, 2, 0]},
    {"name": "a2", "breakpoints": [0, 1, 2, 3], "values": [0, 1, 2]},
    {"name": "a3", "breakpoints": [0, 1, 2, 3], "values": [0, 1, 2]}
  ]
}"#;

    #[test]
    fn parses_and_round_trips() {
        let file = InstanceFile::parse(LB3).unwrap();
        let profile = file.to_profile().unwrap();
        assert_eq!(profile.n_agents(), 3);
        assert_eq!(InstanceFile::from_profile(&profile), file);
        assert_eq!(file.digest(), InstanceFile::from_profile(&profile).digest());
        assert_eq!(file.digest().len(), 64);
    }

    #[test]
    fn malformed_values_are_rejected() {
        let bad = LB3.replace("[3, 2, 0]", "[3, 2]");
        let err = InstanceFile::parse(&bad).unwrap().to_profile().unwrap_err();
        assert!(err.to_string().contains("a1"), "{err}");

        let err = InstanceFile::parse("{\n  \"cake\": {\"lo\": 1, \"hi\": 0},\n  \"agents\": []\n}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
    }
}
