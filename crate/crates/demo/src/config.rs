//! Scenario configuration, read from TOML with optional record-format
//! fixture files for users and mail.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use eip_agents::services::{parse_records, RecordError};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid scenario config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("fixture {path}: {source}")]
    Records { path: PathBuf, source: RecordError },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "defaults::datasource")]
    pub datasource: String,
    #[serde(default = "defaults::coord_server")]
    pub coord_server: String,
    #[serde(default = "defaults::mail_account")]
    pub mail_account: String,
    #[serde(default = "defaults::forward_from")]
    pub forward_from: String,
    #[serde(default = "defaults::aggregation_timeout_ms")]
    pub aggregation_timeout_ms: u64,
    #[serde(default = "defaults::resume_delay_ms")]
    pub resume_delay_ms: u64,
    #[serde(default = "defaults::poll_interval_ms")]
    pub poll_interval_ms: u64,
    #[serde(default = "defaults::sync_timeout_ms")]
    pub sync_timeout_ms: u64,
    #[serde(default = "defaults::direct_delivery")]
    pub direct_delivery: bool,
    #[serde(default)]
    pub routes: RouteToggles,
    #[serde(default)]
    pub containers: Vec<ContainerSpec>,
    #[serde(default)]
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub mail: Vec<MailSpec>,
    /// Extra users in record format: `email=... interests="a,b"`.
    pub users_file: Option<PathBuf>,
    /// Extra mail in record format: `to=... from=... subject="..." body="..."`.
    pub mail_file: Option<PathBuf>,
}

mod defaults {
    pub fn datasource() -> String {
        "dataSource".into()
    }
    pub fn coord_server() -> String {
        "zk1".into()
    }
    pub fn mail_account() -> String {
        "to.share".into()
    }
    pub fn forward_from() -> String {
        "to.share@bigcorp.com".into()
    }
    pub fn aggregation_timeout_ms() -> u64 {
        2000
    }
    pub fn resume_delay_ms() -> u64 {
        1000
    }
    pub fn poll_interval_ms() -> u64 {
        100
    }
    pub fn sync_timeout_ms() -> u64 {
        5000
    }
    pub fn direct_delivery() -> bool {
        true
    }
    pub fn yes() -> bool {
        true
    }
    pub fn behavior() -> String {
        "relevance".into()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteToggles {
    #[serde(default = "defaults::yes")]
    pub use_case: bool,
    #[serde(default)]
    pub inter_container: bool,
}

impl Default for RouteToggles {
    fn default() -> Self {
        RouteToggles {
            use_case: true,
            inter_container: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerSpec {
    /// Static id; omit (or set `dynamic = true`) to take one from the
    /// coordination service.
    pub id: Option<String>,
    #[serde(default)]
    pub dynamic: bool,
    /// Runs the mail-polling routes. Defaults to the first container.
    #[serde(default)]
    pub polls_mail: bool,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub name: String,
    #[serde(default = "defaults::behavior")]
    pub behavior: String,
    /// Performs `register` twice on startup.
    #[serde(default)]
    pub register_twice: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub email: String,
    #[serde(default)]
    pub interests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MailSpec {
    pub to: Option<String>,
    pub from: String,
    pub subject: String,
    #[serde(default)]
    pub body: String,
}

pub const BEHAVIORS: &[&str] = &["relevance", "idle"];

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads the config and any fixture files it names, relative to its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(f) = cfg.users_file.take() {
            let p = base.join(f);
            cfg.users.extend(load_users(&p)?);
        }
        if let Some(f) = cfg.mail_file.take() {
            let p = base.join(f);
            cfg.mail.extend(load_mail(&p)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let mut ids = BTreeSet::new();
        for c in &self.containers {
            if let Some(id) = &c.id {
                if c.dynamic {
                    return invalid(format!(
                        "container `{id}` cannot be both static and dynamic"
                    ));
                }
                if !ids.insert(id) {
                    return invalid(format!("duplicate container id `{id}`"));
                }
            }
            let mut names = BTreeSet::new();
            for a in &c.agents {
                if !names.insert(&a.name) {
                    return invalid(format!("duplicate agent `{}` in one container", a.name));
                }
                if !BEHAVIORS.contains(&a.behavior.as_str()) {
                    return invalid(format!(
                        "unknown behavior `{}` for agent `{}`",
                        a.behavior, a.name
                    ));
                }
            }
        }
        if self.containers.iter().filter(|c| c.polls_mail).count() > 1 {
            return invalid("only one container may poll mail".into());
        }
        let mut emails = BTreeSet::new();
        for u in &self.users {
            if !emails.insert(&u.email) {
                return invalid(format!("duplicate user `{}`", u.email));
            }
        }
        if self.aggregation_timeout_ms == 0 {
            return invalid("aggregation_timeout_ms must be positive".into());
        }
        Ok(())
    }

    /// Index of the container that polls mail.
    pub fn mail_container(&self) -> usize {
        self.containers
            .iter()
            .position(|c| c.polls_mail)
            .unwrap_or(0)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })
}

fn split_keywords(text: &str) -> Vec<String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn load_users(path: &Path) -> Result<Vec<UserSpec>, ConfigError> {
    let err = |source| ConfigError::Records {
        path: path.to_owned(),
        source,
    };
    let records = parse_records(&read(path)?).map_err(err)?;
    records
        .iter()
        .map(|r| {
            Ok(UserSpec {
                email: r.require("email").map_err(err)?.to_owned(),
                interests: split_keywords(r.get("interests").unwrap_or("")),
            })
        })
        .collect()
}

pub fn load_mail(path: &Path) -> Result<Vec<MailSpec>, ConfigError> {
    let err = |source| ConfigError::Records {
        path: path.to_owned(),
        source,
    };
    let records = parse_records(&read(path)?).map_err(err)?;
    records
        .iter()
        .map(|r| {
            Ok(MailSpec {
                to: r.get("to").map(str::to_owned),
                from: r.require("from").map_err(err)?.to_owned(),
                subject: r.get("subject").unwrap_or("").to_owned(),
                body: r.get("body").unwrap_or("").to_owned(),
            })
        })
        .collect()
}

/// The scenario used when no config file is given: two static containers,
/// three agents, four users.
pub fn default_scenario() -> ScenarioConfig {
    let cfg = ScenarioConfig::from_toml(DEFAULT_TOML).expect("built-in scenario parses");
    cfg.validate().expect("built-in scenario is valid");
    cfg
}

pub const DEFAULT_TOML: &str = r#"
aggregation_timeout_ms = 2000
resume_delay_ms = 500

[[containers]]
id = "c1"
polls_mail = true
agents = [{ name = "alice" }, { name = "bob", register_twice = true }]

[[containers]]
id = "c2"
agents = [{ name = "carol" }]

[[users]]
email = "ann@bigcorp.com"
interests = ["budget", "travel"]

[[users]]
email = "bill@bigcorp.com"
interests = ["hiring"]

[[users]]
email = "cate@bigcorp.com"
interests = ["budget"]

[[users]]
email = "dan@bigcorp.com"
interests = ["security", "travel"]

[[mail]]
from = "eve@bigcorp.com"
subject = "Q3 budget review"
body = "Please read before the planning meeting."

[[mail]]
from = "frank@bigcorp.com"
subject = "Office move"
body = "New travel policy and badge security rules attached."
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parses() {
        let cfg = default_scenario();
        assert_eq!(cfg.containers.len(), 2);
        assert_eq!(cfg.users.len(), 4);
        assert_eq!(cfg.mail_container(), 0);
        assert!(cfg.routes.use_case && !cfg.routes.inter_container);
    }

    #[test]
    fn unknown_toggle_is_rejected() {
        let err = ScenarioConfig::from_toml("[routes]\nuse_case = true\nspam_filter = true\n")
            .unwrap_err();
        assert!(err.to_string().contains("spam_filter"), "{err}");
    }

    #[test]
    fn duplicates_are_rejected() {
        let cfg = ScenarioConfig::from_toml(
            "[[containers]]\nid = \"c1\"\nagents = [{ name = \"a\" }, { name = \"a\" }]\n",
        )
        .unwrap();
        assert!(cfg.validate().is_err());
        let cfg =
            ScenarioConfig::from_toml("[[users]]\nemail = \"u@x\"\n[[users]]\nemail = \"u@x\"\n")
                .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fixture_files_are_merged() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("users.rec"),
            "email=z@x interests=\"budget, audit\"\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("mail.rec"),
            "# one mail\nfrom=q@x subject=\"Audit plan\" body=\"See \\\"attached\\\"\"\n",
        )
        .unwrap();
        let cfg_path = dir.path().join("s.toml");
        std::fs::write(
            &cfg_path,
            "users_file = \"users.rec\"\nmail_file = \"mail.rec\"\n",
        )
        .unwrap();
        let cfg = ScenarioConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.users[0].interests, ["budget", "audit"]);
        assert_eq!(cfg.mail[0].body, "See \"attached\"");
    }
}
