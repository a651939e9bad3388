//! Run configuration: a `key=value` file with `[section]` headers, `--set`
//! overrides, environment overrides and flags, in increasing precedence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use wran::kv::KvMap;

pub const ENV_OUT_DIR: &str = "WRAN_OUT_DIR";
pub const ENV_SEED: &str = "WRAN_SEED";

const TOP_LEVEL: &[&str] = &["seed", "out_dir", "mode"];
const SECTIONS: &[&str] = &["train", "encoder", "corpus", "kg", "eval", "theory"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    /// Sentence-level relation extraction.
    Re,
    /// Triple classification for knowledge graph completion.
    Kgc,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Re => "re",
            Mode::Kgc => "kgc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "re" => Ok(Mode::Re),
            "kgc" => Ok(Mode::Kgc),
            _ => bail!("unknown mode `{s}` (expected re or kgc)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub entries: KvMap,
    pub seed: u64,
    out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(file: Option<&Path>, sets: &[String], seed_flag: Option<u64>) -> Result<Self> {
        let mut entries = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                KvMap::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => KvMap::new(),
        };
        for s in sets {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects key=value, got `{s}`");
            };
            entries.set(k.trim(), v.trim());
        }
        for key in entries.keys() {
            let known = match key.split_once('.') {
                Some((section, _)) => SECTIONS.contains(&section),
                None => TOP_LEVEL.contains(&key),
            };
            if !known {
                bail!("unknown config key `{key}`");
            }
        }

        let env_seed = match std::env::var(ENV_SEED) {
            Ok(v) => Some(v.trim().parse::<u64>().with_context(|| format!("{ENV_SEED}=`{v}`"))?),
            Err(_) => None,
        };
        let seed = match seed_flag.or(env_seed) {
            Some(s) => s,
            None => entries
                .get::<u64>("seed")?
                .context("a seed is required: pass --seed, set WRAN_SEED or put seed=... in the config")?,
        };
        let out_dir = std::env::var_os(ENV_OUT_DIR)
            .map(PathBuf::from)
            .or_else(|| entries.get_str("out_dir").map(PathBuf::from));
        Ok(Self { entries, seed, out_dir })
    }

    pub fn section(&self, name: &str) -> KvMap {
        self.entries.section(name)
    }

    pub fn mode(&self) -> Result<Option<Mode>> {
        self.entries.get_str("mode").map(Mode::parse).transpose()
    }

    /// `flag`, else `<out dir>/<default>`.
    pub fn path(&self, flag: Option<PathBuf>, default: &str, what: &str) -> Result<PathBuf> {
        if let Some(p) = flag {
            return Ok(p);
        }
        match &self.out_dir {
            Some(d) => Ok(d.join(default)),
            None => bail!("no {what} path: pass it as a flag, set {ENV_OUT_DIR} or put out_dir=... in the config"),
        }
    }
}
