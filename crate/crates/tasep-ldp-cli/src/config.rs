use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use tasep_ldp::lattice::{integrate_occupation, HeightProfile, OccupationField};
use tasep_ldp::sim::bernoulli_bits;
use tasep_ldp::speed::SimpleSpeed;

use crate::CliError;

/// Resolved global settings plus the raw subcommand document.
pub struct Context {
    body: Option<serde_json::Value>,
    pub config_hash: String,
    pub seed: u64,
    replicas: Option<usize>,
    pub out_dir: PathBuf,
    /// Directory of the config file; relative paths inside the config resolve against it.
    pub base_dir: PathBuf,
}

impl Context {
    pub fn load(
        path: Option<&Path>,
        out: Option<PathBuf>,
        seed: Option<u64>,
        replicas: Option<usize>,
    ) -> Result<Self, CliError> {
        let (raw, base_dir) = match path {
            Some(p) => {
                let raw = std::fs::read(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                (Some(raw), p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (None, PathBuf::from(".")),
        };
        let config_hash = hex(&Sha256::digest(raw.as_deref().unwrap_or(b"")));
        let mut body = match &raw {
            Some(bytes) => {
                let v: serde_json::Value =
                    serde_json::from_slice(bytes).map_err(|e| CliError::Config(format!("not valid JSON: {e}")))?;
                if !v.is_object() {
                    return Err(CliError::Config("the configuration must be a JSON object".into()));
                }
                Some(v)
            }
            None => None,
        };
        let mut take = |key: &str| body.as_mut().and_then(|b| b.as_object_mut().unwrap().remove(key));
        let cfg_seed = take("seed").map(|v| parse_global::<u64>("seed", v)).transpose()?;
        let cfg_reps = take("replicas").map(|v| parse_global::<usize>("replicas", v)).transpose()?;
        let cfg_out = take("out_dir").map(|v| parse_global::<PathBuf>("out_dir", v)).transpose()?;
        let replicas = replicas.or(cfg_reps);
        if replicas == Some(0) {
            return Err(CliError::Config("replicas must be positive".into()));
        }
        Ok(Self {
            body,
            config_hash,
            seed: seed.or(cfg_seed).unwrap_or(0),
            replicas,
            out_dir: out.or(cfg_out).unwrap_or_else(|| PathBuf::from("out")),
            base_dir,
        })
    }

    /// The subcommand document, or `None` when no config was given.
    pub fn parse<T: DeserializeOwned>(&self) -> Result<Option<T>, CliError> {
        self.body.clone().map(|b| serde_json::from_value(b).map_err(|e| CliError::Config(e.to_string()))).transpose()
    }

    pub fn require<T: DeserializeOwned>(&self) -> Result<T, CliError> {
        self.parse()?.ok_or_else(|| CliError::Config("this subcommand needs --config".into()))
    }

    pub fn replicas_or(&self, default: usize) -> usize {
        self.replicas.unwrap_or(default)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

fn parse_global<T: DeserializeOwned>(key: &str, v: serde_json::Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("{key}: {e}")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Either a homogeneous speed or a full simple speed function. A bare number is a constant speed.
#[derive(Debug, Clone, Deserialize)]
#[serde(from = "SpeedDoc")]
pub enum SpeedSpec {
    Constant(f64),
    Simple(SimpleSpeed),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpeedDoc {
    Lambda(f64),
    Tagged(TaggedSpeed),
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum TaggedSpeed {
    Constant(f64),
    Simple(SimpleSpeed),
}

impl From<SpeedDoc> for SpeedSpec {
    fn from(d: SpeedDoc) -> Self {
        match d {
            SpeedDoc::Lambda(l) | SpeedDoc::Tagged(TaggedSpeed::Constant(l)) => SpeedSpec::Constant(l),
            SpeedDoc::Tagged(TaggedSpeed::Simple(s)) => SpeedSpec::Simple(s),
        }
    }
}

impl SpeedSpec {
    pub fn build(&self, horizon: f64) -> Result<SimpleSpeed, CliError> {
        let s = match self {
            SpeedSpec::Constant(l) => SimpleSpeed::constant(*l, horizon),
            SpeedSpec::Simple(s) => s.clone(),
        };
        s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if s.horizon() < horizon - 1e-12 {
            return Err(CliError::Config(format!("speed horizon {} is shorter than T = {horizon}", s.horizon())));
        }
        Ok(s)
    }
}

/// Initial data, both as a macroscopic profile and as a lattice sample.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// `max(xi, 0)`: empty on the left, full on the right.
    Wedge,
    /// `min(xi, 0)`: full on the left, empty on the right.
    Step,
    Flat,
    /// I.i.d. occupations of density `rho`, macroscopically `rho xi`.
    Bernoulli {
        rho: f64,
    },
}

impl InitialSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            InitialSpec::Bernoulli { rho } if !(0.0..=1.0).contains(rho) => {
                Err(CliError::Config(format!("density {rho} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }

    pub fn macro_value(&self, xi: f64) -> f64 {
        match self {
            InitialSpec::Wedge => xi.max(0.0),
            InitialSpec::Step => xi.min(0.0),
            InitialSpec::Flat => 0.0,
            InitialSpec::Bernoulli { rho } => rho * xi,
        }
    }

    pub fn lattice(&self, lo: i64, hi: i64, seed: u64) -> Result<HeightProfile, CliError> {
        let bad = |e: tasep_ldp::lattice::LatticeError| CliError::Internal(e.to_string());
        match self {
            InitialSpec::Wedge => HeightProfile::from_fn(lo, hi, |x| x.max(0)).map_err(bad),
            InitialSpec::Step => HeightProfile::from_fn(lo, hi, |x| x.min(0)).map_err(bad),
            InitialSpec::Flat => HeightProfile::from_fn(lo, hi, |_| 0).map_err(bad),
            InitialSpec::Bernoulli { rho } => {
                let bits = bernoulli_bits((hi - lo) as usize, *rho, seed);
                let h = integrate_occupation(&OccupationField { x_min: lo, bits }, 0);
                let at_origin = h.get(0).unwrap_or(0);
                Ok(h.shifted(-at_origin))
            }
        }
    }
}
