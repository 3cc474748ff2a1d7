//! Flat key-value config files: one `key = value` per line, `#` starts a
//! comment. Flags override file values; file values override defaults.

use std::collections::BTreeMap;
use std::path::Path;

use latent_transport::benchsuite::{DEFAULT_DIM, DEFAULT_N_SOURCE, DEFAULT_N_TARGET};
use latent_transport::error::{Error, Result};
use latent_transport::trainer::TrainConfig;

/// Training config plus scenario shape; the file layer under every
/// subcommand.
#[derive(Debug, Clone)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub dim: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub out_dir: Option<String>,
    pub jobs: Option<usize>,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dim: DEFAULT_DIM,
            n_s: DEFAULT_N_SOURCE,
            n_t: DEFAULT_N_TARGET,
            out_dir: None,
            jobs: None,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value `{value}` for key `{key}`"),
    })
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidArgument(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut cfg = FileConfig::default();
        let mut seen = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{raw}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), line_no).is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
            match key {
                "alpha" => cfg.train.alpha = parse_as(key, value, line_no)?,
                "beta" => cfg.train.beta = parse_as(key, value, line_no)?,
                "lambda" => cfg.train.lambda = parse_as(key, value, line_no)?,
                "lr" => cfg.train.lr = parse_as(key, value, line_no)?,
                "batch" => cfg.train.batch = parse_as(key, value, line_no)?,
                "epochs" => cfg.train.epochs = parse_as(key, value, line_no)?,
                "seed" => cfg.train.seed = parse_as(key, value, line_no)?,
                "adam_beta1" => cfg.train.adam_beta1 = parse_as(key, value, line_no)?,
                "adam_beta2" => cfg.train.adam_beta2 = parse_as(key, value, line_no)?,
                "adam_eps" => cfg.train.adam_eps = parse_as(key, value, line_no)?,
                "sinkhorn_eps" => cfg.train.sinkhorn_eps = parse_as(key, value, line_no)?,
                "sinkhorn_k" => cfg.train.sinkhorn_k = parse_as(key, value, line_no)?,
                "posterior_var" => cfg.train.posterior_var = parse_as(key, value, line_no)?,
                "prior_var" => cfg.train.prior_var = parse_as(key, value, line_no)?,
                "dim" => cfg.dim = parse_as(key, value, line_no)?,
                "n_s" => cfg.n_s = parse_as(key, value, line_no)?,
                "n_t" => cfg.n_t = parse_as(key, value, line_no)?,
                "out_dir" => cfg.out_dir = Some(value.to_string()),
                "jobs" => cfg.jobs = Some(parse_as(key, value, line_no)?),
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unknown config key `{other}`"),
                    })
                }
            }
        }
        Ok(cfg)
    }
}
