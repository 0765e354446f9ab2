//! Flat `key = value` run configuration with `#` comments.

use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use squash_core::ModelParams;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(CliError::Config(format!("format must be csv or json, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: ModelParams,
    pub dim: usize,
    pub dt: f64,
    pub t_final: f64,
    pub n_traj: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: Format,
    /// Couplings of the occupation-versus-gain table.
    pub chi_list: Vec<f64>,
    pub g_min: f64,
    pub g_max: f64,
    pub g_points: usize,
    /// Record points per trajectory after t = 0.
    pub checkpoints: usize,
    /// Random parameter sets in the bound suite of `validate`.
    pub sweep: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            params: ModelParams {
                gamma: 1e-2,
                kappa: 1e2,
                chi: 2.5,
                g: 0.025,
                phi: -FRAC_PI_2,
                eta: 0.8,
                nbar: 0.5,
            },
            dim: 30,
            dt: 0.1,
            t_final: 50.0,
            n_traj: 2000,
            seed: 42,
            out_dir: PathBuf::from("."),
            format: Format::Csv,
            chi_list: vec![0.5, 1.5, 2.5],
            g_min: 0.0,
            g_max: 0.1,
            g_points: 101,
            checkpoints: 20,
            sweep: 100_000,
        }
    }
}

pub const KEYS: [&str; 20] = [
    "gamma", "kappa", "chi", "g", "phi", "eta", "nbar", "dim", "dt", "t_final", "n_traj", "seed", "out_dir", "format",
    "chi_list", "g_min", "g_max", "g_points", "checkpoints", "sweep",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(CliError::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|e| CliError::Config(format!("line {}: {}", lineno + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        // an unreadable config is a configuration error, not an output failure
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.params;
        match key {
            "gamma" => p.gamma = parse(key, value)?,
            "kappa" => p.kappa = parse(key, value)?,
            "chi" => p.chi = parse(key, value)?,
            "g" => p.g = parse(key, value)?,
            "phi" => p.phi = parse(key, value)?,
            "eta" => p.eta = parse(key, value)?,
            "nbar" => p.nbar = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "dt" => self.dt = parse(key, value)?,
            "t_final" => self.t_final = parse(key, value)?,
            "n_traj" => self.n_traj = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "format" => self.format = value.parse()?,
            "chi_list" => {
                self.chi_list = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "g_min" => self.g_min = parse(key, value)?,
            "g_max" => self.g_max = parse(key, value)?,
            "g_points" => self.g_points = parse(key, value)?,
            "checkpoints" => self.checkpoints = parse(key, value)?,
            "sweep" => self.sweep = parse(key, value)?,
            _ => {
                return Err(CliError::Config(format!(
                    "unknown key {key:?}; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.params
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.dim < 2 {
            return Err(CliError::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if !(self.dt > 0.0) || !(self.t_final >= 0.0) {
            return Err(CliError::Config(format!(
                "need dt > 0 and t_final >= 0, got dt = {}, t_final = {}",
                self.dt, self.t_final
            )));
        }
        if self.n_traj == 0 {
            return Err(CliError::Config("n_traj must be >= 1".into()));
        }
        if self.g_points == 0 || self.g_max < self.g_min {
            return Err(CliError::Config("gain grid needs g_points >= 1 and g_max >= g_min".into()));
        }
        if self.chi_list.is_empty() {
            return Err(CliError::Config("chi_list is empty".into()));
        }
        Ok(())
    }

    /// Gains g_min, ..., g_max on an even grid.
    pub fn gains(&self) -> Vec<f64> {
        if self.g_points == 1 {
            return vec![self.g_min];
        }
        let step = (self.g_max - self.g_min) / (self.g_points - 1) as f64;
        (0..self.g_points).map(|i| self.g_min + step * i as f64).collect()
    }
}
