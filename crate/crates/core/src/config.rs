//! Flat key-value configuration with dotted section names.
//!
//! Files hold one `section.key=value` pair per line (`#` comments,
//! blank lines ignored). Command-line overrides use the same dotted
//! names, so a study manifest is a plain diff-able echo of the resolved
//! map.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::bmle::{EmOptions, InitStrategy};
use crate::error::{Error, Result};
use crate::sim::{
    HeteroPiDistribution, HeteroPiParams, Regime, SimConfig, SpatialFeatureParams,
    SpatialLabelParams,
};

#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Config::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = Config::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: ln as u64 + 1,
                    msg: format!("expected key=value, got '{line}'"),
                });
            };
            cfg.set(key.trim(), value.trim());
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => parse_f64(v).map_err(|e| Error::Config(format!("{key}: {e}"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("{key}: {e}"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| Error::Config(format!("{key}: {e}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::Config(format!("{key}: expected bool, got '{other}'"))),
        }
    }

    /// Comma-separated floats; `inf` allowed.
    pub fn get_list_f64(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|piece| parse_f64(piece.trim()))
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key}: {e}"))),
        }
    }

    /// Sorted `key=value` echo; parseable by [`Config::from_file`].
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

fn parse_f64(v: &str) -> std::result::Result<f64, String> {
    match v.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        _ => v.parse::<f64>().map_err(|e| e.to_string()),
    }
}

fn parse_vector(cfg: &Config, key: &str) -> Result<Option<DVector<f64>>> {
    Ok(cfg.get_list_f64(key)?.map(DVector::from_vec))
}

/// Builds the generator configuration from `sim.*` keys; unset keys use
/// the synthetic defaults.
pub fn sim_config_from(cfg: &Config) -> Result<SimConfig> {
    let p = cfg.get_usize("sim.p", 5)?;
    let separation = cfg.get_f64("sim.separation", 3.0)?;
    let rho = cfg.get_f64("sim.rho", 0.3)?;
    let mut sim = SimConfig::synthetic(p, separation, rho);
    sim.n_bags = cfg.get_usize("sim.n_bags", sim.n_bags)?;
    sim.bag_size = cfg.get_usize("sim.bag_size", sim.bag_size)?;
    sim.alpha = cfg.get_f64("sim.alpha", sim.alpha)?;
    sim.pi = cfg.get_f64("sim.pi", sim.pi)?;
    sim.sigma_scale = cfg.get_f64("sim.sigma_scale", sim.sigma_scale)?;
    sim.seed = cfg.get_u64("sim.seed", sim.seed)?;
    if let Some(mu1) = parse_vector(cfg, "sim.mu1")? {
        sim.mu1 = mu1;
    }
    if let Some(mu0) = parse_vector(cfg, "sim.mu0")? {
        sim.mu0 = mu0;
    }
    if sim.mu1.len() != sim.mu0.len() {
        return Err(Error::Config("sim.mu1 and sim.mu0 lengths differ".into()));
    }
    if sim.mu1.len() != p {
        // Explicit mean vectors override sim.p.
        let p = sim.mu1.len();
        let base = SimConfig::synthetic(p, separation, rho);
        sim.sigma = base.sigma;
    }
    if let Some(path) = cfg.get("sim.sigma_file") {
        sim.sigma = read_square_matrix(Path::new(path), sim.mu1.len())?;
    }
    sim.regime = regime_from(cfg)?;
    sim.validate()?;
    Ok(sim)
}

fn read_square_matrix(path: &Path, p: usize) -> Result<DMatrix<f64>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: std::result::Result<Vec<f64>, String> =
            line.split(',').map(|v| parse_f64(v.trim())).collect();
        let row = row.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: ln as u64 + 1,
            msg: e,
        })?;
        rows.push(row);
    }
    if rows.len() != p || rows.iter().any(|r| r.len() != p) {
        return Err(Error::Config(format!(
            "sigma file {} is not a {p}x{p} matrix",
            path.display()
        )));
    }
    Ok(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
}

fn hetero_from(cfg: &Config) -> Result<HeteroPiDistribution> {
    if let Some(list) = cfg.get_list_f64("sim.hetero.empirical")? {
        return Ok(HeteroPiDistribution::Empirical(list));
    }
    Ok(HeteroPiDistribution::BetaWithMean {
        concentration: cfg.get_f64("sim.hetero.concentration", 2.0)?,
    })
}

fn regime_from(cfg: &Config) -> Result<Regime> {
    match cfg.get("sim.regime").unwrap_or("base") {
        "base" => Ok(Regime::Base),
        "hetero_pi" => Ok(Regime::HeteroPi(HeteroPiParams { distribution: hetero_from(cfg)? })),
        "spatial_labels" => Ok(Regime::SpatialLabels(SpatialLabelParams {
            floor: cfg.get_f64("sim.spatial_labels.floor", 0.8)?,
            ceiling: cfg.get_f64("sim.spatial_labels.ceiling", 1.0)?,
            hetero: match cfg.get_bool("sim.spatial_labels.hetero", false)? {
                true => Some(hetero_from(cfg)?),
                false => None,
            },
        })),
        "spatial_features" => Ok(Regime::SpatialFeatures(SpatialFeatureParams {
            radius_coeff: cfg.get_f64("sim.spatial_features.radius_coeff", 0.03)?,
            range: cfg.get_f64("sim.spatial_features.range", 0.3)?,
        })),
        "truncated_labels" => Ok(Regime::TruncatedLabels),
        other => Err(Error::Config(format!("unknown sim.regime '{other}'"))),
    }
}

/// Builds EM options from `em.*` keys.
pub fn em_options_from(cfg: &Config) -> Result<EmOptions> {
    let mut opts = EmOptions {
        max_iters: cfg.get_usize("em.max_iters", 500)?,
        rel_tol: cfg.get_f64("em.rel_tol", 1e-8)?,
        pi_clip: cfg.get_f64("em.pi_clip", 1e-6)?,
        init: InitStrategy::MomentInit,
    };
    match cfg.get("em.init").unwrap_or("moment") {
        "moment" => {}
        "random" => {
            opts.init = InitStrategy::RandomRestart {
                restarts: cfg.get_usize("em.restarts", 5)?,
                seed: cfg.get_u64("em.restart_seed", 1)?,
            };
        }
        other => return Err(Error::Config(format!("unknown em.init '{other}'"))),
    }
    opts.validate()?;
    Ok(opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_manifest_roundtrip() {
        let dir = std::env::temp_dir().join("gmmil-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.cfg");
        std::fs::write(&path, "# comment\nsim.n_bags = 40\nsim.pi=0.1\n\nstudy.grid=1,2,4\n")
            .unwrap();
        let cfg = Config::from_file(&path).unwrap();
        assert_eq!(cfg.get_usize("sim.n_bags", 0).unwrap(), 40);
        assert_eq!(cfg.get_f64("sim.pi", 0.0).unwrap(), 0.1);
        assert_eq!(cfg.get_list_f64("study.grid").unwrap().unwrap(), vec![1.0, 2.0, 4.0]);

        let echoed = cfg.manifest();
        let path2 = dir.join("b.cfg");
        std::fs::write(&path2, &echoed).unwrap();
        let cfg2 = Config::from_file(&path2).unwrap();
        assert_eq!(cfg2.manifest(), echoed);
    }

    #[test]
    fn overrides_win() {
        let mut cfg = Config::new();
        cfg.set("sim.n_bags", "100");
        cfg.set("sim.n_bags", "25");
        assert_eq!(cfg.get_usize("sim.n_bags", 0).unwrap(), 25);
    }

    #[test]
    fn inf_grid_values() {
        let mut cfg = Config::new();
        cfg.set("study.grid", "0,0.1,1,inf");
        let grid = cfg.get_list_f64("study.grid").unwrap().unwrap();
        assert!(grid[3].is_infinite());
    }

    #[test]
    fn sim_builder_defaults_and_overrides() {
        let mut cfg = Config::new();
        let sim = sim_config_from(&cfg).unwrap();
        assert_eq!(sim.p(), 5);
        assert_eq!(sim.alpha, 0.36);

        cfg.set("sim.mu1", "1,0");
        cfg.set("sim.mu0", "0,0");
        cfg.set("sim.regime", "truncated_labels");
        let sim = sim_config_from(&cfg).unwrap();
        assert_eq!(sim.p(), 2);
        assert!(matches!(sim.regime, Regime::TruncatedLabels));
    }

    #[test]
    fn bad_regime_rejected() {
        let mut cfg = Config::new();
        cfg.set("sim.regime", "bogus");
        assert!(matches!(sim_config_from(&cfg), Err(Error::Config(_))));
    }
}
