//! Flat `key = value` configuration files with `#` comments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use mobiflow_core::battery::{neumann_projected, CosineSeries};
use mobiflow_core::evi::smooth_bump;
use mobiflow_core::io::load_field;
use mobiflow_core::{DomainGrid, Mobility, RegularizedMobility, ScalarField, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(line: Option<usize>, message: impl Into<String>) -> ConfigError {
    ConfigError { line, message: message.into() }
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, (String, usize)>,
    /// Raw bytes, hashed into the run manifest.
    pub text: String,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| err(Some(line), format!("expected 'key = value', got '{body}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(err(Some(line), format!("invalid key '{k}'")));
            }
            if let Some((_, first)) = entries.get(k) {
                return Err(err(Some(line), format!("duplicate key '{k}' (first set on line {first})")));
            }
            entries.insert(k.to_string(), (v.to_string(), line));
        }
        Ok(Config { entries, text: text.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err(None, format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Rejects keys outside `allowed`.
    pub fn restrict(&self, allowed: &[&str], command: &str) -> Result<(), ConfigError> {
        let allowed: BTreeSet<&str> = allowed.iter().copied().collect();
        let mut bad: Vec<(usize, &str)> = self
            .entries
            .iter()
            .filter(|(k, _)| !allowed.contains(k.as_str()))
            .map(|(k, (_, l))| (*l, k.as_str()))
            .collect();
        bad.sort();
        match bad.first() {
            Some(&(line, key)) => Err(err(Some(line), format!("unknown key '{key}' for {command}"))),
            None => Ok(()),
        }
    }

    pub fn line(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|(_, l)| *l)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|e| err(Some(*line), format!("key '{key}': {e}"))),
        }
    }

    pub fn string(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        match self.entries.get(key) {
            None => Ok(default.to_vec()),
            Some((v, line)) => v
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| err(Some(*line), format!("key '{key}': {e}"))))
                .collect(),
        }
    }

    /// Wraps a core error with the line of the key that caused it.
    pub fn at(&self, key: &str, e: impl fmt::Display) -> ConfigError {
        err(self.line(key), format!("key '{key}': {e}"))
    }
}

pub const DOMAIN_KEYS: &[&str] = &["domain", "resolution", "seed", "output"];
pub const MOBILITY_KEYS: &[&str] = &["mobility", "alpha", "beta", "c", "m_max", "epsilon"];

/// Domain grid from `domain` and `resolution`.
pub fn grid(cfg: &Config, default_shape: &str, default_n: usize) -> Result<Arc<DomainGrid>, ConfigError> {
    let shape: Shape = cfg.string("domain", default_shape).parse().map_err(|e| cfg.at("domain", e))?;
    let n: usize = cfg.get("resolution", default_n)?;
    DomainGrid::build(shape, n).map(Arc::new).map_err(|e| cfg.at("resolution", e))
}

/// Regularized mobility from `mobility`, its parameters and `epsilon`.
pub fn mobility(cfg: &Config, default: &str, default_eps: f64) -> Result<RegularizedMobility, ConfigError> {
    let name = cfg.string("mobility", default);
    let (name, mut kv) = params(&name).map_err(|e| cfg.at("mobility", e))?;
    // Separate keys override parameters written inline.
    for (key, param) in [("alpha", "alpha"), ("beta", "beta"), ("c", "c"), ("m_max", "M")] {
        if let Some(v) = cfg.raw(key) {
            kv.insert(param.to_string(), v.to_string());
        }
    }
    let parts: Vec<String> = kv.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let spec = if parts.is_empty() { name.clone() } else { format!("{name}:{}", parts.join(",")) };
    let key = if cfg.raw("alpha").is_some() { "alpha" } else { "mobility" };
    let base: Mobility = spec.parse().map_err(|e| cfg.at(key, e))?;
    let eps: f64 = cfg.get("epsilon", default_eps)?;
    RegularizedMobility::new(base, eps).map_err(|e| cfg.at("epsilon", e))
}

fn params(spec: &str) -> Result<(String, BTreeMap<String, String>), String> {
    let (name, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut kv = BTreeMap::new();
    for part in rest.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got '{part}'"))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok((name.trim().to_string(), kv))
}

/// Builds a field from a generator spec:
/// `bump:x=..,y=..,width=..,floor=..,mass=..`, `uniform:mass=..`,
/// `perturbed:mean=..,amp=..`, `zero`, or `file:path`.
pub fn density(
    cfg: &Config,
    key: &str,
    default: &str,
    grid: &Arc<DomainGrid>,
    seed: u64,
) -> Result<ScalarField, ConfigError> {
    let spec = cfg.string(key, default);
    let fail = |m: String| cfg.at(key, m);
    if let Some(path) = spec.strip_prefix("file:") {
        let f = load_field(Path::new(path.trim()), grid.shape()).map_err(|e| fail(e.to_string()))?;
        if !f.grid().same_layout(grid) {
            return Err(fail(format!("{path} is on a different grid")));
        }
        return Ok(ScalarField::new(grid.clone(), f.values.clone()).map_err(|e| fail(e.to_string()))?);
    }
    let (name, mut kv) = params(&spec).map_err(fail)?;
    let mut num = |k: &str, d: f64| -> Result<f64, ConfigError> {
        match kv.remove(k) {
            None => Ok(d),
            Some(v) => v.parse().map_err(|_| fail(format!("bad number '{v}' for '{k}'"))),
        }
    };
    let field = match name.as_str() {
        "bump" => {
            let (x, y, w, floor, mass) = (num("x", 0.5)?, num("y", 0.5)?, num("width", 0.1)?, num("floor", 0.05)?, num("mass", 1.0)?);
            smooth_bump(grid, [x, y], w, floor).map_err(|e| fail(e.to_string()))?.scaled(mass)
        }
        "uniform" => {
            let mass = num("mass", 1.0)?;
            ScalarField::constant(grid, mass / grid.area())
        }
        "perturbed" => {
            let (mean, amp) = (num("mean", 0.5)?, num("amp", 0.05)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let series = CosineSeries::random(&mut rng, 4, 0.5);
            let w = neumann_projected(grid, &series).map_err(|e| fail(e.to_string()))?.zero_mean();
            let top = w.max_abs().max(1e-300);
            w.map(|v| mean + amp * v / top)
        }
        "zero" => ScalarField::zeros(grid),
        other => return Err(fail(format!("unknown generator '{other}'"))),
    };
    if let Some(k) = kv.keys().next() {
        return Err(fail(format!("unknown parameter '{k}' for '{name}'")));
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_defaults() {
        let c = Config::parse("# header\n\nalpha = 0.5 # trailing\n  tau=1e-3\n").unwrap();
        assert_eq!(c.get("alpha", 0.0).unwrap(), 0.5);
        assert_eq!(c.get("tau", 0.0).unwrap(), 1e-3);
        assert_eq!(c.get("steps", 7usize).unwrap(), 7);
        assert_eq!(c.line("tau"), Some(4));
    }

    #[test]
    fn duplicates_and_garbage_name_their_line() {
        let e = Config::parse("a = 1\nb = 2\na = 3\n").unwrap_err();
        assert_eq!(e.line, Some(3));
        assert!(e.message.contains("duplicate key 'a'"));
        let e = Config::parse("a = 1\njust words\n").unwrap_err();
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let c = Config::parse("alpha = 0.5\ncolour = red\n").unwrap();
        let e = c.restrict(&["alpha"], "distance").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.to_string().contains("unknown key 'colour'"));
    }

    #[test]
    fn bad_values_name_their_line() {
        let c = Config::parse("\nsteps = many\n").unwrap();
        let e = c.get("steps", 1usize).unwrap_err();
        assert_eq!(e.line, Some(2));
    }

    #[test]
    fn power_alpha_out_of_range_cites_the_constraint() {
        let c = Config::parse("mobility = power\nalpha = 1.2\n").unwrap();
        let e = mobility(&c, "power", 0.1).unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.message.contains("0<α<1"), "{e}");
        let c = Config::parse("alpha = 1.2\n").unwrap();
        let e = mobility(&c, "power:alpha=0.5", 0.1).unwrap_err();
        assert!(e.line == Some(1) && e.message.contains("0<α<1"), "{e}");
        let c = Config::parse("mobility = bounded_power\nalpha = 1\nm_max = 2\n").unwrap();
        assert_eq!(mobility(&c, "power", 0.0).unwrap().saturation(), 2.0);
        let ok = Config::parse("mobility = power\nalpha = 0.3\nepsilon = 0.01\n").unwrap();
        let m = mobility(&ok, "power", 0.1).unwrap();
        assert_eq!(m.base, Mobility::Power { alpha: 0.3 });
        assert_eq!(m.eps, 0.01);
    }

    #[test]
    fn generators_build_fields() {
        let c = Config::parse("u0 = bump:x=0.4,width=0.1,mass=2\nv0 = perturbed:mean=0.5,amp=0.1\nw = bump:zz=1\n").unwrap();
        let g = grid(&c, "square", 16).unwrap();
        let u = density(&c, "u0", "uniform", &g, 1).unwrap();
        assert!((u.mass() - 2.0).abs() < 1e-12);
        let v = density(&c, "v0", "zero", &g, 1).unwrap();
        assert!((v.mean() - 0.5).abs() < 1e-12 && (v.max() - 0.5).abs() <= 0.1 + 1e-12);
        assert!(density(&c, "w", "zero", &g, 1).is_err());
        assert_eq!(density(&c, "missing", "zero", &g, 1).unwrap().max_abs(), 0.0);
    }
}
