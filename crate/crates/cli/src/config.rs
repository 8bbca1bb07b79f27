//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an empty
//! file is a valid config; unknown or repeated keys are errors. Lengths are in
//! pixels (or grid cells for the 1-D checks), durations in steps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Int,
    Real,
    Bool,
    /// Real or `auto`.
    AutoReal,
    /// Integer or `auto`.
    AutoInt,
    Choice(&'static [&'static str]),
    Path,
    RealList,
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str) -> Key {
    Key {
        name,
        kind,
        default,
    }
}

const KEYS: &[Key] = &[
    key("seed", Kind::Int, "0"),
    // geometry
    key("grid", Kind::Int, "64"),
    key("angles", Kind::Int, "30"),
    key("detectors", Kind::AutoInt, "auto"),
    key("detector_spacing", Kind::Real, "1"),
    // data
    key("pairs", Kind::Int, "4"),
    key("shift_bound", Kind::AutoReal, "auto"),
    key("per_circle", Kind::Bool, "true"),
    key("noise", Kind::Real, "0.05"),
    key("circles_min", Kind::Int, "2"),
    key("circles_max", Kind::Int, "6"),
    key("radius_min", Kind::AutoReal, "auto"),
    key("radius_max", Kind::AutoReal, "auto"),
    key("intensity_min", Kind::Real, "0.5"),
    key("intensity_max", Kind::Real, "1"),
    key("margin", Kind::AutoReal, "auto"),
    // network
    key("stages", Kind::Int, "5"),
    key("primal", Kind::Int, "5"),
    key("dual", Kind::Int, "5"),
    key("filters", Kind::Int, "16"),
    // loss
    key("loss", Kind::Choice(&["l2", "ot"]), "l2"),
    key("cost", Kind::Choice(&["quartic", "squared"]), "quartic"),
    key("cost_sigma", Kind::AutoReal, "auto"),
    key("epsilon", Kind::Real, "0.001"),
    key("sinkhorn_iterations", Kind::Int, "10"),
    key("background", Kind::Real, "0.000001"),
    key("mass_weight", Kind::Real, "1"),
    // optimization
    key("steps", Kind::Int, "2000"),
    key("schedule_steps", Kind::AutoInt, "auto"),
    key("lr", Kind::Real, "0.001"),
    key("lr_floor", Kind::Real, "0"),
    key("clip", Kind::Real, "1"),
    key("checkpoint_every", Kind::Int, "0"),
    key("validate_every", Kind::Int, "0"),
    key("validation_size", Kind::Int, "16"),
    // evaluation
    key("checkpoint", Kind::Path, ""),
    key("checkpoint_l2", Kind::Path, ""),
    key("checkpoint_ot", Kind::Path, ""),
    // smearing check
    key("prop1_cells", Kind::Int, "256"),
    key("prop1_bound", Kind::Int, "8"),
    key("prop1_samples", Kind::Int, "10000"),
    key("prop1_width", Kind::Real, "8"),
    // concentration check
    key("prop2_half_width", Kind::Real, "4"),
    key("prop2_step", Kind::Real, "0.1"),
    key("prop2_distributions", Kind::Int, "10"),
    key("prop2_sigma", Kind::Real, "1"),
    key("prop2_epsilon", Kind::Real, "0.25"),
    key("prop2_iterations", Kind::Int, "50"),
    key("prop2_background", Kind::Real, "0.000000001"),
    // metric check
    key("metric_exponents", Kind::RealList, "1,2,4"),
    key("metric_triples", Kind::Int, "1000000"),
];

fn find(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn check_value(kind: Kind, v: &str) -> Result<(), String> {
    let int = |v: &str| v.parse::<u64>().map(|_| ()).map_err(|e| e.to_string());
    let real = |v: &str| match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(()),
        Ok(_) => Err("not finite".to_string()),
        Err(e) => Err(e.to_string()),
    };
    match kind {
        Kind::Int => int(v),
        Kind::Real => real(v),
        Kind::Bool => match v {
            "true" | "false" => Ok(()),
            _ => Err("expected true or false".into()),
        },
        Kind::AutoReal if v == "auto" => Ok(()),
        Kind::AutoReal => real(v),
        Kind::AutoInt if v == "auto" => Ok(()),
        Kind::AutoInt => int(v),
        Kind::Choice(opts) if opts.contains(&v) => Ok(()),
        Kind::Choice(opts) => Err(format!("expected one of {}", opts.join(", "))),
        Kind::Path => Ok(()),
        Kind::RealList => v.split(',').try_for_each(|p| real(p.trim())),
    }
}

/// Parsed configuration. All values are validated at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(CliError::Config(format!("line {}: key {k} given twice", n + 1)));
            }
            seen.push(k);
            cfg.set(k, v)
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Set one key, validating its value.
    pub fn set(&mut self, k: &str, v: &str) -> Result<(), String> {
        let key = find(k).ok_or_else(|| format!("unknown key {k}"))?;
        check_value(key.kind, v).map_err(|e| format!("{k} = {v:?}: {e}"))?;
        self.values.insert(key.name, v.to_string());
        Ok(())
    }

    fn raw(&self, k: &str) -> &str {
        self.values
            .get(k)
            .unwrap_or_else(|| panic!("config key {k} is not declared"))
    }

    pub fn int(&self, k: &str) -> u64 {
        self.raw(k).parse().expect("validated at load")
    }

    pub fn usize(&self, k: &str) -> usize {
        self.int(k) as usize
    }

    pub fn real(&self, k: &str) -> f64 {
        self.raw(k).parse().expect("validated at load")
    }

    pub fn flag(&self, k: &str) -> bool {
        self.raw(k) == "true"
    }

    pub fn text(&self, k: &str) -> &str {
        self.raw(k)
    }

    pub fn auto_real(&self, k: &str) -> Option<f64> {
        match self.raw(k) {
            "auto" => None,
            v => Some(v.parse().expect("validated at load")),
        }
    }

    pub fn auto_int(&self, k: &str) -> Option<u64> {
        match self.raw(k) {
            "auto" => None,
            v => Some(v.parse().expect("validated at load")),
        }
    }

    pub fn path(&self, k: &str) -> Option<PathBuf> {
        match self.raw(k) {
            "" => None,
            v => Some(PathBuf::from(v)),
        }
    }

    pub fn reals(&self, k: &str) -> Vec<f64> {
        self.raw(k)
            .split(',')
            .map(|p| p.trim().parse().expect("validated at load"))
            .collect()
    }

    /// Every key in declaration order, one `key = value` line each.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{} = {}", k.name, self.values[k.name]).expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.usize("grid"), 64);
        assert_eq!(c.auto_int("detectors"), None);
        assert_eq!(c.reals("metric_exponents"), vec![1.0, 2.0, 4.0]);
        assert_eq!(c.path("checkpoint"), None);
    }

    #[test]
    fn parses_comments_and_whitespace() {
        let c = Config::parse("# header\n grid = 32  # px\n\nloss=ot\nshift_bound = 2.5\n").unwrap();
        assert_eq!(c.usize("grid"), 32);
        assert_eq!(c.text("loss"), "ot");
        assert_eq!(c.auto_real("shift_bound"), Some(2.5));
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "gird = 3",
            "grid = -1",
            "grid = 3\ngrid = 4",
            "loss = l1",
            "noise = nan",
            "per_circle = yes",
            "grid 3",
            "metric_exponents = 1,x",
        ] {
            let err = Config::parse(bad).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{bad}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut c = Config::default();
        c.set("seed", "17").unwrap();
        c.set("checkpoint", "runs/a.otpd").unwrap();
        let back = Config::parse(&c.echo()).unwrap();
        assert_eq!(back, c);
    }
}
