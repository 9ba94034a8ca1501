//! Benchmark configuration: scenario grid, method list, and learner settings.
//!
//! The effective configuration (defaults included) is what gets hashed and
//! echoed into the run manifest, so two runs agree numerically exactly when
//! their canonical configurations agree.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::learners::{BartConfig, GamConfig, LearnerSpec, Method, NetConfig, RsfConfig};
use crate::simgen::{Censoring, Heterogeneity, Mask, ScenarioConfig};
use crate::survcore::DEFAULT_GRID_POINTS;

/// One scenario row of the benchmark grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Directory-safe label; derived from the fields when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub n: usize,
    pub hs: Heterogeneity,
    pub psi: f64,
    pub ph: bool,
    pub censoring: Censoring,
    #[serde(default = "default_mask")]
    pub mask: Mask,
    pub reps: usize,
}

fn default_mask() -> Mask {
    Mask::None
}

impl ScenarioSpec {
    /// Stable label used in paths and tables.
    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let cr = match self.censoring {
            Censoring::Independent { rate } => format!("cr{rate}"),
            Censoring::CovariateDependent => "crdep".to_string(),
        };
        let ph = if self.ph { "ph" } else { "nph" };
        let mask = match self.mask {
            Mask::None => String::new(),
            Mask::X3 => "_mask_x3".to_string(),
            Mask::X3X5 => "_mask_x3x5".to_string(),
            Mask::X3X5X6 => "_mask_x3x5x6".to_string(),
        };
        format!("{}_{}_{}_psi{}_n{}{}", self.hs, ph, cr, self.psi, self.n, mask)
    }

    /// Seed-stream key for the scenario family. Independent of `reps` so a
    /// longer rerun reuses every shard from a shorter one.
    pub fn family_key(&self) -> u64 {
        let cr = match self.censoring {
            Censoring::Independent { rate } => format!("independent:{}", rate.to_bits()),
            Censoring::CovariateDependent => "covariate_dependent".to_string(),
        };
        let text = format!(
            "{}|{}|{}|{}|{:?}|{}",
            self.hs,
            self.ph,
            self.psi.to_bits(),
            cr,
            self.mask,
            self.n
        );
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn to_scenario_config(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            n: self.n,
            hs: self.hs,
            psi: self.psi,
            ph: self.ph,
            censoring: self.censoring,
            mask: self.mask,
            reps: self.reps,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.to_scenario_config(0).validate()?;
        if let Some(name) = &self.name {
            let ok = !name.is_empty()
                && name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
            if !ok {
                return Err(Error::config(format!(
                    "scenario name '{name}' must be nonempty and filesystem-safe"
                )));
            }
        }
        Ok(())
    }
}

/// Full benchmark configuration, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub master_seed: u64,
    /// Propensity subclasses used by the subclass metrics.
    #[serde(default = "default_k")]
    pub k_subclasses: usize,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    pub scenarios: Vec<ScenarioSpec>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub bart: BartConfig,
    #[serde(default)]
    pub rsf: RsfConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub gam: GamConfig,
}

fn default_k() -> usize {
    50
}

fn default_grid() -> usize {
    DEFAULT_GRID_POINTS
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl BenchmarkConfig {
    pub fn from_toml_str(text: &str) -> Result<BenchmarkConfig> {
        let config: BenchmarkConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &std::path::Path) -> Result<BenchmarkConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::config("benchmark needs at least one scenario"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("benchmark needs at least one method"));
        }
        if self.k_subclasses == 0 {
            return Err(Error::config("k_subclasses must be positive"));
        }
        if self.grid_points < 2 {
            return Err(Error::config("grid_points must be at least 2"));
        }
        let mut labels = std::collections::HashSet::new();
        for s in &self.scenarios {
            s.validate()?;
            if s.n < self.k_subclasses {
                return Err(Error::config(format!(
                    "scenario {}: n={} is below k_subclasses={}",
                    s.label(),
                    s.n,
                    self.k_subclasses
                )));
            }
            if !labels.insert(s.label()) {
                return Err(Error::config(format!("duplicate scenario label '{}'", s.label())));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.methods {
            if !seen.insert(*m) {
                return Err(Error::config(format!("method {m} listed twice")));
            }
        }
        Ok(())
    }

    /// Named desk-scale presets so acceptance-size runs need no config file.
    pub fn preset(name: &str, master_seed: u64) -> Result<BenchmarkConfig> {
        let scenario = |n: usize, reps: usize| ScenarioSpec {
            name: None,
            n,
            hs: Heterogeneity::H1,
            psi: 1.0,
            ph: true,
            censoring: Censoring::Independent { rate: 0.007 },
            mask: Mask::None,
            reps,
        };
        let mut config = BenchmarkConfig {
            master_seed,
            k_subclasses: default_k(),
            grid_points: default_grid(),
            scenarios: Vec::new(),
            methods: Vec::new(),
            bart: BartConfig::default(),
            rsf: RsfConfig::default(),
            net: NetConfig::default(),
            gam: GamConfig::default(),
        };
        match name {
            "desk" => {
                config.scenarios = vec![scenario(500, 20)];
                config.methods = Method::ALL
                    .into_iter()
                    .filter(|m| !matches!(m, Method::AftBartMix | Method::AftBartMixPs))
                    .collect();
            }
            "paper-lite" => {
                config.scenarios = vec![scenario(1000, 50)];
                config.methods = Method::ALL.to_vec();
            }
            other => {
                return Err(Error::config(format!(
                    "unknown preset '{other}' (expected desk or paper-lite)"
                )));
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Canonical (defaults-echoed) TOML text of this configuration.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config encode: {e}")))
    }

    /// Hex SHA-256 of the canonical configuration text.
    pub fn hash(&self) -> Result<String> {
        let text = self.canonical_toml()?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Learner spec for `method` under this configuration's settings.
    pub fn learner_spec(&self, method: Method, seed: u64) -> LearnerSpec {
        let mut spec = LearnerSpec::new(method, seed);
        spec.bart = self.bart.clone();
        spec.rsf = self.rsf.clone();
        spec.net = self.net.clone();
        spec.gam = self.gam.clone();
        spec
    }
}

/// Stable per-method seed stream id; append-only.
pub fn method_stream_id(method: Method) -> u64 {
    match method {
        Method::AftLognormal => 1,
        Method::AftWeibull => 2,
        Method::CoxPh => 3,
        Method::GamCox => 4,
        Method::Rsf => 5,
        Method::AftBartGauss => 6,
        Method::AftBartMix => 7,
        Method::AftBartMixPs => 8,
        Method::NeuralCox => 9,
        Method::Failing => 10,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_toml() -> &'static str {
        r#"
master_seed = 42
methods = ["cox_ph", "aft_weibull"]

[[scenarios]]
n = 200
hs = "h3"
psi = 1.0
ph = true
censoring = { independent = { rate = 0.007 } }
reps = 5
"#
    }

    #[test]
    fn toml_round_trips_with_defaults_echoed() {
        let config = BenchmarkConfig::from_toml_str(sample_toml()).unwrap();
        assert_eq!(config.k_subclasses, 50);
        assert_eq!(config.grid_points, 500);
        assert_eq!(config.methods, vec![Method::CoxPh, Method::AftWeibull]);
        let echoed = config.canonical_toml().unwrap();
        let back = BenchmarkConfig::from_toml_str(&echoed).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = BenchmarkConfig::from_toml_str(sample_toml()).unwrap();
        let mut tweaked = base.clone();
        tweaked.master_seed = 43;
        assert_ne!(base.hash().unwrap(), tweaked.hash().unwrap());
        let mut tweaked = base.clone();
        tweaked.scenarios[0].psi = 2.5;
        assert_ne!(base.hash().unwrap(), tweaked.hash().unwrap());
        let mut tweaked = base.clone();
        tweaked.bart.draws = 99;
        assert_ne!(base.hash().unwrap(), tweaked.hash().unwrap());
    }

    #[test]
    fn family_key_ignores_reps_but_tracks_science_fields() {
        let base = BenchmarkConfig::from_toml_str(sample_toml()).unwrap();
        let mut longer = base.scenarios[0].clone();
        longer.reps = 500;
        assert_eq!(base.scenarios[0].family_key(), longer.family_key());
        let mut moved = base.scenarios[0].clone();
        moved.psi = 5.0;
        assert_ne!(base.scenarios[0].family_key(), moved.family_key());
    }

    #[test]
    fn bad_configs_are_rejected_with_context() {
        let err = BenchmarkConfig::from_toml_str("master_seed = \"nope\"").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("config parse"), "unexpected message: {msg}");

        // A root key placed after [[scenarios]] binds to the scenario table;
        // it must fail loudly instead of being silently dropped.
        let misplaced = "\
master_seed = 1

[[scenarios]]
n = 200
hs = \"h1\"
psi = 1.0
ph = true
censoring = { independent = { rate = 0.007 } }
reps = 2
methods = [\"cox_ph\"]
";
        let err = BenchmarkConfig::from_toml_str(misplaced).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("methods"), "unexpected message: {msg}");

        let mut config = BenchmarkConfig::from_toml_str(sample_toml()).unwrap();
        config.methods.clear();
        assert!(config.validate().is_err());
        let mut config = BenchmarkConfig::from_toml_str(sample_toml()).unwrap();
        config.scenarios[0].n = 10;
        assert!(config.validate().is_err(), "n below k_subclasses must fail");
    }

    #[test]
    fn presets_build_and_differ_in_method_sets() {
        let desk = BenchmarkConfig::preset("desk", 1).unwrap();
        assert!(!desk.methods.contains(&Method::AftBartMix));
        assert!(!desk.methods.contains(&Method::AftBartMixPs));
        assert_eq!(desk.scenarios[0].n, 500);
        assert_eq!(desk.scenarios[0].reps, 20);
        let lite = BenchmarkConfig::preset("paper-lite", 1).unwrap();
        assert!(lite.methods.contains(&Method::AftBartMixPs));
        assert_eq!(lite.scenarios[0].n, 1000);
        assert!(BenchmarkConfig::preset("huge", 1).is_err());
    }

    #[test]
    fn labels_are_filesystem_safe_and_unique_per_setting() {
        let spec = ScenarioSpec {
            name: None,
            n: 1000,
            hs: Heterogeneity::H4,
            psi: 2.5,
            ph: false,
            censoring: Censoring::CovariateDependent,
            mask: Mask::X3X5,
            reps: 3,
        };
        let label = spec.label();
        assert_eq!(label, "h4_nph_crdep_psi2.5_n1000_mask_x3x5");
        assert!(label.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)));
    }
}
