//! Declarative experiment configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mixmask_core::harness::{RunConfig, TrainConfig};
use mixmask_core::mechanisms::{MaskRepr, MechanismConfig, MixRepr, PenaltyKind};
use mixmask_core::networks::{Arch, ArchitectureConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Environment variable overriding `output_dir`.
pub const OUTPUT_ENV: &str = "MIXMASK_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for independent runs; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub mechanism: MechanismConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub similarity: SimilarityConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// Grid axes. An empty axis keeps the base value from the other sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub archs: Vec<Arch>,
    pub mix_reprs: Vec<MixRepr>,
    pub mask_reprs: Vec<MaskRepr>,
    pub penalties: Vec<PenaltyKind>,
    pub learning_rates: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub alpha_s: Vec<f64>,
    pub alpha_d: Vec<f64>,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub n_models: usize,
    pub n_rollouts: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self { n_models: 20, n_rollouts: 20 }
    }
}

/// One point of the run matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub run: RunConfig,
}

impl Variant {
    /// File-name-safe form of the label.
    pub fn slug(&self) -> String {
        slug(&self.label)
    }
}

pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Parse(e.message().to_string(), e.span()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, msg: &str| Err(CliError::Field(f.to_string(), msg.to_string()));
        if self.name.trim().is_empty() {
            return field("name", "must be nonempty");
        }
        if self.seeds.is_empty() {
            return field("seeds", "must list at least one seed");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return field("seeds", "must be distinct");
        }
        for (name, grid) in [
            ("sweep.learning_rates", &self.sweep.learning_rates),
            ("sweep.epsilons", &self.sweep.epsilons),
            ("sweep.alpha_s", &self.sweep.alpha_s),
            ("sweep.alpha_d", &self.sweep.alpha_d),
            ("sweep.tau", &self.sweep.tau),
        ] {
            if grid.iter().any(|v| !v.is_finite()) {
                return field(name, "entries must be finite");
            }
        }
        if self.similarity.n_models == 0 || self.similarity.n_rollouts == 0 {
            return field("similarity", "n_models and n_rollouts must be positive");
        }
        for v in self.variants() {
            v.run.validate().map_err(|e| CliError::Variant(v.label.clone(), e))?;
        }
        Ok(())
    }

    /// Output directory: the explicit override, else the environment, else the config.
    pub fn output_root(&self, explicit: Option<&Path>) -> PathBuf {
        let root = match (explicit, std::env::var_os(OUTPUT_ENV)) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(env)) if !env.is_empty() => PathBuf::from(env),
            _ => self.output_dir.clone(),
        };
        root.join(slug(&self.name))
    }

    fn base(&self) -> RunConfig {
        RunConfig {
            architecture: self.architecture.clone(),
            mechanism: self.mechanism.clone(),
            train: self.train.clone(),
        }
    }

    /// Cartesian product of the sweep axes. Axes that do not apply to an
    /// architecture collapse, so every label is unique.
    pub fn variants(&self) -> Vec<Variant> {
        let s = &self.sweep;
        let axis = |v: &[f64]| if v.is_empty() { vec![None] } else { v.iter().copied().map(Some).collect() };
        let archs = if s.archs.is_empty() { vec![self.architecture.arch] } else { s.archs.clone() };
        let mut out: Vec<Variant> = Vec::new();
        let mut seen = BTreeSet::new();
        for &arch in &archs {
            let mixes: Vec<Option<MixRepr>> = if arch.has_mix() && !s.mix_reprs.is_empty() { s.mix_reprs.iter().copied().map(Some).collect() } else { vec![None] };
            let masks: Vec<Option<MaskRepr>> = if arch.has_mask() && !s.mask_reprs.is_empty() { s.mask_reprs.iter().copied().map(Some).collect() } else { vec![None] };
            let mech = arch.mechanism_kind().is_some();
            let penalties: Vec<Option<PenaltyKind>> = if mech && !s.penalties.is_empty() { s.penalties.iter().copied().map(Some).collect() } else { vec![None] };
            let alpha_s = if arch.has_mix() { axis(&s.alpha_s) } else { vec![None] };
            let alpha_d = if arch.has_mask() { axis(&s.alpha_d) } else { vec![None] };
            let taus = if mech { axis(&s.tau) } else { vec![None] };
            for &mix in &mixes {
                for &mask in &masks {
                    for &pen in &penalties {
                        for &a_s in &alpha_s {
                            for &a_d in &alpha_d {
                                for &tau in &taus {
                                    for &lr in &axis(&s.learning_rates) {
                                        for &eps in &axis(&s.epsilons) {
                                            let mut run = self.base();
                                            run.architecture.arch = arch;
                                            let mut tags = Vec::new();
                                            if let Some(m) = mix {
                                                run.mechanism.mix_repr = m;
                                                tags.push(format!("mix={}", enum_name(&m)));
                                            }
                                            if let Some(m) = mask {
                                                run.mechanism.mask_repr = m;
                                                tags.push(format!("mask={}", enum_name(&m)));
                                            }
                                            if let Some(p) = pen {
                                                run.mechanism.penalty = p;
                                                tags.push(format!("penalty={}", enum_name(&p)));
                                            }
                                            if let Some(a) = a_s {
                                                run.mechanism.alpha_s = a;
                                                tags.push(format!("alpha_s={a}"));
                                            }
                                            if let Some(a) = a_d {
                                                run.mechanism.alpha_d = a;
                                                tags.push(format!("alpha_d={a}"));
                                            }
                                            if let Some(t) = tau {
                                                run.mechanism.tau = t;
                                                tags.push(format!("tau={t}"));
                                            }
                                            if let Some(l) = lr {
                                                run.train.lr = l;
                                                tags.push(format!("lr={l}"));
                                            }
                                            if let Some(e) = eps {
                                                run.train.epsilon0 = e;
                                                tags.push(format!("eps={e}"));
                                            }
                                            let mut label = enum_name(&arch);
                                            if !tags.is_empty() {
                                                label = format!("{label}[{}]", tags.join(","));
                                            }
                                            if seen.insert(label.clone()) {
                                                out.push(Variant { label, run });
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// The snake_case name a unit enum serializes to.
pub fn enum_name<T: Serialize>(v: &T) -> String {
    #[derive(Serialize)]
    struct W<'a, T> {
        v: &'a T,
    }
    let s = toml::to_string(&W { v }).expect("unit enum serializes");
    s.trim().trim_start_matches("v = ").trim_matches('"').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "name = \"t\"\nseeds = [1, 2]\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.variants().len(), 1);
        assert_eq!(c.variants()[0].label, "separated");
    }

    #[test]
    fn empty_seeds_rejected() {
        let e = ExperimentConfig::from_toml("name = \"t\"\nseeds = []\n").unwrap_err();
        assert!(e.to_string().contains("seeds"), "{e}");
    }

    #[test]
    fn unknown_enum_names_its_field() {
        let e = ExperimentConfig::from_toml(&format!("{MINIMAL}[architecture]\narch = \"bogus\"\n")).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::from_toml(&format!("{MINIMAL}[train]\nlearning_rate = 1.0\n")).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn out_of_range_field_is_named() {
        let e = ExperimentConfig::from_toml(&format!("{MINIMAL}[train]\ngamma = 1.5\n")).unwrap_err();
        assert!(e.to_string().contains("train.gamma"), "{e}");
    }

    #[test]
    fn grid_collapses_inapplicable_axes() {
        let text = format!(
            "{MINIMAL}[sweep]\narchs = [\"separated\", \"mask_ac\"]\nalpha_d = [0.0, 0.1]\nlearning_rates = [1e-3, 3e-3]\n"
        );
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let labels: Vec<String> = c.variants().into_iter().map(|v| v.label).collect();
        assert_eq!(labels.len(), 2 + 4);
        assert_eq!(labels[0], "separated[lr=0.001]");
        assert!(labels.contains(&"mask_ac[alpha_d=0,lr=0.003]".to_string()));
        let v = c.variants().into_iter().find(|v| v.label == "mask_ac[alpha_d=0.1,lr=0.001]").unwrap();
        assert_eq!((v.run.mechanism.alpha_d, v.run.train.lr), (0.1, 1e-3));
    }

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("mask_ac[alpha_d=0,lr=0.003]"), "mask_ac_alpha_d_0_lr_0.003_");
    }
}
