//! Flat keyed config files.
//!
//! The format is `key = value` lines grouped under bracketed sections,
//! with `#` comments and blank lines ignored:
//!
//! ```text
//! [model]
//! variant = d
//! tau = 3
//!
//! [growth_covariates]
//! mobility = per_area
//! tier3 = none
//! ```
//!
//! Sections are `[model]`, `[priors]`, `[sampler]`, `[growth_covariates]`,
//! and `[baseline_covariates]`. Unknown sections and unknown keys are
//! rejected with the offending line number — a typo must never be silently
//! folded into defaults. Covariate bindings keep file order; that order is
//! the column order of the design matrices.

use crate::model::{DepletionMode, ModelConfig, Variant};
use crate::sampler::SamplerConfig;
use crate::{Error, Result};

/// How a covariate column is standardized before entering a design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Standardize {
    /// Use the values exactly as they appear in the file.
    None,
    /// Center and scale by the mean and standard deviation over all cells.
    Global,
    /// Center and scale within each area across its weeks.
    PerArea,
}

impl Standardize {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Standardize::None),
            "global" => Ok(Standardize::Global),
            "per_area" => Ok(Standardize::PerArea),
            _ => Err(Error::Config(format!(
                "unknown standardization `{s}` (expected `none`, `global`, or `per_area`)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Standardize::None => "none",
            Standardize::Global => "global",
            Standardize::PerArea => "per_area",
        }
    }
}

/// One covariate bound into a design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateBinding {
    pub name: String,
    pub standardize: Standardize,
}

/// Everything a config file can set. Command-line flags override these.
#[derive(Debug, Clone)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    /// Covariates of the growth design `X`, in column order.
    pub growth: Vec<CovariateBinding>,
    /// Covariates of the baseline design `V`, in column order.
    pub baseline: Vec<CovariateBinding>,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            growth: Vec::new(),
            baseline: Vec::new(),
        }
    }
}

#[derive(Clone, Copy)]
enum Section {
    Model,
    Priors,
    Sampler,
    GrowthCovariates,
    BaselineCovariates,
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, row: usize) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "config line {row}: `{key}` has an unparsable value `{value}`"
        ))
    })
}

fn set_model(model: &mut ModelConfig, key: &str, value: &str, row: usize) -> Result<()> {
    match key {
        "variant" => model.variant = Variant::from_letter(value)?,
        "tau" => model.tau = parse_value(key, value, row)?,
        "depletion" => model.depletion = DepletionMode::parse(value)?,
        "immunity_window" => {
            model.immunity_window = if value == "none" {
                None
            } else {
                Some(parse_value(key, value, row)?)
            }
        }
        "sum_to_zero_factor" => model.sum_to_zero_factor = parse_value(key, value, row)?,
        _ => {
            return Err(Error::Config(format!(
                "config line {row}: unknown key `{key}` in [model]"
            )))
        }
    }
    Ok(())
}

fn set_prior(
    priors: &mut crate::model::PriorConfig,
    key: &str,
    value: &str,
    row: usize,
) -> Result<()> {
    match key {
        "beta0_mean" => priors.beta0_mean = parse_value(key, value, row)?,
        "beta0_scale" => priors.beta0_scale = parse_value(key, value, row)?,
        "beta_scale" => priors.beta_scale = parse_value(key, value, row)?,
        "eta_scale" => priors.eta_scale = parse_value(key, value, row)?,
        "sigma_growth_scale" => priors.sigma_growth_scale = parse_value(key, value, row)?,
        "sigma_baseline_scale" => priors.sigma_baseline_scale = parse_value(key, value, row)?,
        _ => {
            return Err(Error::Config(format!(
                "config line {row}: unknown key `{key}` in [priors]"
            )))
        }
    }
    Ok(())
}

fn set_sampler(sampler: &mut SamplerConfig, key: &str, value: &str, row: usize) -> Result<()> {
    match key {
        "chains" => sampler.n_chains = parse_value(key, value, row)?,
        "iterations" => sampler.iterations = parse_value(key, value, row)?,
        "warmup" => sampler.warmup = parse_value(key, value, row)?,
        "thin" => sampler.thin = parse_value(key, value, row)?,
        "max_treedepth" => sampler.max_treedepth = parse_value(key, value, row)?,
        "target_accept" => sampler.target_accept = parse_value(key, value, row)?,
        "step_size" => {
            sampler.step_size = if value == "auto" {
                None
            } else {
                Some(parse_value(key, value, row)?)
            }
        }
        "init_jitter" => sampler.init_jitter = parse_value(key, value, row)?,
        "seed" => sampler.seed = parse_value(key, value, row)?,
        _ => {
            return Err(Error::Config(format!(
                "config line {row}: unknown key `{key}` in [sampler]"
            )))
        }
    }
    Ok(())
}

fn push_binding(
    bindings: &mut Vec<CovariateBinding>,
    key: &str,
    value: &str,
    row: usize,
    section: &str,
) -> Result<()> {
    if bindings.iter().any(|b| b.name == key) {
        return Err(Error::Config(format!(
            "config line {row}: covariate `{key}` bound twice in [{section}]"
        )));
    }
    bindings.push(CovariateBinding {
        name: key.to_string(),
        standardize: Standardize::parse(value)
            .map_err(|e| Error::Config(format!("config line {row}: {e}")))?,
    });
    Ok(())
}

/// Parse a config file's text. Errors carry 1-based line numbers.
pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    let mut section: Option<Section> = None;
    for (i, raw) in text.lines().enumerate() {
        let row = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let Some(name) = inner.strip_suffix(']') else {
                return Err(Error::Config(format!(
                    "config line {row}: unterminated section header `{line}`"
                )));
            };
            section = Some(match name.trim() {
                "model" => Section::Model,
                "priors" => Section::Priors,
                "sampler" => Section::Sampler,
                "growth_covariates" => Section::GrowthCovariates,
                "baseline_covariates" => Section::BaselineCovariates,
                other => {
                    return Err(Error::Config(format!(
                        "config line {row}: unknown section [{other}]"
                    )))
                }
            });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "config line {row}: expected `key = value`, got `{line}`"
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        let Some(section) = section else {
            return Err(Error::Config(format!(
                "config line {row}: `{key}` appears before any [section] header"
            )));
        };
        match section {
            Section::Model => set_model(&mut cfg.model, key, value, row)?,
            Section::Priors => set_prior(&mut cfg.model.priors, key, value, row)?,
            Section::Sampler => set_sampler(&mut cfg.sampler, key, value, row)?,
            Section::GrowthCovariates => {
                push_binding(&mut cfg.growth, key, value, row, "growth_covariates")?
            }
            Section::BaselineCovariates => {
                push_binding(&mut cfg.baseline, key, value, row, "baseline_covariates")?
            }
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_round_trips_every_section() {
        let text = "\
# study settings
[model]
variant = b
tau = 2
depletion = literal
immunity_window = 10
sum_to_zero_factor = 0.01

[priors]
beta0_mean = -1.0
beta0_scale = 2.0
beta_scale = 0.5
eta_scale = 0.7
sigma_growth_scale = 0.2
sigma_baseline_scale = 0.3

[sampler]
chains = 3
iterations = 800
warmup = 300
thin = 2
max_treedepth = 12
target_accept = 0.9
step_size = 0.05
init_jitter = 1.0
seed = 99

[growth_covariates]
mobility = per_area
tier3 = none

[baseline_covariates]
density = global
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.model.variant, Variant::GrowthEffects);
        assert_eq!(cfg.model.tau, 2);
        assert_eq!(cfg.model.depletion, DepletionMode::Literal);
        assert_eq!(cfg.model.immunity_window, Some(10));
        assert_eq!(cfg.model.sum_to_zero_factor, 0.01);
        assert_eq!(cfg.model.priors.beta0_mean, -1.0);
        assert_eq!(cfg.model.priors.sigma_baseline_scale, 0.3);
        assert_eq!(cfg.sampler.n_chains, 3);
        assert_eq!(cfg.sampler.iterations, 800);
        assert_eq!(cfg.sampler.thin, 2);
        assert_eq!(cfg.sampler.step_size, Some(0.05));
        assert_eq!(cfg.sampler.seed, 99);
        assert_eq!(
            cfg.growth,
            vec![
                CovariateBinding {
                    name: "mobility".into(),
                    standardize: Standardize::PerArea
                },
                CovariateBinding {
                    name: "tier3".into(),
                    standardize: Standardize::None
                },
            ]
        );
        assert_eq!(cfg.baseline.len(), 1);
        assert_eq!(cfg.baseline[0].standardize, Standardize::Global);
    }

    #[test]
    fn auto_and_none_sentinels_parse() {
        let cfg = parse_config("[sampler]\nstep_size = auto\n[model]\nimmunity_window = none\n")
            .unwrap();
        assert_eq!(cfg.sampler.step_size, None);
        assert_eq!(cfg.model.immunity_window, None);
    }

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config("# nothing here\n\n").unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert!(cfg.growth.is_empty() && cfg.baseline.is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_config("[model]\nvariant = d\nbogus_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(err.to_string().contains("bogus_key"), "{err}");

        let err = parse_config("\n[made_up_section]\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        let err = parse_config("[model]\ntau - 3\n").unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");

        let err = parse_config("tau = 3\n").unwrap_err();
        assert!(err.to_string().contains("before any [section]"), "{err}");

        let err = parse_config("[model]\ntau = many\n").unwrap_err();
        assert!(err.to_string().contains("unparsable"), "{err}");

        let err = parse_config("[growth_covariates]\nx = none\nx = global\n").unwrap_err();
        assert!(err.to_string().contains("bound twice"), "{err}");

        let err = parse_config("[growth_covariates]\nx = sideways\n").unwrap_err();
        assert!(err.to_string().contains("sideways"), "{err}");
    }
}
