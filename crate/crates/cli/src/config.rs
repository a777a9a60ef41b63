//! Config files and ablation grids.
//!
//! A config is a flat TOML table whose keys are the fields of
//! [`ExperimentConfig`]; missing keys take the built-in defaults and the
//! resolved record is echoed into every manifest. A `.json` path is read as
//! a manifest and its embedded config is reused as is.

use std::collections::BTreeSet;
use std::path::Path;

use psttl::experiment::{ExperimentConfig, Variant};
use psttl::ttl::TtlConfig;
use serde::Deserialize;

use crate::Failure;

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::new("input", format!("{}: {e}", path.display())))
}

fn bad(path: &Path, e: impl std::fmt::Display) -> Failure {
    let msg = e.to_string();
    Failure::new("config", format!("{}: {}", path.display(), msg.trim().replace('\n', " ")))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, toml::de::Error> {
    toml::from_str(text)
}

/// Resolves defaults, then the file, then `seed`, and validates the result.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            #[derive(Deserialize)]
            struct Embedded {
                config: ExperimentConfig,
            }
            serde_json::from_str::<Embedded>(&read(p)?).map_err(|e| bad(p, e))?.config
        }
        Some(p) => parse_config(&read(p)?).map_err(|e| bad(p, e))?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(Failure::from)?;
    Ok(cfg)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    variant: Vec<toml::Table>,
}

/// Keys a grid variant may override: every TTL field except the seed,
/// which the ablation derives per seed.
pub fn overridable_keys() -> BTreeSet<String> {
    ttl_table(&TtlConfig::default()).keys().cloned().collect()
}

fn ttl_table(t: &TtlConfig) -> toml::Table {
    let mut table = toml::Table::try_from(TtlConfig { seed: 0, ..t.clone() }).expect("TTL config is TOML-representable");
    table.remove("seed");
    table
}

/// Parses a grid file into variants applied on top of `base`'s TTL config.
///
/// ```toml
/// [[variant]]
/// name = "baseline"
/// baseline = true
///
/// [[variant]]
/// name = "static"
/// prototype_mode = "static"
/// ```
pub fn parse_grid(text: &str, base: &ExperimentConfig) -> Result<Vec<Variant>, String> {
    let grid: GridFile = toml::from_str(text).map_err(|e| e.to_string())?;
    if grid.variant.is_empty() {
        return Err("grid has no variants".into());
    }
    let allowed = overridable_keys();
    let defaults = base.ttl_config();
    let mut names = BTreeSet::new();
    let mut out = Vec::with_capacity(grid.variant.len());
    for mut v in grid.variant {
        let name = match v.remove("name") {
            Some(toml::Value::String(s)) if !s.is_empty() => s,
            _ => return Err("every variant needs a non-empty string `name`".into()),
        };
        if !names.insert(name.clone()) {
            return Err(format!("duplicate variant name {name}"));
        }
        let baseline = match v.remove("baseline") {
            None => false,
            Some(toml::Value::Boolean(b)) => b,
            Some(_) => return Err(format!("variant {name}: `baseline` must be a boolean")),
        };
        if let Some(k) = v.keys().find(|k| !allowed.contains(*k)) {
            return Err(format!("variant {name}: `{k}` is not a test-time setting"));
        }
        if baseline {
            if !v.is_empty() {
                return Err(format!("variant {name}: a baseline variant takes no overrides"));
            }
            out.push(Variant { name, ttl: None });
            continue;
        }
        let mut table = ttl_table(&defaults);
        table.extend(v);
        table.insert("seed".into(), toml::Value::Integer(0));
        let mut ttl: TtlConfig = table.try_into().map_err(|e: toml::de::Error| format!("variant {name}: {}", e.to_string().trim()))?;
        ttl.seed = defaults.seed;
        ttl.validate().map_err(|e| format!("variant {name}: {e}"))?;
        out.push(Variant { name, ttl: Some(ttl) });
    }
    Ok(out)
}

pub fn load_grid(path: &Path, base: &ExperimentConfig) -> Result<Vec<Variant>, Failure> {
    parse_grid(&read(path)?, base).map_err(|e| bad(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use psttl::prototypes::PrototypeMode;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        assert!(parse_config("delta_uper = 0.9").is_err());
        assert!(parse_config("delta_upper = \"high\"").is_err());
    }

    #[test]
    fn grid_overrides_only_named_fields() {
        let base = ExperimentConfig::default();
        let text = "[[variant]]\nname = \"b\"\nbaseline = true\n\n[[variant]]\nname = \"s\"\nprototype_mode = \"static\"\nlambda2 = 0.0\n";
        let v = parse_grid(text, &base).unwrap();
        assert_eq!(v[0].ttl, None);
        let t = v[1].ttl.as_ref().unwrap();
        assert_eq!(t.prototype_mode, PrototypeMode::Static);
        assert_eq!(t.lambda2, 0.0);
        assert_eq!(TtlConfig { prototype_mode: PrototypeMode::Cumulative, lambda2: 0.1, ..t.clone() }, base.ttl_config());
    }

    #[test]
    fn grid_rejects_bad_variants() {
        let base = ExperimentConfig::default();
        for text in [
            "[[variant]]\nname = \"a\"\ndim = 4\n",
            "[[variant]]\nname = \"a\"\nseed = 4\n",
            "[[variant]]\nname = \"a\"\n[[variant]]\nname = \"a\"\n",
            "[[variant]]\nname = \"a\"\nbaseline = true\nlr = 0.1\n",
            "[[variant]]\nname = \"a\"\ndelta_lower = 0.95\n",
            "[[variant]]\nlr = 0.1\n",
            "",
        ] {
            assert!(parse_grid(text, &base).is_err(), "{text}");
        }
    }
}
