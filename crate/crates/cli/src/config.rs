//! TOML experiment configs and `path=value` overrides.

use std::fs;
use std::path::Path;

use toml::Value;
use xvkd_core::experiments::ExperimentConfig;
use xvkd_core::WorldConfig;

use crate::error::CliError;

pub fn load(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        None => Ok(ExperimentConfig::reference()),
        Some(p) => parse(&read(p)?),
    }
}

pub fn load_world(path: &Path) -> Result<WorldConfig, CliError> {
    toml::from_str(&read(path)?).map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::InvalidConfig(format!("{}: {e}", path.display())))
}

pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::InvalidConfig(e.to_string()))
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::InvalidConfig(e.to_string()))
}

/// Applies `a.b.c=value` assignments in order. Values are TOML literals; a bare
/// word that does not parse is taken as a string.
///
/// Only keys that exist in the config schema are accepted.
pub fn apply_overrides(cfg: &ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut tree = Value::try_from(cfg).map_err(|e| CliError::InvalidConfig(e.to_string()))?;
    let mut expected: Vec<(Vec<&str>, Value)> = Vec::new();
    for o in overrides {
        let (path, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::InvalidConfig(format!("override `{o}` is not path=value")))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(CliError::InvalidConfig(format!("bad override path `{path}`")));
        }
        let value = parse_value(raw.trim());
        set(&mut tree, &keys, value.clone()).ok_or_else(|| CliError::InvalidConfig(format!("unknown key `{path}`")))?;
        // A repeated path is checked against its last assignment only.
        expected.retain(|(k, _)| *k != keys);
        expected.push((keys, value));
    }
    let out: ExperimentConfig = tree.try_into().map_err(|e: toml::de::Error| CliError::InvalidConfig(e.to_string()))?;
    // Unknown leaves are dropped silently by serde; catch them on the way back.
    let back = Value::try_from(&out).map_err(|e| CliError::InvalidConfig(e.to_string()))?;
    for (keys, value) in expected {
        let mut node = &back;
        for k in &keys {
            node = node.get(k).ok_or_else(|| CliError::InvalidConfig(format!("unknown key `{}`", keys.join("."))))?;
        }
        if !same(node, &value) {
            return Err(CliError::InvalidConfig(format!("override of `{}` did not take", keys.join("."))));
        }
    }
    Ok(out)
}

fn same(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Float(x), Value::Integer(y)) | (Value::Integer(y), Value::Float(x)) => *x == *y as f64,
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| same(p, q)),
        _ => a == b,
    }
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

/// Sets the leaf at `keys` and returns its previous value. The parent table
/// must exist; the leaf may be absent (an unset optional field).
fn set(tree: &mut Value, keys: &[&str], value: Value) -> Option<Option<Value>> {
    let (last, parents) = keys.split_last()?;
    let mut node = tree;
    for k in parents {
        node = node.get_mut(*k)?;
    }
    let table = node.as_table_mut()?;
    let value = match (table.get(*last), value) {
        (Some(Value::Float(_)), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    };
    Some(table.insert(last.to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_set_nested_values() {
        let base = ExperimentConfig::reference();
        let c = apply_overrides(
            &base,
            &ov(&["teacher.train.epochs=3", "distill.sigma=1", "em.omegas=[0, 0.5]", "em.mode=finetune-only"]),
        )
        .unwrap();
        assert_eq!(c.teacher.train.epochs, 3);
        assert_eq!(c.distill.sigma, 1.0);
        assert_eq!(c.em.omegas, vec![0.0, 0.5]);
        assert_eq!(c.em.mode, xvkd_core::baselines::EmMode::FinetuneOnly);
        assert_eq!(apply_overrides(&base, &[]).unwrap(), base);
    }

    #[test]
    fn later_overrides_win_and_optional_fields_can_be_set() {
        let base = ExperimentConfig::reference();
        let c = apply_overrides(
            &base,
            &ov(&["distill.t_percent=50", "distill.t_percent=70", "teacher.train.grad_clip=2.5"]),
        )
        .unwrap();
        assert_eq!(c.distill.t_percent, 70.0);
        assert_eq!(c.teacher.train.grad_clip, Some(2.5));
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let base = ExperimentConfig::reference();
        for bad in ["teacher.nope=1", "nothing", "a..b=1", "teacher.train.epochs=fast", "world.geometry.rows.x=1"] {
            assert!(
                matches!(apply_overrides(&base, &ov(&[bad])), Err(CliError::InvalidConfig(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::reference();
        assert_eq!(parse(&to_toml(&c).unwrap()).unwrap(), c);
    }
}
