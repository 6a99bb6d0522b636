//! TOML run configs with dotted `--set` overrides.

use std::path::Path;

use serde::Deserialize;
use toml::{Table, Value};
use tvl_core::RunConfig;

use crate::CliError;

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string (so `strategy=HardSampling` needs no quotes).
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` has an empty segment")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for (depth, seg) in parents.iter().enumerate() {
        let entry = node.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override `{key}`: `{}` is not a section", path[..=depth].join(".")))
        })?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Loads `path` (or an empty config), applies `sets` in order and
/// validates. Without `require_output_dir`, a missing `output_dir` becomes `.`.
pub fn load_config(path: Option<&Path>, sets: &[String], require_output_dir: bool) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    for s in sets {
        apply_override(&mut table, s)?;
    }
    if !require_output_dir && !table.contains_key("output_dir") {
        table.insert("output_dir".into(), Value::String(".".into()));
    }
    let cfg = RunConfig::deserialize(Value::Table(table)).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_tables_and_parse_types() {
        let mut t = Table::new();
        apply_override(&mut t, "train.steps=10").unwrap();
        apply_override(&mut t, "train.video_merge.strategy=HardSampling").unwrap();
        apply_override(&mut t, "train.beta = 0.5").unwrap();
        apply_override(&mut t, "output_dir=\"out dir\"").unwrap();
        assert_eq!(t["train"]["steps"].as_integer(), Some(10));
        assert_eq!(t["train"]["video_merge"]["strategy"].as_str(), Some("HardSampling"));
        assert_eq!(t["train"]["beta"].as_float(), Some(0.5));
        assert_eq!(t["output_dir"].as_str(), Some("out dir"));
        assert!(apply_override(&mut t, "train.steps.x=1").is_err());
        assert!(apply_override(&mut t, "nokey").is_err());
    }

    #[test]
    fn config_errors_name_the_field() {
        let e = load_config(None, &[], true).unwrap_err();
        assert!(e.to_string().contains("output_dir"));
        let e = load_config(None, &["train.stepz=1".into()], false).unwrap_err();
        assert!(e.to_string().contains("stepz"));
        let e = load_config(None, &["train.batch_size=1".into()], false).unwrap_err();
        assert!(e.to_string().contains("batch_size"));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn merge_config_keys_use_paper_names() {
        let c = load_config(None, &["train.video_merge.K=64".into(), "train.text_merge=MergeCLS".into()], false).unwrap();
        assert_eq!(c.train.video_merge.k, 64);
    }
}
