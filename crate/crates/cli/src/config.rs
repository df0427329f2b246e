//! `key = value` run configuration files.

use std::path::Path;

use bsdn_core::TrainConfig;

use crate::CliError;

/// Parse a run configuration. Blank lines and `#` comments are ignored; every
/// key must be a training configuration key.
pub fn parse_run_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("config line {}: expected 'key = value', got '{raw}'", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !TrainConfig::KEYS.contains(&k) {
            return Err(CliError::Usage(format!(
                "config line {}: unknown key '{k}' (known keys: {})",
                n + 1,
                TrainConfig::KEYS.join(", ")
            )));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

pub fn load_run_config(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_run_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let p = parse_run_config("# run\nsteps = 10\n\n lr=0.001 # fast\n").unwrap();
        assert_eq!(p, vec![("steps".into(), "10".into()), ("lr".into(), "0.001".into())]);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(parse_run_config("stepz = 10").is_err());
        assert!(parse_run_config("steps 10").is_err());
    }
}
