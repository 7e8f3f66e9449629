//! Flat `key = value` configuration files with optional `[section]` headers.
//!
//! Keys before any header belong to the global section. Lookups in a named
//! section fall back to the global one. `#` and `;` start comments; values
//! may be double-quoted.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| Error::Config(format!("line {}: unterminated section header", no + 1)))?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", no + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", no + 1)));
            }
            let mut val = v.trim();
            if val.len() >= 2 && val.starts_with('"') && val.ends_with('"') {
                val = &val[1..val.len() - 1];
            }
            let sec = sections.entry(current.clone()).or_default();
            if sec.insert(key.to_string(), val.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", no + 1)));
            }
        }
        Ok(Config { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Value of `key` in `section`, falling back to the global section.
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).or_else(|| self.sections.get("").and_then(|s| s.get(key))).map(String::as_str)
    }

    pub fn get_real(&self, section: &str, key: &str) -> Result<Option<f64>> {
        self.get(section, key).map(|v| parse_real(v).map_err(|e| keyed(key, e))).transpose()
    }

    pub fn get_reals(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(section, key).map(|v| parse_reals(v).map_err(|e| keyed(key, e))).transpose()
    }

    pub fn get_uint(&self, section: &str, key: &str) -> Result<Option<u64>> {
        self.get(section, key)
            .map(|v| {
                v.trim().replace('_', "").parse::<u64>().map_err(|_| Error::Config(format!("{key}: '{v}' is not a nonnegative integer")))
            })
            .transpose()
    }

    /// Keys present in `section` that are not in `known`.
    pub fn unknown_keys(&self, section: &str, known: &[&str]) -> Vec<String> {
        self.sections.get(section).map(|s| s.keys().filter(|k| !known.contains(&k.as_str())).cloned().collect()).unwrap_or_default()
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(String::as_str)
    }
}

fn keyed(key: &str, e: Error) -> Error {
    Error::Config(format!("{key}: {e}"))
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => quoted = !quoted,
            '#' | ';' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Parses a real number, also accepting powers written `base^exp` such as `2^-10`.
pub fn parse_real(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = || Error::Config(format!("'{s}' is not a number"));
    let v = match s.split_once('^') {
        Some((b, e)) => {
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            let e: f64 = e.trim().parse().map_err(|_| bad())?;
            b.powf(e)
        }
        None => s.parse().map_err(|_| bad())?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

/// Comma-separated list of [`parse_real`] values.
pub fn parse_reals(s: &str) -> Result<Vec<f64>> {
    let items: Vec<&str> = s.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Config("empty list".into()));
    }
    items.into_iter().map(parse_real).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
model = "double_well"   # global
seed = 7

[strong-error]
h_list = 2^-7, 2^-8 ,0.001
seed = 9 ; overrides
paths = 2_000
"#;

    #[test]
    fn sections_and_fallback() {
        let c = Config::parse(SAMPLE).unwrap();
        assert_eq!(c.get("strong-error", "model"), Some("double_well"));
        assert_eq!(c.get_uint("strong-error", "seed").unwrap(), Some(9));
        assert_eq!(c.get_uint("simulate", "seed").unwrap(), Some(7));
        assert_eq!(c.get_uint("strong-error", "paths").unwrap(), Some(2000));
        assert_eq!(c.get_reals("strong-error", "h_list").unwrap(), Some(vec![2f64.powi(-7), 2f64.powi(-8), 0.001]));
        assert_eq!(c.get("simulate", "missing"), None);
        assert_eq!(c.unknown_keys("strong-error", &["h_list", "seed"]), vec!["paths".to_string()]);
    }

    #[test]
    fn malformed_input_is_a_config_error() {
        for bad in ["just words", "[open", "= 3", "a = 1\na = 2"] {
            assert!(matches!(Config::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        assert!(parse_real("2^x").is_err());
        assert!(parse_real("1e999").is_err());
        assert_eq!(parse_real(" 0.25 ").unwrap(), 0.25);
        assert!(parse_reals(" , ").is_err());
    }

    #[test]
    fn quoted_hash_is_kept() {
        let c = Config::parse("name = \"a#b\" # note").unwrap();
        assert_eq!(c.get("", "name"), Some("a#b"));
    }
}
