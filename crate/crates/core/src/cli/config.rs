//! Flat `key = value` configuration files.
//!
//! Keys are long flag names of the subcommand being run. File values are
//! spliced in front of the command-line flags, and later occurrences of a
//! flag win, which gives flags > file > defaults.

use std::ffi::OsString;
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

/// Turns file entries into flags. `flag_takes_value` reports whether a long
/// flag exists for the subcommand and whether it takes a value; unknown keys
/// are skipped so one file can serve several subcommands.
pub fn to_flags(entries: &[(String, String)], flag_takes_value: impl Fn(&str) -> Option<bool>) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (k, v) in entries {
        match flag_takes_value(k) {
            None => {}
            Some(true) => {
                for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    out.push(format!("--{k}").into());
                    out.push(part.into());
                }
            }
            Some(false) => match v.as_str() {
                "true" | "1" | "yes" => out.push(format!("--{k}").into()),
                "false" | "0" | "no" => {}
                other => {
                    return Err(Error::Argument(format!("{k} expects true or false, got {other:?}")));
                }
            },
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let e = parse("# run\nseed = 3\nsplit_fraction=0.2\n\n").unwrap();
        assert_eq!(e, vec![("seed".into(), "3".into()), ("split-fraction".into(), "0.2".into())]);
        assert!(matches!(parse("seed 3"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn flags_from_entries() {
        let e = parse("seed=3\nsafe=true\nk=8,16\nunknown=1").unwrap();
        let flags = to_flags(&e, |k| match k {
            "seed" | "k" => Some(true),
            "safe" => Some(false),
            _ => None,
        })
        .unwrap();
        let s: Vec<String> = flags.into_iter().map(|f| f.into_string().unwrap()).collect();
        assert_eq!(s, ["--seed", "3", "--safe", "--k", "8", "--k", "16"]);
        let bad = parse("safe=maybe").unwrap();
        assert!(to_flags(&bad, |_| Some(false)).is_err());
    }
}
