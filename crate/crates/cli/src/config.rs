//! Flat `key=value` config files and run sidecars.
//!
//! A config file is spliced into the argument list right after the
//! subcommand, so flags given on the command line are parsed later and win.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected key=value",
                path.display(),
                i + 1
            )));
        };
        let key = k.trim();
        if key.is_empty() || key == "config" {
            return Err(CliError::Usage(format!(
                "{}:{}: invalid key `{key}`",
                path.display(),
                i + 1
            )));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Turns config entries into long flags. `true` and `false` toggle switches.
pub fn config_args(entries: &[(String, String)], switches: &[&str]) -> Vec<OsString> {
    let mut out = Vec::new();
    for (k, v) in entries {
        if switches.contains(&k.as_str()) {
            if v == "true" {
                out.push(format!("--{k}").into());
            }
            continue;
        }
        out.push(format!("--{k}={v}").into());
    }
    out
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Returns `args` with the config file's flags inserted after the subcommand.
pub fn expand_args(args: Vec<OsString>, switches: &[&str]) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let injected = config_args(&parse_config(&text, &path)?, switches);
    let Some(sub) = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
    else {
        return Ok(args);
    };
    let at = sub + 2;
    let mut out = args[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

/// Resolved parameters of one run, written next to its main output.
#[derive(Debug, Default)]
pub struct RunRecord {
    command: &'static str,
    entries: Vec<(&'static str, String)>,
    notes: Vec<String>,
}

impl RunRecord {
    pub fn new(command: &'static str) -> Self {
        RunRecord {
            command,
            entries: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn set(mut self, key: &'static str, value: impl ToString) -> Self {
        self.entries.push((key, value.to_string()));
        self
    }

    /// Records something that is not a flag, such as positional inputs.
    pub fn note(mut self, text: impl Into<String>) -> Self {
        self.notes.push(text.into());
        self
    }

    /// Same `key=value` form the `--config` flag reads; notes become comments.
    pub fn to_text(&self) -> String {
        let mut s = format!("# fairser {} {}\n", self.command, env!("CARGO_PKG_VERSION"));
        for n in &self.notes {
            s.push_str(&format!("# {n}\n"));
        }
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn sidecar_path(out: &Path) -> PathBuf {
        let mut p = out.as_os_str().to_os_string();
        p.push(".run");
        PathBuf::from(p)
    }

    pub fn write_for(&self, out: &Path) -> Result<(), CliError> {
        let path = Self::sidecar_path(out);
        fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parse_skips_comments_and_blanks() {
        let e = parse_config("# c\n\nseed = 3\nout=a.txt\n", Path::new("x")).unwrap();
        assert_eq!(
            e,
            vec![("seed".into(), "3".into()), ("out".into(), "a.txt".into())]
        );
    }

    #[test]
    fn parse_rejects_bare_line() {
        assert!(matches!(
            parse_config("seed\n", Path::new("x")),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn switches_follow_value() {
        let e = vec![
            ("projections".to_string(), "true".to_string()),
            ("include-enrolled".to_string(), "false".to_string()),
            ("lr".to_string(), "0.1".to_string()),
        ];
        let a = config_args(&e, &["projections", "include-enrolled"]);
        assert_eq!(a, os(&["--projections", "--lr=0.1"]));
    }

    #[test]
    fn injected_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        fs::write(&cfg, "seed=5\n").unwrap();
        let args = os(&[
            "fairser",
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        let out = expand_args(args, &[]).unwrap();
        assert_eq!(out[1], "synth");
        assert_eq!(out[2], "--seed=5");
        assert_eq!(out.last().unwrap(), "9");
    }

    #[test]
    fn sidecar_round_trips_through_parser() {
        let r = RunRecord::new("train")
            .note("inputs: a.csv")
            .set("seed", 4)
            .set("lr", 0.0001);
        let e = parse_config(&r.to_text(), Path::new("x")).unwrap();
        assert_eq!(
            e,
            vec![("seed".into(), "4".into()), ("lr".into(), "0.0001".into())]
        );
    }
}
