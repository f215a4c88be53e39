//! `--config <file.json>` support.
//!
//! Config values are turned into extra command-line flags appended after
//! the user's arguments, skipping any flag the user already gave, so
//! explicit flags always win. Keys are snake_case option names; a nested
//! object named after the subcommand applies to that subcommand only.

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};
use serde_json::Value;

use crate::args::Cli;

fn usage(msg: String) -> clap::Error {
    Cli::command().error(ErrorKind::InvalidValue, msg)
}

/// Value of `--config` in `argv`, if present.
fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn given(argv: &[String], long: &str) -> bool {
    let flag = format!("--{long}");
    let eq = format!("{flag}=");
    argv.iter().any(|a| *a == flag || a.starts_with(&eq))
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Array(items) => items.iter().map(scalar).collect::<Option<Vec<_>>>().map(|v| v.join(",")),
        _ => None,
    }
}

/// Flags for the entries of `obj` accepted by `cmd`.
fn flags_for(
    cmd: &clap::Command,
    obj: &serde_json::Map<String, Value>,
    argv: &[String],
    strict: bool,
    out: &mut Vec<String>,
) -> Result<(), clap::Error> {
    for (key, value) in obj {
        let long = key.replace('_', "-");
        let Some(arg) = cmd.get_arguments().find(|a| a.get_long() == Some(long.as_str())) else {
            if strict {
                return Err(usage(format!("config: unknown option `{key}` for `{}`", cmd.get_name())));
            }
            continue;
        };
        if given(argv, &long) || long == "config" {
            continue;
        }
        let takes_value = arg.get_action().takes_values();
        match value {
            Value::Null => {}
            Value::Bool(b) if !takes_value => {
                if *b {
                    out.push(format!("--{long}"));
                }
            }
            Value::Number(n) if !takes_value && long == "verbose" => {
                for _ in 0..n.as_u64().unwrap_or(0) {
                    out.push("--verbose".into());
                }
            }
            // Lists of lists become repeated flags (e.g. several PMU sets).
            Value::Array(items) if items.iter().any(Value::is_array) => {
                for item in items {
                    let s = scalar(item)
                        .ok_or_else(|| usage(format!("config: bad value for `{key}`")))?;
                    out.push(format!("--{long}"));
                    out.push(s);
                }
            }
            v => {
                let s = scalar(v).filter(|_| takes_value).ok_or_else(|| {
                    usage(format!("config: bad value for `{key}`: {v}"))
                })?;
                out.push(format!("--{long}"));
                out.push(s);
            }
        }
    }
    Ok(())
}

/// Parses `argv` after merging the `--config` file, returning the parsed
/// CLI and the effective argument list.
pub fn parse_with_config(argv: Vec<String>) -> Result<(Cli, Vec<String>), clap::Error> {
    let mut argv = argv;
    if let Some(path) = config_path(&argv) {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| usage(format!("cannot read config {path}: {e}")))?;
        let json: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {path} is not valid JSON: {e}")))?;
        let Value::Object(obj) = json else {
            return Err(usage(format!("config {path} must hold a JSON object")));
        };
        let root = Cli::command();
        let names: Vec<&str> = root.get_subcommands().map(|c| c.get_name()).collect();
        let sub = argv.iter().skip(1).find_map(|a| root.find_subcommand(a));
        let mut extra = Vec::new();
        if let Some(sub) = sub {
            // Top-level keys apply to every subcommand that has the
            // option; a key no subcommand knows is an error.
            let mut global = serde_json::Map::new();
            let mut local = serde_json::Map::new();
            for (k, v) in &obj {
                if names.contains(&k.as_str()) {
                    continue;
                }
                let long = k.replace('_', "-");
                let has = |c: &clap::Command| c.get_arguments().any(|a| a.get_long() == Some(long.as_str()));
                if has(&root) {
                    global.insert(k.clone(), v.clone());
                } else if root.get_subcommands().any(has) {
                    local.insert(k.clone(), v.clone());
                } else {
                    return Err(usage(format!("config: unknown option `{k}`")));
                }
            }
            if let Some(v) = obj.get(sub.get_name()) {
                let Value::Object(section) = v else {
                    return Err(usage(format!("config: `{}` must be an object", sub.get_name())));
                };
                flags_for(sub, section, &[], true, &mut Vec::new())?;
                // The subcommand section overrides top-level keys.
                local.extend(section.clone());
            }
            flags_for(&root, &global, &argv, true, &mut extra)?;
            flags_for(sub, &local, &argv, false, &mut extra)?;
        }
        if let Some(pos) = argv.iter().position(|a| a == "--") {
            let tail = argv.split_off(pos);
            argv.extend(extra);
            argv.extend(tail);
        } else {
            argv.extend(extra);
        }
    }
    let matches = Cli::command().try_get_matches_from(&argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    Ok((cli, argv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::args::Command;

    fn write(json: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), json).unwrap();
        f
    }

    fn argv(args: &[&str]) -> Vec<String> {
        std::iter::once("cgnnse").chain(args.iter().copied()).map(String::from).collect()
    }

    #[test]
    fn flags_beat_config() {
        let f = write(r#"{"count": 50, "seed": 3, "datagen": {"seed": 9, "pmu": "4,6"}}"#);
        let p = f.path().to_str().unwrap();
        let (cli, _) =
            parse_with_config(argv(&["--config", p, "datagen", "--case", "ieee14", "--seed", "1", "--out", "o"]))
                .unwrap();
        let Command::Datagen(a) = cli.command else { panic!() };
        assert_eq!(a.seed, 1);
        assert_eq!(a.count, 50);
        assert_eq!(a.pmu, "4,6");
        let (cli, _) = parse_with_config(argv(&["--config", p, "datagen", "--case", "ieee14", "--out", "o"])).unwrap();
        let Command::Datagen(a) = cli.command else { panic!() };
        assert_eq!(a.seed, 9);
    }

    #[test]
    fn config_supplies_required_and_list_values() {
        let f = write(
            r#"{"study": {"dataset": "d.bin", "out": "o", "bad_fractions": [0.1, 0.3], "pmu_set": [[1, 2], [3]], "no_attention": true}}"#,
        );
        let p = f.path().to_str().unwrap();
        let (cli, _) = parse_with_config(argv(&["study", "noise", "--config", p])).unwrap();
        let Command::Study(a) = cli.command else { panic!() };
        assert_eq!(a.bad_fractions, vec![0.1, 0.3]);
        assert_eq!(a.pmu_set, vec!["1,2".to_string(), "3".to_string()]);
        assert!(a.arch.no_attention);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        for json in [r#"{"datagen": {"colour": 1}}"#, r#"{"colour": 1}"#] {
            let f = write(json);
            let p = f.path().to_str().unwrap();
            let e = parse_with_config(argv(&["--config", p, "datagen", "--case", "x", "--out", "o"])).unwrap_err();
            assert_eq!(e.exit_code(), 2);
        }
        // Keys of other subcommands are ignored at top level.
        let f = write(r#"{"epochs": 3}"#);
        let p = f.path().to_str().unwrap();
        assert!(parse_with_config(argv(&["--config", p, "datagen", "--case", "x", "--out", "o"])).is_ok());
    }
}
