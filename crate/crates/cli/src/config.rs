use std::ffi::OsString;
use std::path::PathBuf;

use clap::Command;
use dsfeat::data::Config;

use crate::CliError;

/// Path given to `--config`, in either `--config PATH` or `--config=PATH` form.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn given_on_command_line(argv: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let prefix = format!("--{long}=");
    argv.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&prefix)
    })
}

/// Appends a flag for every config key not already set on the command
/// line. Keys must name a long flag of the chosen subcommand.
pub fn merge(cmd: &Command, mut argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let cfg = Config::read(&path)?;
    let sub_name = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .find(|a| cmd.find_subcommand(a).is_some());
    let Some(sub) = sub_name.as_deref().and_then(|n| cmd.find_subcommand(n)) else {
        // No subcommand yet; let the parser report it.
        return Ok(argv);
    };
    let mut extra = Vec::new();
    for (key, value) in cfg.iter() {
        if key == "config" {
            return Err(CliError::Usage(format!("{}: config files cannot name another config", path.display())));
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key))
            .ok_or_else(|| CliError::Usage(format!("{}: unknown key {key:?} for {}", path.display(), sub.get_name())))?;
        if given_on_command_line(&argv, key) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value {
                "true" => extra.push(OsString::from(format!("--{key}"))),
                "false" => {}
                other => {
                    return Err(CliError::Usage(format!(
                        "{}: {key} expects true or false, got {other:?}",
                        path.display()
                    )))
                }
            }
        }
    }
    // Keep any positional `--` terminator last.
    let at = argv.iter().position(|a| a == "--").unwrap_or(argv.len());
    argv.splice(at..at, extra);
    Ok(argv)
}
