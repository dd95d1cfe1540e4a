//! Command-line front ends for the pinky emulator: the debugger session
//! behind `pinky-dbg`, plus shared helpers for `pvfs` and `pinky`.

pub mod session;

pub use session::{Command, ParseError, ReplMode, Session, EXIT_OK, EXIT_PARSE_ERROR};

/// Splits a `key=value` command-line setting.
pub fn split_setting(pair: &str) -> Result<(&str, &str), String> {
    pair.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected key=value, got {pair:?}"))
}
