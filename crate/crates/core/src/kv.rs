//! `key = value` text files with `#` comments.

use std::collections::HashSet;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits `text` into entries. Blank lines and comments are skipped; a
/// repeated key is an error.
pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(Error::Config {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config {
                line,
                msg: "empty key".into(),
            });
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Config {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
        out.push(Entry {
            line,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

impl Entry {
    pub fn parse<T: FromStr>(&self) -> Result<T> {
        self.value.parse().map_err(|_| Error::Config {
            line: self.line,
            msg: format!("bad value `{}` for `{}`", self.value, self.key),
        })
    }

    /// Comma-separated list.
    pub fn parse_list<T: FromStr>(&self) -> Result<Vec<T>> {
        self.value
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| Error::Config {
                    line: self.line,
                    msg: format!("bad list item `{}` for `{}`", s.trim(), self.key),
                })
            })
            .collect()
    }

    pub fn unknown(&self) -> Error {
        Error::Config {
            line: self.line,
            msg: format!("unknown key `{}`", self.key),
        }
    }
}
