//! Plain-text `key = value` files. `#` starts a comment; blank lines are
//! ignored; a key may appear once.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse_kv(text: &str, name: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(name, i + 1, "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(name, i + 1, "empty key"));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::parse(name, i + 1, format!("duplicate key `{k}`")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, &path.display().to_string())
}

pub fn format_kv<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{} = {}\n", k.as_ref(), v.as_ref()))
        .collect()
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_junk() {
        let kv = parse_kv("# run\nseed = 3\n\nlr=0.01 # fast\n", "c").unwrap();
        assert_eq!(kv, vec![("seed".into(), "3".into()), ("lr".into(), "0.01".into())]);
        let e = parse_kv("seed = 1\nbroken\n", "c.txt").unwrap_err();
        assert_eq!(e.to_string(), "c.txt:2: expected `key = value`");
        assert!(parse_kv("a = 1\na = 2\n", "c").is_err());
        assert_eq!(parse_kv(&format_kv(&kv), "c").unwrap(), kv);
    }
}
