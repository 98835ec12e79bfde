//! Line-oriented `key=value` text with `#` comments.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One `key=value` entry and its 1-based source line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `key=value` lines. Blank lines and text after `#` are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push(Entry { key: key.to_string(), value: v.trim().to_string(), line: i + 1 });
    }
    Ok(out)
}

pub fn parse_value<V: FromStr>(e: &Entry) -> Result<V>
where
    V::Err: Display,
{
    e.value.parse().map_err(|err| Error::Config(format!("line {}: {} = {:?}: {err}", e.line, e.key, e.value)))
}

pub fn parse_list<V: FromStr>(e: &Entry) -> Result<Vec<V>>
where
    V::Err: Display,
{
    e.value
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|err| Error::Config(format!("line {}: {} = {:?}: {err}", e.line, e.key, e.value)))
        })
        .collect()
}

pub fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("line {}: {} expects a boolean, got {:?}", e.line, e.key, e.value))),
    }
}

pub fn join<V: Display>(xs: &[V]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let e = parse_kv("# header\n\na = 1 # trailing\nb=x,y\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0], Entry { key: "a".into(), value: "1".into(), line: 3 });
        assert_eq!(parse_list::<String>(&e[1]).unwrap(), vec!["x", "y"]);
    }

    #[test]
    fn malformed_line() {
        let err = parse_kv("a=1\nnonsense\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn typed_values() {
        let e = &parse_kv("n=3,4\nf=1e-3\nb=off").unwrap();
        assert_eq!(parse_list::<usize>(&e[0]).unwrap(), vec![3, 4]);
        assert_eq!(parse_value::<f64>(&e[1]).unwrap(), 1e-3);
        assert!(!parse_bool(&e[2]).unwrap());
        assert!(parse_value::<usize>(&e[1]).is_err());
    }
}
