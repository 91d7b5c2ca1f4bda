//! Line-record text format: `key=value` pairs separated by single spaces,
//! keys in a fixed order chosen by the writer.
//!
//! Values are percent-escaped for `%`, space, tab, CR and LF so any string
//! (file paths included) survives a round trip. Floats are written with the
//! shortest representation that parses back to the same bits.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Record {
    pairs: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl Display) -> &mut Self {
        debug_assert!(!key.is_empty() && !key.contains(['=', ' ', '\t', '\n']));
        self.pairs.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push_f64(&mut self, key: &str, value: f64) -> &mut Self {
        self.push(key, fmt_f64(value))
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse(format!("missing key `{key}`")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|e| Error::Parse(format!("key `{key}`: cannot parse `{raw}`: {e}")))
    }

    /// Like [`Record::parse`], but an absent key yields `None`.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    pub fn to_line(&self) -> String {
        self.pairs
            .iter()
            .map(|(k, v)| format!("{k}={}", escape(v)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_line(line: &str) -> Result<Record> {
        let mut rec = Record::new();
        for token in line.split_whitespace() {
            let (k, v) = token
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("token `{token}` is not key=value")))?;
            if k.is_empty() {
                return Err(Error::Parse(format!("empty key in `{token}`")));
            }
            rec.pairs.push((k.to_string(), unescape(v)?));
        }
        Ok(rec)
    }

    /// Merges every `key=value` token of a multi-line document; `#` starts a comment.
    pub fn parse_document(text: &str) -> Result<Record> {
        let mut rec = Record::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("");
            rec.pairs.extend(Record::parse_line(line)?.pairs);
        }
        Ok(rec)
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn escape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for ch in v.chars() {
        match ch {
            '%' => out.push_str("%25"),
            ' ' => out.push_str("%20"),
            '\t' => out.push_str("%09"),
            '\n' => out.push_str("%0A"),
            '\r' => out.push_str("%0D"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(v: &str) -> Result<String> {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(ch) = chars.next() {
        if ch != '%' {
            out.push(ch);
            continue;
        }
        let code: String = chars.by_ref().take(2).collect();
        let byte = u8::from_str_radix(&code, 16)
            .map_err(|_| Error::Parse(format!("bad escape `%{code}` in `{v}`")))?;
        out.push(byte as char);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn escapes_paths_with_spaces() {
        let mut r = Record::new();
        r.push("path", "/tmp/a dir/100%").push_f64("x", 0.1);
        let line = r.to_line();
        assert_eq!(line, "path=/tmp/a%20dir/100%25 x=0.1");
        assert_eq!(Record::parse_line(&line).unwrap(), r);
    }

    #[test]
    fn document_merges_lines_and_skips_comments() {
        let r = Record::parse_document("a=1 # note\n\n# whole line\nb=2\n").unwrap();
        assert_eq!(r.get("a"), Some("1"));
        assert_eq!(r.parse::<u32>("b").unwrap(), 2);
    }

    proptest! {
        #[test]
        fn floats_round_trip_bit_exactly(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(!x.is_nan());
            let mut r = Record::new();
            r.push_f64("v", x);
            let back = Record::parse_line(&r.to_line()).unwrap();
            prop_assert_eq!(back.parse::<f64>("v").unwrap().to_bits(), bits);
        }

        #[test]
        fn arbitrary_values_round_trip(v in "[ -~\t]{0,24}") {
            let mut r = Record::new();
            r.push("k", &v);
            let line = r.to_line();
            let rec = Record::parse_line(&line).unwrap();
            prop_assert_eq!(rec.get("k"), Some(v.as_str()));
        }
    }
}
