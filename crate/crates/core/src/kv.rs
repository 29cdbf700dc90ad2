//! Line-oriented `key = value` manifest parsing with optional `[section]`
//! blocks. Used by scene manifests, experiment manifests, and CLI config
//! files. `#` starts a comment; repeated keys are kept in order.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KvPair {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone)]
pub struct KvSection {
    pub name: String,
    pub line: usize,
    pub pairs: Vec<KvPair>,
}

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    /// Pairs appearing before any `[section]` header.
    pub globals: Vec<KvPair>,
    pub sections: Vec<KvSection>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<KvFile> {
        let mut file = KvFile::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("unterminated section header {line:?}"),
                })?;
                file.sections.push(KvSection {
                    name: name.trim().to_string(),
                    line: line_no,
                    pairs: Vec::new(),
                });
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let pair = KvPair {
                key: key.trim().to_string(),
                value: value.trim().to_string(),
                line: line_no,
            };
            match file.sections.last_mut() {
                Some(section) => section.pairs.push(pair),
                None => file.globals.push(pair),
            }
        }
        Ok(file)
    }
}

pub fn get<'a>(pairs: &'a [KvPair], key: &str) -> Option<&'a KvPair> {
    pairs.iter().find(|p| p.key == key)
}

pub fn get_all<'a>(pairs: &'a [KvPair], key: &'a str) -> impl Iterator<Item = &'a KvPair> {
    pairs.iter().filter(move |p| p.key == key)
}

pub fn parse_typed<T: std::str::FromStr>(pair: &KvPair) -> Result<T> {
    pair.value.parse().map_err(|_| Error::Parse {
        line: pair.line,
        msg: format!(
            "cannot parse {:?} as {} for key {:?}",
            pair.value,
            std::any::type_name::<T>(),
            pair.key
        ),
    })
}

/// `f64` with `inf` accepted (used by `snr_db` to disable noise).
pub fn parse_f64(pair: &KvPair) -> Result<f64> {
    match pair.value.as_str() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        _ => parse_typed(pair),
    }
}

/// Whitespace-separated list of values of one type.
pub fn parse_list<T: std::str::FromStr>(pair: &KvPair) -> Result<Vec<T>> {
    pair.value
        .split_whitespace()
        .map(|tok| {
            tok.parse().map_err(|_| Error::Parse {
                line: pair.line,
                msg: format!("cannot parse list element {tok:?} for key {:?}", pair.key),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_globals_and_sections() {
        let f = KvFile::parse(
            "seed = 3 # comment\n\n[condition]\nname = a\nrt60 = 0.5\n[condition]\nname = b\n",
        )
        .unwrap();
        assert_eq!(f.globals.len(), 1);
        assert_eq!(f.sections.len(), 2);
        assert_eq!(get(&f.sections[0].pairs, "name").unwrap().value, "a");
        assert_eq!(f.sections[1].pairs[0].value, "b");
    }

    #[test]
    fn error_carries_line_number() {
        let err = KvFile::parse("ok = 1\nbroken line\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn repeated_keys_kept() {
        let f = KvFile::parse("source = 1 2 synthetic:0\nsource = 3 4 synthetic:1\n").unwrap();
        assert_eq!(get_all(&f.globals, "source").count(), 2);
    }
}
