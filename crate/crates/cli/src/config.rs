//! Line-oriented run configuration.
//!
//! ```text
//! # comment
//! [section]
//! key = value        # trailing comments are allowed
//! ```
//!
//! Sections may repeat (`[layer]`, `[model]`); keys may not repeat within one
//! section. Every key a command does not read is reported as an error, which
//! catches typos before any work starts.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug)]
pub struct Section {
    pub name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
    used: RefCell<BTreeSet<String>>,
}

#[derive(Debug)]
pub struct Config {
    sections: Vec<Section>,
    base: PathBuf,
}

impl Config {
    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut sections: Vec<Section> = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return err(format!("line {line_no}: unterminated section header"));
                };
                let name = name.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    return err(format!("line {line_no}: bad section name {name:?}"));
                }
                sections.push(Section {
                    name: name.to_string(),
                    line: line_no,
                    entries: Vec::new(),
                    used: RefCell::new(BTreeSet::new()),
                });
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {line_no}: expected `key = value`"));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(section) = sections.last_mut() else {
                return err(format!("line {line_no}: `{key}` appears before any [section]"));
            };
            if key.is_empty() {
                return err(format!("line {line_no}: empty key"));
            }
            if section.entries.iter().any(|(k, _, _)| k == key) {
                return err(format!("line {line_no}: `{key}` repeated in [{}]", section.name));
            }
            section.entries.push((key.to_string(), value.to_string(), line_no));
        }
        Ok(Self {
            sections,
            base: base.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    /// The single section with this name, if present.
    pub fn section(&self, name: &str) -> Result<Option<&Section>> {
        let mut found = self.sections.iter().filter(|s| s.name == name);
        let first = found.next();
        if let Some(second) = found.next() {
            return err(format!("line {}: section [{name}] may appear only once", second.line));
        }
        Ok(first)
    }

    pub fn require(&self, name: &str) -> Result<&Section> {
        self.section(name)?
            .ok_or_else(|| ConfigError(format!("missing [{name}] section")))
    }

    pub fn all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.sections.iter().filter(move |s| s.name == name)
    }

    /// Resolves a path relative to the directory holding the config file.
    pub fn path(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Like [`Config::path`], but the file must already exist.
    pub fn existing(&self, value: &str) -> Result<PathBuf> {
        let p = self.path(value);
        if !p.is_file() {
            return err(format!("referenced file {} does not exist", p.display()));
        }
        Ok(p)
    }

    /// Fails on sections no command reads and on keys left unread.
    pub fn finish(&self, known_sections: &[&str]) -> Result<()> {
        for s in &self.sections {
            if !known_sections.contains(&s.name.as_str()) {
                return err(format!("line {}: unknown section [{}] for this command", s.line, s.name));
            }
            let used = s.used.borrow();
            if let Some((k, _, line)) = s.entries.iter().find(|(k, _, _)| !used.contains(k)) {
                return err(format!("line {line}: unknown key `{k}` in [{}]", s.name));
            }
        }
        Ok(())
    }
}

impl Section {
    fn raw(&self, key: &str) -> Option<(&str, usize)> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _, _)| k == key)
    }

    pub fn string(&self, key: &str) -> Option<String> {
        self.raw(key).map(|(v, _)| v.to_string())
    }

    pub fn require_string(&self, key: &str) -> Result<String> {
        self.string(key)
            .ok_or_else(|| ConfigError(format!("[{}] (line {}) needs `{key}`", self.name, self.line)))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError(format!("line {line}: cannot parse `{key} = {v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| ConfigError(format!("[{}] (line {}) needs `{key}`", self.name, self.line)))
    }

    /// Comma-separated list; an empty value gives an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| ConfigError(format!("line {line}: cannot parse `{s}` in `{key}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// `lo..hi` or a single value meaning `lo == hi`.
    pub fn range(&self, key: &str) -> Result<Option<(f64, f64)>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => {
                let bad = || ConfigError(format!("line {line}: `{key}` must be a number or `lo..hi`"));
                let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
                let (lo, hi) = match v.split_once("..") {
                    Some((a, b)) => (parse(a)?, parse(b)?),
                    None => {
                        let x = parse(v)?;
                        (x, x)
                    }
                };
                Ok(Some((lo, hi)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "
# top comment
[frequencies]
hz = 100e3, 200e3   # two of them
damping =

[layer]
name = a
c0 = 1500..1510
[layer]
name = b
c0 = 1490
";

    #[test]
    fn parses_lists_ranges_and_repeats() {
        let c = Config::parse(TEXT, "/base").unwrap();
        let f = c.require("frequencies").unwrap();
        assert_eq!(f.list::<f64>("hz").unwrap().unwrap(), vec![1e5, 2e5]);
        assert_eq!(f.list::<f64>("damping").unwrap().unwrap(), Vec::<f64>::new());
        let layers: Vec<_> = c.all("layer").collect();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0].range("c0").unwrap(), Some((1500.0, 1510.0)));
        assert_eq!(layers[1].range("c0").unwrap(), Some((1490.0, 1490.0)));
        layers[0].string("name");
        layers[1].string("name");
        c.finish(&["frequencies", "layer"]).unwrap();
        assert!(c.section("layer").is_err());
        assert_eq!(c.path("x.csv"), PathBuf::from("/base/x.csv"));
    }

    #[test]
    fn reports_unread_keys_and_sections() {
        let c = Config::parse("[a]\nx = 1\ny = 2\n", "").unwrap();
        let a = c.require("a").unwrap();
        assert_eq!(a.get::<u32>("x").unwrap(), Some(1));
        let e = c.finish(&["a"]).unwrap_err();
        assert!(e.0.contains("`y`"), "{e}");
        assert!(c.finish(&["b"]).is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in ["x = 1\n", "[a\n", "[a]\nnovalue\n", "[a]\nx = 1\nx = 2\n", "[]\n"] {
            assert!(Config::parse(bad, "").is_err(), "{bad:?}");
        }
        let c = Config::parse("[a]\nn = seven\n", "").unwrap();
        assert!(c.require("a").unwrap().get::<usize>("n").is_err());
    }
}
