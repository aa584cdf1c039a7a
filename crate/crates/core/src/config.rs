//! Plain-text key-value configuration with dotted namespaces.
//!
//! A config file holds one `section.key = value` pair per line; `#` starts a
//! comment. Typed sections (`model`, `flow`, `train`, `decode`, `data`) are
//! read out of a [`KvConfig`] through the [`KvSection`] trait, which rejects
//! unknown keys and lists the valid ones. The canonical text (keys sorted, one
//! pair per line) is what the SHA-256 [`ConfigDigest`] is computed over.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ConfigDigest(pub [u8; 32]);

impl ConfigDigest {
    pub fn of_text(text: &str) -> Self {
        let out = Sha256::digest(text.as_bytes());
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&out);
        ConfigDigest(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let raw = hex::decode(s.trim()).map_err(|e| Error::Config(format!("bad digest: {e}")))?;
        let bytes: [u8; 32] = raw
            .try_into()
            .map_err(|_| Error::Config("digest must be 32 bytes".into()))?;
        Ok(ConfigDigest(bytes))
    }
}

impl fmt::Display for ConfigDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ConfigDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConfigDigest({})", &self.to_hex()[..12])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Config(format!("malformed key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` override strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Entries whose key starts with `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Vec<(String, String)> {
        let dotted = format!("{prefix}.");
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn digest(&self) -> ConfigDigest {
        ConfigDigest::of_text(&self.to_text())
    }

    /// Fails with the list of valid keys if any key lies outside `prefixes`.
    pub fn check_prefixes(&self, prefixes: &[&str], valid: impl Fn() -> Vec<String>) -> Result<()> {
        for k in self.entries.keys() {
            let ok = prefixes.iter().any(|p| k.starts_with(&format!("{p}.")));
            if !ok {
                return Err(Error::UnknownConfigKey {
                    key: k.clone(),
                    valid: valid().join(", "),
                });
            }
        }
        Ok(())
    }
}

/// A value that can live in a config file.
pub trait KvValue: Sized {
    fn parse_kv(key: &str, value: &str) -> Result<Self>;
    fn to_kv(&self) -> String;
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("`{key}`: cannot parse `{value}` as {what}"))
}

macro_rules! kv_fromstr {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn parse_kv(key: &str, value: &str) -> Result<Self> {
                <$t>::from_str(value.trim()).map_err(|_| bad(key, value, stringify!($t)))
            }
            fn to_kv(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
kv_fromstr!(usize, u64, u32, bool);

impl KvValue for f64 {
    fn parse_kv(key: &str, value: &str) -> Result<Self> {
        f64::from_str(value.trim()).map_err(|_| bad(key, value, "f64"))
    }
    fn to_kv(&self) -> String {
        // `{:?}` round-trips exactly.
        format!("{self:?}")
    }
}

impl KvValue for String {
    fn parse_kv(_key: &str, value: &str) -> Result<Self> {
        Ok(value.trim().to_string())
    }
    fn to_kv(&self) -> String {
        self.clone()
    }
}

impl<T: KvValue> KvValue for Vec<T> {
    fn parse_kv(key: &str, value: &str) -> Result<Self> {
        let v = value.trim();
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|p| T::parse_kv(key, p)).collect()
    }
    fn to_kv(&self) -> String {
        self.iter().map(KvValue::to_kv).collect::<Vec<_>>().join(",")
    }
}

impl<T: KvValue> KvValue for Option<T> {
    fn parse_kv(key: &str, value: &str) -> Result<Self> {
        match value.trim() {
            "" | "none" | "auto" => Ok(None),
            v => T::parse_kv(key, v).map(Some),
        }
    }
    fn to_kv(&self) -> String {
        match self {
            Some(v) => v.to_kv(),
            None => "auto".into(),
        }
    }
}

/// A typed configuration section living under one dotted prefix.
pub trait KvSection: Default {
    const PREFIX: &'static str;

    /// Sets one field; returns `Ok(false)` for keys the section does not know.
    fn set_field(&mut self, key: &str, value: &str) -> Result<bool>;

    fn fields(&self) -> Vec<(&'static str, String)>;

    fn valid_keys() -> Vec<String> {
        Self::default()
            .fields()
            .into_iter()
            .map(|(k, _)| format!("{}.{k}", Self::PREFIX))
            .collect()
    }

    /// Reads the section, starting from `base` and applying every key found.
    fn read_over(mut base: Self, kv: &KvConfig) -> Result<Self> {
        for (k, v) in kv.section(Self::PREFIX) {
            if !base.set_field(&k, &v)? {
                return Err(Error::UnknownConfigKey {
                    key: format!("{}.{k}", Self::PREFIX),
                    valid: Self::valid_keys().join(", "),
                });
            }
        }
        Ok(base)
    }

    fn from_kv(kv: &KvConfig) -> Result<Self> {
        Self::read_over(Self::default(), kv)
    }

    fn write_into(&self, kv: &mut KvConfig) {
        for (k, v) in self.fields() {
            kv.entries.insert(format!("{}.{k}", Self::PREFIX), v);
        }
    }

    fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        self.write_into(&mut kv);
        kv
    }
}

/// Implements [`KvSection`] for a struct whose listed fields all implement
/// [`KvValue`].
#[macro_export]
macro_rules! kv_section {
    ($ty:ty, $prefix:literal, { $($field:ident),* $(,)? }) => {
        impl $crate::config::KvSection for $ty {
            const PREFIX: &'static str = $prefix;
            fn set_field(&mut self, key: &str, value: &str) -> $crate::Result<bool> {
                match key {
                    $(stringify!($field) => {
                        self.$field = $crate::config::KvValue::parse_kv(
                            concat!($prefix, ".", stringify!($field)), value)?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }
            fn fields(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), $crate::config::KvValue::to_kv(&self.$field))),*]
            }
        }
    };
}

/// Implements [`KvValue`] for a fieldless enum through explicit name pairs.
#[macro_export]
macro_rules! kv_enum {
    ($ty:ty { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $crate::config::KvValue for $ty {
            fn parse_kv(key: &str, value: &str) -> $crate::Result<Self> {
                match value.trim() {
                    $($name => Ok(<$ty>::$variant),)*
                    other => Err($crate::Error::Config(format!(
                        "`{key}`: `{other}` is not one of {}",
                        [$($name),*].join(" | ")
                    ))),
                }
            }
            fn to_kv(&self) -> String {
                match self {
                    $(<$ty>::$variant => $name.to_string(),)*
                }
            }
        }
        impl std::str::FromStr for $ty {
            type Err = $crate::Error;
            fn from_str(s: &str) -> $crate::Result<Self> {
                <$ty as $crate::config::KvValue>::parse_kv("value", s)
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&$crate::config::KvValue::to_kv(self))
            }
        }
    };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq)]
    struct Demo {
        width: usize,
        rate: f64,
        steps: Vec<usize>,
    }
    crate::kv_section!(Demo, "demo", { width, rate, steps });

    #[test]
    fn parse_and_canonicalize() {
        let kv = KvConfig::parse("# header\n demo.width = 8\ndemo.rate=0.25 # trailing\n\n").unwrap();
        assert_eq!(kv.to_text(), "demo.rate = 0.25\ndemo.width = 8\n");
        let d = Demo::from_kv(&kv).unwrap();
        assert_eq!(d.width, 8);
        assert_eq!(d.rate, 0.25);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let kv = KvConfig::parse("demo.depth = 3").unwrap();
        let err = Demo::from_kv(&kv).unwrap_err().to_string();
        assert!(err.contains("demo.depth"), "{err}");
        assert!(err.contains("demo.width") && err.contains("demo.steps"), "{err}");
    }

    #[test]
    fn digest_is_order_independent() {
        let a = KvConfig::parse("a.x = 1\nb.y = 2").unwrap();
        let b = KvConfig::parse("b.y = 2\na.x = 1").unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = KvConfig::parse("a.x = 1\nb.y = 3").unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn section_round_trip() {
        let d = Demo {
            width: 3,
            rate: 0.1 + 0.2,
            steps: vec![48, 48, 16],
        };
        let back = Demo::from_kv(&d.to_kv()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn overrides_win() {
        let mut kv = KvConfig::parse("demo.width = 8").unwrap();
        kv.apply_overrides(&["demo.width=16"]).unwrap();
        assert_eq!(kv.get("demo.width"), Some("16"));
        assert!(kv.apply_overrides(&["nonsense"]).is_err());
    }

    #[test]
    fn digest_hex_round_trip() {
        let d = ConfigDigest::of_text("x");
        assert_eq!(ConfigDigest::from_hex(&d.to_hex()).unwrap(), d);
    }
}
