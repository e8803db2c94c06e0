use std::collections::BTreeMap;
use std::fmt;

use super::types::DeviceId;

/// Attribute literal. The grammar is closed: no tensor-valued attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Attr {
    Int(i64),
    Float(f64),
    IntList(Vec<i64>),
    Str(String),
    Device(DeviceId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttrKind {
    Int,
    Float,
    IntList,
    Str,
    Device,
}

impl Attr {
    pub fn kind(&self) -> AttrKind {
        match self {
            Attr::Int(_) => AttrKind::Int,
            Attr::Float(_) => AttrKind::Float,
            Attr::IntList(_) => AttrKind::IntList,
            Attr::Str(_) => AttrKind::Str,
            Attr::Device(_) => AttrKind::Device,
        }
    }
}

impl fmt::Display for AttrKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttrKind::Int => "int",
            AttrKind::Float => "float",
            AttrKind::IntList => "int-list",
            AttrKind::Str => "string",
            AttrKind::Device => "device",
        };
        f.write_str(s)
    }
}

impl fmt::Display for Attr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Attr::Int(v) => write!(f, "{v}"),
            // `{:?}` is the shortest representation that parses back exactly.
            Attr::Float(v) => write!(f, "{v:?}"),
            Attr::IntList(vs) => {
                f.write_str("[")?;
                for (i, v) in vs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str("]")
            }
            Attr::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            Attr::Device(d) => write!(f, "@{d}"),
        }
    }
}

/// Attribute map; keys iterate in sorted order, which is the canonical
/// printing order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Attrs(BTreeMap<String, Attr>);

impl Attrs {
    pub fn new() -> Attrs {
        Attrs::default()
    }

    pub fn with(mut self, key: &str, value: Attr) -> Attrs {
        self.0.insert(key.to_string(), value);
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Attr) -> Option<Attr> {
        self.0.insert(key.into(), value)
    }

    pub fn get(&self, key: &str) -> Option<&Attr> {
        self.0.get(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Attr> {
        self.0.remove(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Attr)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        match self.get(key)? {
            Attr::Int(v) => Some(*v),
            _ => None,
        }
    }

    /// Float attribute; integer literals are accepted where a float is expected.
    pub fn float(&self, key: &str) -> Option<f64> {
        match self.get(key)? {
            Attr::Float(v) => Some(*v),
            Attr::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn int_list(&self, key: &str) -> Option<&[i64]> {
        match self.get(key)? {
            Attr::IntList(v) => Some(v),
            _ => None,
        }
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        match self.get(key)? {
            Attr::Str(v) => Some(v),
            _ => None,
        }
    }

    pub fn device(&self, key: &str) -> Option<DeviceId> {
        match self.get(key)? {
            Attr::Device(d) => Some(*d),
            _ => None,
        }
    }

    /// Device list attribute, written as an int-list.
    pub fn devices(&self, key: &str) -> Option<Vec<DeviceId>> {
        self.int_list(key)?
            .iter()
            .map(|&v| u32::try_from(v).ok().map(DeviceId))
            .collect()
    }
}

impl fmt::Display for Attrs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        f.write_str("}")
    }
}

impl FromIterator<(String, Attr)> for Attrs {
    fn from_iter<I: IntoIterator<Item = (String, Attr)>>(iter: I) -> Self {
        Attrs(iter.into_iter().collect())
    }
}
