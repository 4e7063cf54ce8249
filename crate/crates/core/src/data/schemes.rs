use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a tag within a BIO label set ordered as `[B, I, O]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bio {
    pub begin: usize,
    pub inside: usize,
    pub outside: usize,
}

pub const BIO: Bio = Bio {
    begin: 0,
    inside: 1,
    outside: 2,
};

/// Label inventories for the five tasks.
///
/// Each list is an ordered set; a label's position is its class index. The
/// two BIO lists are ordered begin, inside, outside.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSchemes {
    pub ate: Vec<String>,
    pub ote: Vec<String>,
    pub asc: Vec<String>,
    pub domain: Vec<String>,
    pub dsc: Vec<String>,
}

impl Default for TagSchemes {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        TagSchemes {
            ate: s(&["BA", "IA", "O"]),
            ote: s(&["BP", "IP", "O"]),
            asc: s(&["pos", "neg", "neu"]),
            domain: s(&["Laptop", "Restaurant"]),
            dsc: s(&["pos", "neg", "neu"]),
        }
    }
}

fn lookup(set: &[String], what: &str, name: &str) -> Result<usize> {
    set.iter()
        .position(|t| t == name)
        .ok_or_else(|| Error::Schema(format!("unknown {what} label `{name}` (expected one of {set:?})")))
}

impl TagSchemes {
    /// Per-token class count of the aspect-level tasks.
    pub fn c1(&self) -> usize {
        self.ate.len()
    }

    pub fn ate_index(&self, name: &str) -> Result<usize> {
        lookup(&self.ate, "ATE", name)
    }

    pub fn ote_index(&self, name: &str) -> Result<usize> {
        lookup(&self.ote, "OTE", name)
    }

    pub fn asc_index(&self, name: &str) -> Result<usize> {
        lookup(&self.asc, "sentiment", name)
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        lookup(&self.domain, "domain", name)
    }

    pub fn dsc_index(&self, name: &str) -> Result<usize> {
        lookup(&self.dsc, "document sentiment", name)
    }

    /// Checks that every label set is a bijection onto `0..len` and that the
    /// aspect-level sets have three classes each.
    pub fn validate(&self) -> Result<()> {
        for (what, set) in [
            ("ate", &self.ate),
            ("ote", &self.ote),
            ("asc", &self.asc),
            ("domain", &self.domain),
            ("dsc", &self.dsc),
        ] {
            if set.is_empty() {
                return Err(Error::Schema(format!("empty {what} label set")));
            }
            for (i, a) in set.iter().enumerate() {
                if set[..i].contains(a) {
                    return Err(Error::Schema(format!("duplicate {what} label `{a}`")));
                }
            }
        }
        if self.ate.len() != 3 || self.ote.len() != 3 || self.asc.len() != 3 {
            return Err(Error::Schema("aspect-level label sets must have 3 classes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijection_survives_serde() {
        let s = TagSchemes::default();
        let back: TagSchemes = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(s, back);
        for (i, name) in s.ate.iter().enumerate() {
            assert_eq!(back.ate_index(name).unwrap(), i);
        }
        assert_eq!(s.c1(), 3);
        s.validate().unwrap();
    }

    #[test]
    fn unknown_tag_is_schema_error() {
        let s = TagSchemes::default();
        assert!(matches!(s.ate_index("B-ASP"), Err(Error::Schema(_))));
    }

    #[test]
    fn duplicate_labels_rejected() {
        let mut s = TagSchemes::default();
        s.asc[2] = "pos".into();
        assert!(s.validate().is_err());
    }
}
