//! Class vocabularies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FOUR: [&str; 4] = ["Strappy", "Ferny", "Rounded", "Background"];
const FIVE: [&str; 5] = ["Strappy", "Ferny", "Rounded", "Substrate", "Water"];

/// Number of seagrass morphotype classes; they lead both vocabularies.
pub const SEAGRASS_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxonomyMode {
    /// Three morphotypes plus a single background class.
    Four,
    /// Background split into bare substrate and open water.
    Five,
}

impl std::str::FromStr for TaxonomyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "four" | "4" => Ok(Self::Four),
            "five" | "5" => Ok(Self::Five),
            other => Err(Error::Invalid(format!("unknown taxonomy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Taxonomy {
    mode: TaxonomyMode,
}

impl Taxonomy {
    pub const fn new(mode: TaxonomyMode) -> Self {
        Self { mode }
    }

    pub const fn four() -> Self {
        Self::new(TaxonomyMode::Four)
    }

    pub const fn five() -> Self {
        Self::new(TaxonomyMode::Five)
    }

    pub fn mode(&self) -> TaxonomyMode {
        self.mode
    }

    pub fn names(&self) -> &'static [&'static str] {
        match self.mode {
            TaxonomyMode::Four => &FOUR,
            TaxonomyMode::Five => &FIVE,
        }
    }

    pub fn len(&self) -> usize {
        self.names().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, index: usize) -> Option<&'static str> {
        self.names().get(index).copied()
    }

    /// Case-insensitive lookup.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names().iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    pub fn is_seagrass(&self, index: usize) -> bool {
        index < SEAGRASS_CLASSES
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label < self.len() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("label {label} out of range for {}-class taxonomy", self.len())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_orders_are_fixed() {
        assert_eq!(Taxonomy::four().names(), &["Strappy", "Ferny", "Rounded", "Background"]);
        assert_eq!(Taxonomy::five().names(), &["Strappy", "Ferny", "Rounded", "Substrate", "Water"]);
    }

    #[test]
    fn index_name_round_trip() {
        for t in [Taxonomy::four(), Taxonomy::five()] {
            for (i, name) in t.names().iter().enumerate() {
                assert_eq!(t.index_of(name), Some(i));
                assert_eq!(t.index_of(&name.to_uppercase()), Some(i));
                assert_eq!(t.name(i), Some(*name));
            }
            assert_eq!(t.index_of("Kelp"), None);
            assert_eq!(t.name(t.len()), None);
        }
    }

    #[test]
    fn serializes_as_mode_word() {
        assert_eq!(serde_json::to_string(&Taxonomy::five()).unwrap(), "\"five\"");
        let t: Taxonomy = serde_json::from_str("\"four\"").unwrap();
        assert_eq!(t, Taxonomy::four());
    }
}
