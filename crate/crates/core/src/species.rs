use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpeciesError {
    #[error("species list is empty")]
    Empty,
    #[error("duplicate species name {0:?}")]
    Duplicate(String),
    #[error("unknown species {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Species {
    pub common_name: String,
    pub latin_name: String,
}

impl Species {
    pub fn new(common: impl Into<String>, latin: impl Into<String>) -> Self {
        Self {
            common_name: common.into(),
            latin_name: latin.into(),
        }
    }

    /// Directory / column key, e.g. `dark_capped_bulbul`.
    pub fn slug(&self) -> String {
        snake_case(&self.common_name)
    }
}

/// Ordered species set; position is the class index everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Species>", into = "Vec<Species>")]
pub struct SpeciesList {
    entries: Vec<Species>,
}

impl SpeciesList {
    pub fn new(entries: Vec<Species>) -> Result<Self, SpeciesError> {
        if entries.is_empty() {
            return Err(SpeciesError::Empty);
        }
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[..i] {
                if a.common_name == b.common_name || a.slug() == b.slug() {
                    return Err(SpeciesError::Duplicate(a.common_name.clone()));
                }
                if a.latin_name == b.latin_name && !a.latin_name.is_empty() {
                    return Err(SpeciesError::Duplicate(a.latin_name.clone()));
                }
            }
        }
        Ok(Self { entries })
    }

    /// The six species used for the KwaZulu-Natal study pool.
    pub fn kzn_six() -> Self {
        Self::new(vec![
            Species::new("Brown-hooded Kingfisher", "Halcyon albiventris"),
            Species::new("Dark-capped Bulbul", "Pycnonotus tricolor"),
            Species::new("Hadada Ibis", "Bostrychia hagedash"),
            Species::new("Olive Thrush", "Turdus olivaceus"),
            Species::new("Red-eyed Dove", "Streptopelia semitorquata"),
            Species::new("Village Weaver", "Ploceus cucullatus"),
        ])
        .expect("static list is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<&Species> {
        self.entries.get(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Species> {
        self.entries.iter()
    }

    /// Match by common name, latin name or slug (case-insensitive), or by
    /// a bare class index.
    pub fn index_of(&self, name: &str) -> Result<usize, SpeciesError> {
        let name = name.trim();
        let slug = snake_case(name);
        let lower = name.to_lowercase();
        if let Some(i) = self.entries.iter().position(|s| {
            s.slug() == slug || s.common_name.to_lowercase() == lower || s.latin_name.to_lowercase() == lower
        }) {
            return Ok(i);
        }
        match name.parse::<usize>() {
            Ok(i) if i < self.len() => Ok(i),
            _ => Err(SpeciesError::Unknown(name.to_string())),
        }
    }
}

impl TryFrom<Vec<Species>> for SpeciesList {
    type Error = SpeciesError;
    fn try_from(v: Vec<Species>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<SpeciesList> for Vec<Species> {
    fn from(s: SpeciesList) -> Self {
        s.entries
    }
}

/// `"Dark-capped Bulbul"` -> `"dark_capped_bulbul"`.
pub fn snake_case(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.is_empty() && !out.ends_with('_') {
            out.push('_');
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(snake_case("Dark-capped Bulbul"), "dark_capped_bulbul");
        assert_eq!(snake_case("  Red-eyed  Dove "), "red_eyed_dove");
    }

    #[test]
    fn lookup_by_any_name() {
        let s = SpeciesList::kzn_six();
        assert_eq!(s.index_of("Hadada Ibis").unwrap(), 2);
        assert_eq!(s.index_of("hadada_ibis").unwrap(), 2);
        assert_eq!(s.index_of("Turdus olivaceus").unwrap(), 3);
        assert_eq!(s.index_of("5").unwrap(), 5);
        assert!(s.index_of("6").is_err());
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        assert_eq!(SpeciesList::new(vec![]), Err(SpeciesError::Empty));
        let dup = vec![Species::new("A b", "x"), Species::new("a-B", "y")];
        assert!(matches!(SpeciesList::new(dup), Err(SpeciesError::Duplicate(_))));
    }

    #[test]
    fn serde_round_trip() {
        let s = SpeciesList::kzn_six();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<SpeciesList>(&json).unwrap(), s);
        assert!(serde_json::from_str::<SpeciesList>("[]").is_err());
    }
}
