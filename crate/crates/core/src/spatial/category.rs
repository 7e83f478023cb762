//! Feature categories and the tag-pattern mapping onto them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CATEGORIES: [&str; 13] = [
    "building",
    "landuse_residential",
    "landuse_commercial",
    "landuse_industrial",
    "road_major",
    "road_minor",
    "rail",
    "water",
    "park_green",
    "poi_food",
    "poi_shop",
    "poi_education_health",
    "natural_area",
];

/// `key=value`, `key=*`, or a bare name, mapped to a category name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingRule {
    pub pattern: String,
    pub category: String,
}

impl MappingRule {
    fn matches(&self, tag: &str) -> bool {
        match self.pattern.strip_suffix("=*") {
            Some(key) => tag.split_once('=').is_some_and(|(k, _)| k == key) || tag == key,
            None => self.pattern == tag,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryMapping {
    #[serde(default = "default_category_names")]
    pub categories: Vec<String>,
    #[serde(default)]
    pub rules: Vec<MappingRule>,
}

fn default_category_names() -> Vec<String> {
    DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

impl Default for CategoryMapping {
    fn default() -> Self {
        let rule = |pattern: &str, category: &str| MappingRule { pattern: pattern.into(), category: category.into() };
        Self {
            categories: default_category_names(),
            rules: vec![
                rule("building=*", "building"),
                rule("landuse=residential", "landuse_residential"),
                rule("landuse=commercial", "landuse_commercial"),
                rule("landuse=retail", "landuse_commercial"),
                rule("landuse=industrial", "landuse_industrial"),
                rule("highway=motorway", "road_major"),
                rule("highway=trunk", "road_major"),
                rule("highway=primary", "road_major"),
                rule("highway=secondary", "road_major"),
                rule("highway=*", "road_minor"),
                rule("railway=*", "rail"),
                rule("waterway=*", "water"),
                rule("natural=water", "water"),
                rule("leisure=park", "park_green"),
                rule("landuse=grass", "park_green"),
                rule("amenity=restaurant", "poi_food"),
                rule("amenity=cafe", "poi_food"),
                rule("amenity=fast_food", "poi_food"),
                rule("shop=*", "poi_shop"),
                rule("amenity=school", "poi_education_health"),
                rule("amenity=university", "poi_education_health"),
                rule("amenity=hospital", "poi_education_health"),
                rule("amenity=clinic", "poi_education_health"),
                rule("natural=*", "natural_area"),
            ],
        }
    }
}

impl CategoryMapping {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mapping: CategoryMapping =
            toml::from_str(text).map_err(|e| Error::config("category_mapping", e.to_string()))?;
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::config("category_mapping.categories", "empty category list"));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if self.categories[..i].contains(c) {
                return Err(Error::config("category_mapping.categories", format!("duplicate category `{c}`")));
            }
        }
        for r in &self.rules {
            if self.index_of(&r.category).is_none() {
                return Err(Error::config(
                    "category_mapping.rules",
                    format!("rule `{}` targets unknown category `{}`", r.pattern, r.category),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    /// Resolves a tag string; a bare category name resolves to itself,
    /// otherwise the first matching rule wins.
    pub fn resolve(&self, tag: &str) -> Option<usize> {
        let tag = tag.trim();
        self.index_of(tag)
            .or_else(|| self.rules.iter().find(|r| r.matches(tag)).and_then(|r| self.index_of(&r.category)))
    }
}
