use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Target category attached to phrases, labels and datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Antisemitic,
    Islamophobic,
    Irrelevant,
    Unlabeled,
}

impl Category {
    /// The two categories that datasets are built for.
    pub const TARGETS: [Category; 2] = [Category::Antisemitic, Category::Islamophobic];

    pub fn is_target(self) -> bool {
        matches!(self, Category::Antisemitic | Category::Islamophobic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Antisemitic => "antisemitic",
            Category::Islamophobic => "islamophobic",
            Category::Irrelevant => "irrelevant",
            Category::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown category {0:?}")]
pub struct UnknownCategory(pub String);

impl FromStr for Category {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "antisemitic" => Ok(Category::Antisemitic),
            "islamophobic" => Ok(Category::Islamophobic),
            "irrelevant" => Ok(Category::Irrelevant),
            "unlabeled" | "" => Ok(Category::Unlabeled),
            other => Err(UnknownCategory(other.to_string())),
        }
    }
}
