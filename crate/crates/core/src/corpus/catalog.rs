//! Product catalog: categories, their attribute spaces, and the routing
//! table that decides which attributes a title spells out and which only the
//! rendered image shows. The split is what gives each category a distinct
//! modality profile: garment attributes like color and pattern live in
//! pixels, electronics parameters live in title tokens.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Color inventory shared by all categories; the render value is the fill
/// RGB in unit range.
pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.72, 0.15]),
    ("blue", [0.12, 0.22, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("purple", [0.60, 0.15, 0.70]),
    ("cyan", [0.10, 0.78, 0.78]),
];

pub const PATTERNS: [&str; 3] = ["plain", "stripes", "checker"];
pub const MATERIALS: [&str; 4] = ["silk", "wool", "cotton", "linen"];
pub const BRANDS: [&str; 4] = ["zorel", "vexa", "lumio", "kairo"];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const MONITOR_REFRESH: [&str; 4] = ["hz60", "hz75", "hz144", "hz240"];
pub const MONITOR_SCREEN: [&str; 4] = ["in22", "in24", "in27", "in32"];
pub const PHONE_STORAGE: [&str; 4] = ["gb64", "gb128", "gb256", "gb512"];
pub const PHONE_SCREEN: [&str; 3] = ["in5", "in6", "in7"];

/// High-frequency filler tokens sellers stuff into titles.
pub const STUFFING: [&str; 6] = ["hot", "sale", "new", "best", "deal", "free"];

/// Product families with fixed modality routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    /// Garment: color, pattern and size show only in the image; the title
    /// carries material and brand.
    Dress,
    /// Electronics: refresh rate and screen size show only in the title; the
    /// image shows a colored panel.
    Monitor,
    /// Electronics: storage and screen size in the title, color in pixels.
    Phone,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Dress, Category::Monitor, Category::Phone];

    pub fn name(self) -> &'static str {
        match self {
            Category::Dress => "dress",
            Category::Monitor => "monitor",
            Category::Phone => "phone",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::config("categories", format!("unknown category {name:?}")))
    }

    /// True when queries for this category lean on image-expressed
    /// attributes.
    pub fn image_routed(self) -> bool {
        matches!(self, Category::Dress)
    }
}

/// One concrete product: an attribute assignment under its category's
/// routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductSpec {
    pub product_id: String,
    pub category: Category,
    pub color: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pattern: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub material: Option<String>,
    pub brand: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub size: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub params: Vec<String>,
}

impl ProductSpec {
    /// Draws a product uniformly over the category's attribute space.
    pub fn sample(id: usize, category: Category, rng: &mut ChaCha8Rng) -> Self {
        let pick = |opts: &[&str], rng: &mut ChaCha8Rng| -> String {
            opts[rng.gen_range(0..opts.len())].to_string()
        };
        let color_names: Vec<&str> = COLORS.iter().map(|(n, _)| *n).collect();
        let mut spec = ProductSpec {
            product_id: format!("p{id:05}"),
            category,
            color: pick(&color_names, rng),
            pattern: None,
            material: None,
            brand: pick(&BRANDS, rng),
            size: None,
            params: Vec::new(),
        };
        match category {
            Category::Dress => {
                spec.pattern = Some(pick(&PATTERNS, rng));
                spec.material = Some(pick(&MATERIALS, rng));
                spec.size = Some(pick(&SIZES, rng));
            }
            Category::Monitor => {
                spec.params =
                    vec![pick(&MONITOR_REFRESH, rng), pick(&MONITOR_SCREEN, rng)];
            }
            Category::Phone => {
                spec.params = vec![pick(&PHONE_STORAGE, rng), pick(&PHONE_SCREEN, rng)];
            }
        }
        spec
    }

    /// Title tokens per the routing table; never includes image-only
    /// attributes.
    pub fn title_tokens(&self) -> Vec<&str> {
        let mut out = vec![self.category.name()];
        match self.category {
            Category::Dress => {
                out.push(self.material.as_deref().expect("dress has material"));
                out.push(&self.brand);
            }
            Category::Monitor | Category::Phone => {
                out.push(&self.brand);
                out.extend(self.params.iter().map(String::as_str));
            }
        }
        out
    }

    /// Attributes recoverable from the rendered image alone: what the
    /// synthetic caption generator can truthfully report.
    pub fn image_tokens(&self) -> Vec<&str> {
        let mut out = vec![self.category.name(), self.color.as_str()];
        if let Some(p) = &self.pattern {
            out.push(p);
        }
        out
    }

    /// Value of one queryable attribute.
    pub fn attribute(&self, attr: QueryAttribute) -> Option<&str> {
        match attr {
            QueryAttribute::Color => Some(&self.color),
            QueryAttribute::Pattern => self.pattern.as_deref(),
            QueryAttribute::Material => self.material.as_deref(),
            QueryAttribute::Brand => Some(&self.brand),
            QueryAttribute::Param(i) => self.params.get(i).map(String::as_str),
        }
    }
}

/// Attribute kinds a query can mention besides the category word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryAttribute {
    Color,
    Pattern,
    Material,
    Brand,
    Param(usize),
}

/// Queryable attributes with sampling weights, per category. Garment queries
/// lean on image-expressed looks; electronics queries lean on title
/// parameters.
fn query_attribute_pool(category: Category) -> Vec<(QueryAttribute, f64)> {
    match category {
        Category::Dress => vec![
            (QueryAttribute::Color, 0.40),
            (QueryAttribute::Pattern, 0.25),
            (QueryAttribute::Material, 0.20),
            (QueryAttribute::Brand, 0.15),
        ],
        Category::Monitor | Category::Phone => vec![
            (QueryAttribute::Param(0), 0.40),
            (QueryAttribute::Param(1), 0.35),
            (QueryAttribute::Brand, 0.25),
        ],
    }
}

/// A composed query: the tokens and which attributes they pin.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDraft {
    pub tokens: Vec<String>,
    pub attributes: Vec<QueryAttribute>,
}

impl QueryDraft {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Composes a short query for a product: the category word plus zero to two
/// of its attribute values.
pub fn compose_query(spec: &ProductSpec, rng: &mut ChaCha8Rng) -> QueryDraft {
    let extra = match rng.gen::<f64>() {
        x if x < 0.10 => 0,
        x if x < 0.55 => 1,
        _ => 2,
    };
    let mut pool = query_attribute_pool(spec.category);
    let mut tokens = vec![spec.category.name().to_string()];
    let mut attributes = Vec::new();
    for _ in 0..extra {
        if pool.is_empty() {
            break;
        }
        let total: f64 = pool.iter().map(|(_, w)| w).sum();
        let mut draw = rng.gen::<f64>() * total;
        let mut idx = pool.len() - 1;
        for (i, (_, w)) in pool.iter().enumerate() {
            if draw < *w {
                idx = i;
                break;
            }
            draw -= w;
        }
        let (attr, _) = pool.remove(idx);
        if let Some(value) = spec.attribute(attr) {
            tokens.push(value.to_string());
            attributes.push(attr);
        }
    }
    QueryDraft { tokens, attributes }
}

/// True when `candidate` satisfies the query drawn for `target`: same
/// category and every queried attribute value matches.
pub fn satisfies(query: &QueryDraft, target: &ProductSpec, candidate: &ProductSpec) -> bool {
    if candidate.category != target.category {
        return false;
    }
    query.attributes.iter().all(|&a| candidate.attribute(a) == target.attribute(a))
}

/// True when `candidate` satisfies a query given only as text: the category
/// word matches and every other token appears among the candidate's
/// attribute values. Attribute vocabularies are disjoint, so value-set
/// membership agrees with [`satisfies`] on composed queries.
pub fn matches_query_text(tokens: &[&str], candidate: &ProductSpec) -> bool {
    let mut found_category = false;
    for t in tokens {
        if *t == candidate.category.name() {
            found_category = true;
            continue;
        }
        let held = candidate.color == *t
            || candidate.pattern.as_deref() == Some(*t)
            || candidate.material.as_deref() == Some(*t)
            || candidate.brand == *t
            || candidate.params.iter().any(|p| p == t);
        if !held {
            return false;
        }
    }
    found_category
}

/// Every word the corpus can emit; the tokenizer vocabulary is built from
/// this fixed inventory so vocabulary ids do not depend on sample counts.
pub fn lexicon() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for c in Category::ALL {
        words.push(c.name().to_string());
    }
    words.extend(COLORS.iter().map(|(n, _)| n.to_string()));
    words.extend(PATTERNS.iter().map(|s| s.to_string()));
    words.extend(MATERIALS.iter().map(|s| s.to_string()));
    words.extend(BRANDS.iter().map(|s| s.to_string()));
    words.extend(SIZES.iter().map(|s| s.to_string()));
    words.extend(MONITOR_REFRESH.iter().map(|s| s.to_string()));
    words.extend(MONITOR_SCREEN.iter().map(|s| s.to_string()));
    words.extend(PHONE_STORAGE.iter().map(|s| s.to_string()));
    words.extend(PHONE_SCREEN.iter().map(|s| s.to_string()));
    words.extend(STUFFING.iter().map(|s| s.to_string()));
    words
}

/// RGB fill for a color word.
pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, rgb)| *rgb)
}
