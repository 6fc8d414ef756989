//! Three-level concept taxonomies and the synthetic paired datasets built on them.
//!
//! A [`Taxonomy`] is a forest of superordinate → basic → subordinate concepts.
//! Nodes are stored in depth-first pre-order, so two taxonomies built from
//! the same nested description compare equal regardless of how they were
//! constructed.

mod embed;
mod generator;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use embed::embed_label;
pub use generator::{generate_dataset, GeneratorConfig, PairedDataset, PairedExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Superordinate,
    Basic,
    Subordinate,
}

impl Level {
    /// Top-down order.
    pub const ALL: [Level; 3] = [Level::Superordinate, Level::Basic, Level::Subordinate];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Superordinate => "superordinate",
            Level::Basic => "basic",
            Level::Subordinate => "subordinate",
        }
    }

    /// Level a node of this level must hang under.
    pub fn parent_level(self) -> Option<Level> {
        match self {
            Level::Superordinate => None,
            Level::Basic => Some(Level::Superordinate),
            Level::Subordinate => Some(Level::Basic),
        }
    }

    fn depth(self) -> usize {
        match self {
            Level::Superordinate => 0,
            Level::Basic => 1,
            Level::Subordinate => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "superordinate" => Some(Level::Superordinate),
            "basic" => Some(Level::Basic),
            "subordinate" => Some(Level::Subordinate),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per concept level.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerLevel<V> {
    pub superordinate: V,
    pub basic: V,
    pub subordinate: V,
}

impl<V> PerLevel<V> {
    pub fn from_fn(mut f: impl FnMut(Level) -> V) -> Self {
        PerLevel {
            superordinate: f(Level::Superordinate),
            basic: f(Level::Basic),
            subordinate: f(Level::Subordinate),
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Level) -> Result<V, E>) -> Result<Self, E> {
        Ok(PerLevel {
            superordinate: f(Level::Superordinate)?,
            basic: f(Level::Basic)?,
            subordinate: f(Level::Subordinate)?,
        })
    }
}

impl<V> Index<Level> for PerLevel<V> {
    type Output = V;

    fn index(&self, level: Level) -> &V {
        match level {
            Level::Superordinate => &self.superordinate,
            Level::Basic => &self.basic,
            Level::Subordinate => &self.subordinate,
        }
    }
}

impl<V> IndexMut<Level> for PerLevel<V> {
    fn index_mut(&mut self, level: Level) -> &mut V {
        match level {
            Level::Superordinate => &mut self.superordinate,
            Level::Basic => &mut self.basic,
            Level::Subordinate => &mut self.subordinate,
        }
    }
}

/// Index of a node inside its [`Taxonomy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub name: String,
    pub level: Level,
    pub parent: Option<NodeId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("taxonomy parse error: {0}")]
    Parse(String),
    #[error("concept name must be nonempty")]
    EmptyName,
    #[error("duplicate concept name `{name}`")]
    DuplicateName { name: String },
    #[error("orphan node `{name}`: {reason}")]
    Orphan { name: String, reason: String },
    #[error("level skip: {level} node `{name}` has {parent_level} parent `{parent}`")]
    LevelSkip {
        name: String,
        level: Level,
        parent: String,
        parent_level: Level,
    },
    #[error("superordinate node `{name}` cannot have a parent")]
    RootWithParent { name: String },
    #[error("empty category `{name}`: {level} node has no children")]
    EmptyCategory { name: String, level: Level },
    #[error("unknown level `{0}`")]
    UnknownLevel(String),
}

/// Which builtin concept tree to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxonomyVariant {
    /// One superordinate, five basic, fifteen subordinate concepts.
    Base,
    /// Base plus two subordinates under every basic concept (25 total).
    AblationWide,
    /// Base plus the Cat and Dog basic concepts (7 × 3 = 21 subordinates).
    AblationDeep,
}

impl TaxonomyVariant {
    pub const ALL: [TaxonomyVariant; 3] = [
        TaxonomyVariant::Base,
        TaxonomyVariant::AblationWide,
        TaxonomyVariant::AblationDeep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaxonomyVariant::Base => "base",
            TaxonomyVariant::AblationWide => "ablation_wide",
            TaxonomyVariant::AblationDeep => "ablation_deep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for TaxonomyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Nested on-disk form:
/// `{"superordinate":[{"name":…, "basic":[{"name":…, "subordinate":[…]}]}]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyDocument {
    pub superordinate: Vec<SuperordinateEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperordinateEntry {
    pub name: String,
    pub basic: Vec<BasicEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicEntry {
    pub name: String,
    pub subordinate: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    nodes: Vec<ConceptNode>,
    roots: Vec<NodeId>,
}

/// Flat `(name, level, parent name)` record used by the validator.
#[derive(Clone, Debug)]
struct RawNode {
    name: String,
    level: Level,
    parent: Option<String>,
}

impl Taxonomy {
    fn from_raw(raw: Vec<RawNode>) -> Result<Self, TaxonomyError> {
        let mut by_name: HashMap<&str, usize> = HashMap::with_capacity(raw.len());
        for (i, node) in raw.iter().enumerate() {
            if node.name.trim().is_empty() {
                return Err(TaxonomyError::EmptyName);
            }
            if by_name.insert(node.name.as_str(), i).is_some() {
                return Err(TaxonomyError::DuplicateName {
                    name: node.name.clone(),
                });
            }
        }

        let mut parent_of: Vec<Option<usize>> = vec![None; raw.len()];
        for (i, node) in raw.iter().enumerate() {
            match (&node.parent, node.level.parent_level()) {
                (None, None) => {}
                (Some(_), None) => {
                    return Err(TaxonomyError::RootWithParent {
                        name: node.name.clone(),
                    })
                }
                (None, Some(_)) => {
                    return Err(TaxonomyError::Orphan {
                        name: node.name.clone(),
                        reason: format!("{} node has no parent", node.level),
                    })
                }
                (Some(parent), Some(expected)) => {
                    let &p = by_name.get(parent.as_str()).ok_or_else(|| TaxonomyError::Orphan {
                        name: node.name.clone(),
                        reason: format!("parent `{parent}` does not exist"),
                    })?;
                    if raw[p].level != expected {
                        return Err(TaxonomyError::LevelSkip {
                            name: node.name.clone(),
                            level: node.level,
                            parent: parent.clone(),
                            parent_level: raw[p].level,
                        });
                    }
                    parent_of[i] = Some(p);
                }
            }
        }

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); raw.len()];
        for (i, p) in parent_of.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(i);
            }
        }
        for (i, node) in raw.iter().enumerate() {
            if node.level != Level::Subordinate && children[i].is_empty() {
                return Err(TaxonomyError::EmptyCategory {
                    name: node.name.clone(),
                    level: node.level,
                });
            }
        }

        // Pre-order renumbering. Levels strictly increase along parent links,
        // so the structure is acyclic once the level checks above pass.
        let mut nodes = Vec::with_capacity(raw.len());
        let mut roots = Vec::new();
        let mut stack: Vec<(usize, Option<NodeId>)> = raw
            .iter()
            .enumerate()
            .filter(|(_, n)| n.level == Level::Superordinate)
            .map(|(i, _)| (i, None))
            .rev()
            .collect();
        while let Some((i, parent)) = stack.pop() {
            let id = NodeId(nodes.len());
            if parent.is_none() {
                roots.push(id);
            }
            nodes.push(ConceptNode {
                name: raw[i].name.clone(),
                level: raw[i].level,
                parent,
            });
            for &c in children[i].iter().rev() {
                stack.push((c, Some(id)));
            }
        }
        debug_assert_eq!(nodes.len(), raw.len());
        Ok(Taxonomy { nodes, roots })
    }

    pub fn from_document(doc: &TaxonomyDocument) -> Result<Self, TaxonomyError> {
        let mut raw = Vec::new();
        for sup in &doc.superordinate {
            raw.push(RawNode {
                name: sup.name.clone(),
                level: Level::Superordinate,
                parent: None,
            });
            for basic in &sup.basic {
                raw.push(RawNode {
                    name: basic.name.clone(),
                    level: Level::Basic,
                    parent: Some(sup.name.clone()),
                });
                for sub in &basic.subordinate {
                    raw.push(RawNode {
                        name: sub.clone(),
                        level: Level::Subordinate,
                        parent: Some(basic.name.clone()),
                    });
                }
            }
        }
        Self::from_raw(raw)
    }

    pub fn to_document(&self) -> TaxonomyDocument {
        TaxonomyDocument {
            superordinate: self
                .roots
                .iter()
                .map(|&s| SuperordinateEntry {
                    name: self.name(s).to_owned(),
                    basic: self
                        .children(s)
                        .map(|b| BasicEntry {
                            name: self.name(b).to_owned(),
                            subordinate: self.children(b).map(|u| self.name(u).to_owned()).collect(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("taxonomy document serializes")
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn node(&self, id: NodeId) -> &ConceptNode {
        &self.nodes[id.0]
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn level(&self, id: NodeId) -> Level {
        self.nodes[id.0].level
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn at_level(&self, level: Level) -> Vec<NodeId> {
        self.ids().filter(|&id| self.level(id) == level).collect()
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.ids().filter(move |&c| self.parent(c) == Some(id))
    }

    /// Subordinate descendants of `id` (itself if subordinate).
    pub fn subordinates_under(&self, id: NodeId) -> Vec<NodeId> {
        self.at_level(Level::Subordinate)
            .into_iter()
            .filter(|&u| self.ancestor_at(u, self.level(id)) == Some(id))
            .collect()
    }

    /// Walks parent links from `id` up to `level`. `None` if `level` is below `id`.
    pub fn ancestor_at(&self, id: NodeId, level: Level) -> Option<NodeId> {
        let mut cur = id;
        loop {
            let here = self.level(cur);
            if here == level {
                return Some(cur);
            }
            if here.depth() < level.depth() {
                return None;
            }
            cur = self.parent(cur)?;
        }
    }

    /// Full label chain of a subordinate concept.
    pub fn chain(&self, subordinate: NodeId) -> PerLevel<NodeId> {
        PerLevel::from_fn(|level| {
            self.ancestor_at(subordinate, level)
                .expect("validated taxonomy has complete chains")
        })
    }

    /// `(subordinate, basic, superordinate)` node counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.at_level(Level::Subordinate).len(),
            self.at_level(Level::Basic).len(),
            self.at_level(Level::Superordinate).len(),
        )
    }
}

const BASE_CONCEPTS: [(&str, [&str; 3]); 5] = [
    ("Fish", ["Goldfish", "Shark", "Tuna"]),
    ("Horse", ["Mule", "Pony", "Zebra"]),
    ("Squirrel", ["Chipmunk", "Gopher", "Marmot"]),
    ("Bird", ["Chicken", "Parrot", "Swallow"]),
    ("Insect", ["Bug", "Butterfly", "Fly"]),
];

// Only eight of the ten added subordinates are named for the wide ablation;
// Donkey and Stallion complete the Horse category.
const WIDE_ADDITIONS: [(&str, [&str; 2]); 5] = [
    ("Fish", ["Lion fish", "Stingray"]),
    ("Horse", ["Donkey", "Stallion"]),
    ("Squirrel", ["Guinea Pig", "Hamster"]),
    ("Bird", ["White Stork", "Ostrich"]),
    ("Insect", ["Grasshopper", "Ladybug"]),
];

const DEEP_ADDITIONS: [(&str, [&str; 3]); 2] = [
    ("Cat", ["Tiger cat", "Egyptian cat", "Persian cat"]),
    ("Dog", ["English Foxhound", "Border Collie", "Golden Retriever"]),
];

pub fn builtin_document(variant: TaxonomyVariant) -> TaxonomyDocument {
    let mut basic: Vec<BasicEntry> = BASE_CONCEPTS
        .iter()
        .map(|(b, subs)| BasicEntry {
            name: (*b).to_owned(),
            subordinate: subs.iter().map(|s| (*s).to_owned()).collect(),
        })
        .collect();
    match variant {
        TaxonomyVariant::Base => {}
        TaxonomyVariant::AblationWide => {
            for (entry, (name, extra)) in basic.iter_mut().zip(WIDE_ADDITIONS.iter()) {
                debug_assert_eq!(entry.name, *name);
                entry.subordinate.extend(extra.iter().map(|s| (*s).to_owned()));
            }
        }
        TaxonomyVariant::AblationDeep => {
            basic.extend(DEEP_ADDITIONS.iter().map(|(b, subs)| BasicEntry {
                name: (*b).to_owned(),
                subordinate: subs.iter().map(|s| (*s).to_owned()).collect(),
            }));
        }
    }
    TaxonomyDocument {
        superordinate: vec![SuperordinateEntry {
            name: "Animal".to_owned(),
            basic,
        }],
    }
}

pub fn builtin_taxonomy(variant: TaxonomyVariant) -> Taxonomy {
    Taxonomy::from_document(&builtin_document(variant)).expect("builtin taxonomies are valid")
}

/// Parses and validates a taxonomy file.
///
/// Accepts the nested document form, or a flat
/// `{"nodes":[{"name":…, "level":…, "parent":…}]}` list. Both go through the
/// same validation.
pub fn load_taxonomy(document: &str) -> Result<Taxonomy, TaxonomyError> {
    if document.trim().is_empty() {
        return Err(TaxonomyError::Parse("empty document".into()));
    }
    let value: Value = serde_json::from_str(document).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| TaxonomyError::Parse("top level must be an object".into()))?;
    let raw = if let Some(nodes) = obj.get("nodes") {
        parse_flat(nodes)?
    } else {
        parse_nested(obj)?
    };
    Taxonomy::from_raw(raw)
}

fn parse_err(msg: impl Into<String>) -> TaxonomyError {
    TaxonomyError::Parse(msg.into())
}

fn entry_name(value: &Value, context: &str) -> Result<String, TaxonomyError> {
    match value {
        Value::String(s) => Ok(s.clone()),
        Value::Object(o) => o
            .get("name")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| parse_err(format!("{context} entry without a string `name`"))),
        _ => Err(parse_err(format!("{context} entry must be a string or object"))),
    }
}

fn array_at<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, owner: &str) -> Result<&'a [Value], TaxonomyError> {
    match obj.get(key) {
        None => Ok(&[]),
        Some(Value::Array(items)) => Ok(items),
        Some(_) => Err(parse_err(format!("`{key}` of `{owner}` must be an array"))),
    }
}

fn parse_nested(obj: &serde_json::Map<String, Value>) -> Result<Vec<RawNode>, TaxonomyError> {
    for key in obj.keys() {
        match key.as_str() {
            "superordinate" => {}
            "basic" | "subordinate" => {
                let level = Level::parse(key).expect("known level key");
                let first = array_at(obj, key, "document")?
                    .first()
                    .map(|v| entry_name(v, key))
                    .transpose()?
                    .unwrap_or_else(|| key.clone());
                return Err(TaxonomyError::Orphan {
                    name: first,
                    reason: format!("{level} node listed outside any superordinate"),
                });
            }
            other => return Err(TaxonomyError::UnknownLevel(other.to_owned())),
        }
    }
    let sups = match obj.get("superordinate") {
        Some(Value::Array(items)) => items,
        Some(_) => return Err(parse_err("`superordinate` must be an array")),
        None => return Err(parse_err("missing `superordinate` list")),
    };

    let mut raw = Vec::new();
    for sup in sups {
        let sup_name = entry_name(sup, "superordinate")?;
        let sup_obj = sup
            .as_object()
            .ok_or_else(|| parse_err(format!("superordinate `{sup_name}` must be an object")))?;
        if let Some(first) = array_at(sup_obj, "subordinate", &sup_name)?.first() {
            return Err(TaxonomyError::LevelSkip {
                name: entry_name(first, "subordinate")?,
                level: Level::Subordinate,
                parent: sup_name,
                parent_level: Level::Superordinate,
            });
        }
        raw.push(RawNode {
            name: sup_name.clone(),
            level: Level::Superordinate,
            parent: None,
        });
        for basic in array_at(sup_obj, "basic", &sup_name)? {
            let basic_name = entry_name(basic, "basic")?;
            let basic_obj = basic
                .as_object()
                .ok_or_else(|| parse_err(format!("basic `{basic_name}` must be an object")))?;
            if let Some(first) = array_at(basic_obj, "basic", &basic_name)?.first() {
                return Err(TaxonomyError::LevelSkip {
                    name: entry_name(first, "basic")?,
                    level: Level::Basic,
                    parent: basic_name,
                    parent_level: Level::Basic,
                });
            }
            raw.push(RawNode {
                name: basic_name.clone(),
                level: Level::Basic,
                parent: Some(sup_name.clone()),
            });
            for sub in array_at(basic_obj, "subordinate", &basic_name)? {
                raw.push(RawNode {
                    name: entry_name(sub, "subordinate")?,
                    level: Level::Subordinate,
                    parent: Some(basic_name.clone()),
                });
            }
        }
    }
    Ok(raw)
}

fn parse_flat(nodes: &Value) -> Result<Vec<RawNode>, TaxonomyError> {
    let items = nodes.as_array().ok_or_else(|| parse_err("`nodes` must be an array"))?;
    items
        .iter()
        .map(|item| {
            let name = entry_name(item, "node")?;
            let level_str = item
                .get("level")
                .and_then(Value::as_str)
                .ok_or_else(|| parse_err(format!("node `{name}` has no `level`")))?;
            let level = Level::parse(level_str).ok_or_else(|| TaxonomyError::UnknownLevel(level_str.to_owned()))?;
            let parent = match item.get("parent") {
                None | Some(Value::Null) => None,
                Some(Value::String(p)) => Some(p.clone()),
                Some(_) => return Err(parse_err(format!("parent of `{name}` must be a string"))),
            };
            Ok(RawNode { name, level, parent })
        })
        .collect()
}

/// Per-level concept names, for reports.
pub fn names_by_level(taxonomy: &Taxonomy) -> BTreeMap<Level, Vec<String>> {
    Level::ALL
        .iter()
        .map(|&l| (l, taxonomy.at_level(l).into_iter().map(|id| taxonomy.name(id).to_owned()).collect()))
        .collect()
}
