use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use super::vocab::Vocab;
use crate::error::{Error, Result};

/// Relation vocabulary registered on every constructed graph, in index order.
pub const RELATION_NAMES: [&str; 6] = [
    "described_by",
    "belongs_to",
    "produced_by",
    "also_bought",
    "also_viewed",
    "bought_together",
];

const DESCRIBED_BY: usize = 0;
const BELONGS_TO: usize = 1;
const PRODUCED_BY: usize = 2;
const ALSO_BOUGHT: usize = 3;
const ALSO_VIEWED: usize = 4;
const BOUGHT_TOGETHER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntityType {
    Item,
    Brand,
    Category,
    Word,
    External,
}

impl EntityType {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Item => "item",
            EntityType::Brand => "brand",
            EntityType::Category => "category",
            EntityType::Word => "word",
            EntityType::External => "external",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "item" => EntityType::Item,
            "brand" => EntityType::Brand,
            "category" => EntityType::Category,
            "word" => EntityType::Word,
            "external" => EntityType::External,
            other => return Err(Error::Argument(format!("unknown entity type `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self { head, relation, tail }
    }
}

/// Item knowledge graph. Item `i` of the interaction data is aligned to
/// entity `item_alignment[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    pub entities: Vocab,
    pub entity_types: Vec<EntityType>,
    pub relations: Vocab,
    pub triples: Vec<Triple>,
    pub item_alignment: Vec<usize>,
}

impl KnowledgeGraph {
    /// An empty graph holding one entity per item (entity index = item
    /// index) and the standard relation vocabulary.
    pub fn with_items(items: &Vocab) -> Self {
        let mut kg = Self {
            entities: Vocab::new(),
            entity_types: Vec::new(),
            relations: Vocab::from_names(RELATION_NAMES),
            triples: Vec::new(),
            item_alignment: Vec::with_capacity(items.len()),
        };
        for name in items.names() {
            let e = kg.add_entity(name, EntityType::Item);
            kg.item_alignment.push(e);
        }
        kg
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_alignment.len()
    }

    /// Returns the entity named `name`, creating it with type `ty` if absent.
    pub fn add_entity(&mut self, name: &str, ty: EntityType) -> usize {
        let e = self.entities.intern(name);
        if e == self.entity_types.len() {
            self.entity_types.push(ty);
        }
        e
    }

    pub fn entities_of_type(&self, ty: EntityType) -> Vec<usize> {
        (0..self.entity_count()).filter(|&e| self.entity_types[e] == ty).collect()
    }

    /// Checks index ranges and alignment uniqueness.
    pub fn validate(&self) -> Result<()> {
        let n = self.entity_count();
        if self.entity_types.len() != n {
            return Err(Error::Alignment("entity type table length mismatch".into()));
        }
        for t in &self.triples {
            if t.head >= n || t.tail >= n || t.relation >= self.relation_count() {
                return Err(Error::Alignment(format!("triple {t:?} references unknown indices")));
            }
        }
        let mut seen = HashSet::new();
        for (i, &e) in self.item_alignment.iter().enumerate() {
            if e >= n || self.entity_types[e] != EntityType::Item || !seen.insert(e) {
                return Err(Error::Alignment(format!("item {i} has an invalid entity alignment")));
            }
        }
        Ok(())
    }
}

/// One JSON-lines metadata record. Missing fields are allowed.
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(default)]
pub struct ItemMetadata {
    pub item: String,
    pub brand: Option<String>,
    pub categories: Vec<String>,
    pub description: Option<String>,
    pub also_bought: Vec<String>,
    pub also_viewed: Vec<String>,
    pub bought_together: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KgBuildOptions {
    /// Inclusive bounds on a word's total corpus frequency.
    pub word_freq_bounds: (usize, usize),
    /// A word is kept only if its mean TF-IDF over containing documents is
    /// strictly greater than this.
    pub tfidf_threshold: f64,
}

impl Default for KgBuildOptions {
    fn default() -> Self {
        Self {
            word_freq_bounds: (10, 1000),
            tfidf_threshold: 0.1,
        }
    }
}

pub fn load_metadata(path: &Path) -> Result<Vec<ItemMetadata>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemMetadata =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Words whose corpus frequency lies within the bounds and whose TF-IDF
/// (raw count × ln(N / df)), averaged over the documents containing the word,
/// exceeds the threshold. N counts items with a description.
fn qualifying_words(docs: &[Vec<String>], opts: &KgBuildOptions) -> HashSet<String> {
    let n_docs = docs.len() as f64;
    let mut freq: HashMap<&str, usize> = HashMap::new();
    let mut df: HashMap<&str, usize> = HashMap::new();
    let mut tf_sum: HashMap<&str, f64> = HashMap::new();
    for doc in docs {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in doc {
            *counts.entry(w.as_str()).or_default() += 1;
        }
        for (w, c) in counts {
            *freq.entry(w).or_default() += c;
            *df.entry(w).or_default() += 1;
            *tf_sum.entry(w).or_default() += c as f64;
        }
    }
    let (lo, hi) = opts.word_freq_bounds;
    freq.into_iter()
        .filter(|&(w, f)| {
            let d = df[w] as f64;
            let mean_tfidf = tf_sum[w] / d * (n_docs / d).ln();
            f >= lo && f <= hi && mean_tfidf > opts.tfidf_threshold
        })
        .map(|(w, _)| w.to_owned())
        .collect()
}

/// Builds the item knowledge graph from per-item metadata.
///
/// Co-purchase lists point at other catalog items when the id is known and
/// at `external:` entities otherwise. Items without metadata keep their
/// entity but get no triples.
pub fn construct_kg_from_metadata(
    items: &Vocab,
    metadata: &[ItemMetadata],
    opts: &KgBuildOptions,
) -> Result<KnowledgeGraph> {
    if opts.word_freq_bounds.0 > opts.word_freq_bounds.1 {
        return Err(Error::Argument("word frequency bounds are inverted".into()));
    }
    let mut by_item: Vec<Option<&ItemMetadata>> = vec![None; items.len()];
    for rec in metadata {
        match items.get(&rec.item) {
            Some(i) => by_item[i] = Some(rec),
            None => log::debug!("metadata for unknown item `{}` ignored", rec.item),
        }
    }
    let docs: Vec<Vec<String>> = by_item
        .iter()
        .filter_map(|m| m.and_then(|m| m.description.as_deref()).map(tokenize))
        .collect();
    let words = qualifying_words(&docs, opts);

    let mut kg = KnowledgeGraph::with_items(items);
    let mut seen = HashSet::new();
    let mut missing = 0usize;
    for (i, rec) in by_item.iter().enumerate() {
        let Some(rec) = rec else {
            missing += 1;
            continue;
        };
        let head = kg.item_alignment[i];
        let mut emit = |kg: &mut KnowledgeGraph, relation: usize, tail: usize| {
            let t = Triple::new(head, relation, tail);
            if seen.insert(t) {
                kg.triples.push(t);
            }
        };
        if let Some(desc) = &rec.description {
            for w in tokenize(desc) {
                if words.contains(&w) {
                    let e = kg.add_entity(&format!("word:{w}"), EntityType::Word);
                    emit(&mut kg, DESCRIBED_BY, e);
                }
            }
        }
        for c in &rec.categories {
            let e = kg.add_entity(&format!("category:{c}"), EntityType::Category);
            emit(&mut kg, BELONGS_TO, e);
        }
        if let Some(b) = &rec.brand {
            let e = kg.add_entity(&format!("brand:{b}"), EntityType::Brand);
            emit(&mut kg, PRODUCED_BY, e);
        }
        for (relation, list) in [
            (ALSO_BOUGHT, &rec.also_bought),
            (ALSO_VIEWED, &rec.also_viewed),
            (BOUGHT_TOGETHER, &rec.bought_together),
        ] {
            for other in list {
                let e = match items.get(other) {
                    Some(j) => kg.item_alignment[j],
                    None => kg.add_entity(&format!("external:{other}"), EntityType::External),
                };
                emit(&mut kg, relation, e);
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} items have no metadata and carry no knowledge triples");
    }
    Ok(kg)
}

/// Writes `kg_entities.tsv` (`name<TAB>type`) and `kg_triples.tsv`
/// (`head<TAB>relation<TAB>tail`, by name).
pub fn write_kg(kg: &KnowledgeGraph, entities_path: &Path, triples_path: &Path) -> Result<()> {
    let write = |path: &Path, body: &mut dyn FnMut(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
        let ctx = || format!("writing {}", path.display());
        let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
        let mut w = BufWriter::new(file);
        body(&mut w).map_err(|e| Error::io(ctx(), e))?;
        w.flush().map_err(|e| Error::io(ctx(), e))
    };
    write(entities_path, &mut |w| {
        for (e, name) in kg.entities.names().iter().enumerate() {
            writeln!(w, "{name}\t{}", kg.entity_types[e])?;
        }
        Ok(())
    })?;
    write(triples_path, &mut |w| {
        for t in &kg.triples {
            writeln!(
                w,
                "{}\t{}\t{}",
                kg.entities.name(t.head),
                kg.relations.name(t.relation),
                kg.entities.name(t.tail)
            )?;
        }
        Ok(())
    })
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if !line.trim().is_empty() {
            out.push((n + 1, line));
        }
    }
    Ok(out)
}

/// Loads a graph written by [`write_kg`], aligning `items` by name. Triples
/// are kept verbatim, duplicates included.
pub fn load_kg(entities_path: &Path, triples_path: &Path, items: &Vocab) -> Result<KnowledgeGraph> {
    let mut kg = KnowledgeGraph::with_items(items);
    for (n, line) in read_lines(entities_path)? {
        let (name, ty) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(entities_path, n, "expected `name<TAB>type`"))?;
        let ty: EntityType = ty.trim().parse().map_err(|e: Error| Error::parse(entities_path, n, e.to_string()))?;
        let before = kg.entity_count();
        let e = kg.add_entity(name, ty);
        if e < before && kg.entity_types[e] != ty {
            return Err(Error::parse(entities_path, n, format!("entity `{name}` has conflicting types")));
        }
        if ty == EntityType::Item && items.get(name).is_none() {
            return Err(Error::parse(entities_path, n, format!("item entity `{name}` is not in the catalog")));
        }
    }
    for (n, line) in read_lines(triples_path)? {
        let parts: Vec<&str> = line.split('\t').collect();
        let &[h, r, t] = parts.as_slice() else {
            return Err(Error::parse(triples_path, n, "expected `head<TAB>relation<TAB>tail`"));
        };
        let lookup = |name: &str| {
            kg.entities
                .get(name)
                .ok_or_else(|| Error::parse(triples_path, n, format!("unknown entity `{name}`")))
        };
        let (head, tail) = (lookup(h)?, lookup(t)?);
        let relation = kg.relations.intern(r);
        kg.triples.push(Triple::new(head, relation, tail));
    }
    kg.validate()?;
    Ok(kg)
}
