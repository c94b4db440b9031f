use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::vocab::Vocab;
use crate::error::{Error, Result};

/// Implicit-feedback interactions with dense user and item indices.
///
/// Interactions are kept sorted by `(user, item)` with no duplicates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    pub users: Vocab,
    pub items: Vocab,
    interactions: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InteractionFormat {
    /// `user<TAB>item[<TAB>timestamp]`
    Tsv,
    /// `user,item[,timestamp]`
    Csv,
}

impl InteractionFormat {
    fn separator(self) -> char {
        match self {
            InteractionFormat::Tsv => '\t',
            InteractionFormat::Csv => ',',
        }
    }
}

impl InteractionDataset {
    /// Builds a dataset from raw id pairs, assigning indices in order of
    /// first appearance and collapsing duplicates.
    pub fn from_raw_pairs<I, U, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (U, V)>,
        U: Into<String>,
        V: Into<String>,
    {
        let mut users = Vocab::new();
        let mut items = Vocab::new();
        let interactions = pairs
            .into_iter()
            .map(|(u, i)| (users.intern(u), items.intern(i)))
            .collect();
        Self::from_vocabs(users, items, interactions)
    }

    /// Builds a dataset over already-indexed pairs with generated raw ids
    /// `u{index}` / `i{index}`.
    pub fn from_indexed(user_count: usize, item_count: usize, pairs: Vec<(usize, usize)>) -> Self {
        let users = Vocab::from_names((0..user_count).map(|u| format!("u{u}")));
        let items = Vocab::from_names((0..item_count).map(|i| format!("i{i}")));
        Self::from_vocabs(users, items, pairs)
    }

    /// Builds a dataset over fixed vocabularies and indexed pairs.
    pub fn from_vocabs(users: Vocab, items: Vocab, mut interactions: Vec<(usize, usize)>) -> Self {
        interactions.sort_unstable();
        interactions.dedup();
        debug_assert!(interactions
            .iter()
            .all(|&(u, i)| u < users.len() && i < items.len()));
        Self {
            users,
            items,
            interactions,
        }
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn interactions(&self) -> &[(usize, usize)] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn user_items(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.user_count()];
        for &(u, i) in &self.interactions {
            out[u].push(i);
        }
        out
    }

    pub fn item_users(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.item_count()];
        for &(u, i) in &self.interactions {
            out[i].push(u);
        }
        out
    }

    /// Fraction of empty cells in the user×item matrix.
    pub fn sparsity(&self) -> f64 {
        let cells = (self.user_count() * self.item_count()) as f64;
        if cells == 0.0 {
            return 1.0;
        }
        1.0 - self.len() as f64 / cells
    }

    /// Keeps the interactions accepted by `keep` and re-densifies both index
    /// spaces, preserving the relative order of surviving ids.
    fn retain(&self, mut keep: impl FnMut(usize, usize) -> bool) -> Self {
        let pairs: Vec<(String, String)> = self
            .interactions
            .iter()
            .filter(|&&(u, i)| keep(u, i))
            .map(|&(u, i)| (self.users.name(u).to_owned(), self.items.name(i).to_owned()))
            .collect();
        // Re-intern in the original index order so relative order is stable.
        let mut alive_users = vec![false; self.user_count()];
        let mut alive_items = vec![false; self.item_count()];
        for (u, i) in &pairs {
            alive_users[self.users.get(u).unwrap()] = true;
            alive_items[self.items.get(i).unwrap()] = true;
        }
        let users = Vocab::from_names(
            (0..self.user_count())
                .filter(|&u| alive_users[u])
                .map(|u| self.users.name(u).to_owned()),
        );
        let items = Vocab::from_names(
            (0..self.item_count())
                .filter(|&i| alive_items[i])
                .map(|i| self.items.name(i).to_owned()),
        );
        let interactions = pairs
            .iter()
            .map(|(u, i)| (users.get(u).unwrap(), items.get(i).unwrap()))
            .collect();
        Self::from_vocabs(users, items, interactions)
    }
}

/// Parses interaction records from a reader. `source` labels errors.
pub fn parse_interactions<R: BufRead>(
    reader: R,
    format: InteractionFormat,
    source: &Path,
) -> Result<InteractionDataset> {
    let sep = format.separator();
    let mut pairs = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", source.display()), e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(sep).map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::parse(
                source,
                line_no,
                format!("expected 2 or 3 fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(source, line_no, "empty user or item id"));
        }
        if let Some(ts) = fields.get(2) {
            if ts.parse::<f64>().is_err() {
                return Err(Error::parse(source, line_no, format!("bad timestamp {ts:?}")));
            }
        }
        pairs.push((fields[0].to_owned(), fields[1].to_owned()));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no interaction records", source.display())));
    }
    Ok(InteractionDataset::from_raw_pairs(pairs))
}

pub fn load_interactions(path: &Path, format: InteractionFormat) -> Result<InteractionDataset> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    parse_interactions(BufReader::new(file), format, path)
}

/// Writes `user<TAB>item` lines in index order.
pub fn write_interactions(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    for &(u, i) in ds.interactions() {
        writeln!(w, "{}\t{}", ds.users.name(u), ds.items.name(i)).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Drops users with fewer than `k` interactions so that every
/// remaining user has at least `k`. Items are never filtered by degree; an
/// item disappears only when none of its users survive.
pub fn k_core_filter(ds: &InteractionDataset, k: usize) -> Result<InteractionDataset> {
    if k == 0 {
        return Err(Error::Argument("k-core threshold must be at least 1".into()));
    }
    let mut degree = vec![0usize; ds.user_count()];
    for &(u, _) in ds.interactions() {
        degree[u] += 1;
    }
    // Only users are filtered, and a user's degree never depends on which
    // other users survive, so a single pass is already the fixed point.
    let alive: Vec<bool> = degree.iter().map(|&d| d >= k).collect();
    let out = ds.retain(|u, _| alive[u]);
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!("no user has at least {k} interactions")));
    }
    Ok(out)
}
