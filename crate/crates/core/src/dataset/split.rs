use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::interactions::InteractionDataset;
use crate::error::{Error, Result};

const MANIFEST_VERSION: u32 = 1;

/// Train/validation/test proportions for warm interactions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Known/unknown partition of cold-item interactions for normal cold-start
/// evaluation. Known interactions may be used as graph edges at inference.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NormalColdSplit {
    pub known: Vec<(usize, usize)>,
    pub unknown: Vec<(usize, usize)>,
}

/// Strict cold-start benchmark split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub seed: u64,
    pub user_count: usize,
    pub item_count: usize,
    pub warm_items: Vec<usize>,
    pub cold_items: Vec<usize>,
    pub train: Vec<(usize, usize)>,
    pub warm_val: Vec<(usize, usize)>,
    pub warm_test: Vec<(usize, usize)>,
    pub cold_val_items: Vec<usize>,
    pub cold_test_items: Vec<usize>,
    /// Interactions touching `cold_val_items`.
    pub cold_val: Vec<(usize, usize)>,
    /// Interactions touching `cold_test_items`.
    pub cold_test: Vec<(usize, usize)>,
    pub normal_cold: Option<NormalColdSplit>,
    /// Users left without any training interaction once cold items were
    /// removed. They stay in the index space with empty training rows.
    pub users_without_train: Vec<usize>,
}

impl SplitSpec {
    pub fn is_cold(&self) -> Vec<bool> {
        let mut cold = vec![false; self.item_count];
        for &i in &self.cold_items {
            cold[i] = true;
        }
        cold
    }

    pub fn is_warm(&self) -> Vec<bool> {
        self.is_cold().into_iter().map(|c| !c).collect()
    }
}

fn check_ratios(r: SplitRatios) -> Result<()> {
    let parts = [r.train, r.val, r.test];
    if parts.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::Argument(format!("warm split ratios must be positive, got {r:?}")));
    }
    if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("warm split ratios must sum to 1, got {r:?}")));
    }
    Ok(())
}

/// Number of warm items: `floor((1 - cold_fraction) · n)`. The cold set takes
/// the remainder, which reproduces the published 9,680 / 2,421 partition of
/// 12,101 items.
fn warm_count(n: usize, cold_fraction: f64) -> usize {
    (((1.0 - cold_fraction) * n as f64) + 1e-9).floor() as usize
}

/// Samples cold items uniformly, halves them into validation and test, and
/// splits every user's remaining interactions by `ratios`.
pub fn build_strict_cold_splits(
    ds: &InteractionDataset,
    cold_fraction: f64,
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitSpec> {
    if !(cold_fraction > 0.0 && cold_fraction < 1.0) {
        return Err(Error::Argument(format!("cold fraction must be in (0, 1), got {cold_fraction}")));
    }
    check_ratios(ratios)?;
    let n_items = ds.item_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng);
    let n_warm = warm_count(n_items, cold_fraction);
    let mut cold_items = order[n_warm..].to_vec();
    let mut warm_items = order[..n_warm].to_vec();
    let n_cold_val = cold_items.len() / 2;
    let mut cold_val_items = cold_items[..n_cold_val].to_vec();
    let mut cold_test_items = cold_items[n_cold_val..].to_vec();
    warm_items.sort_unstable();
    cold_items.sort_unstable();
    cold_val_items.sort_unstable();
    cold_test_items.sort_unstable();

    let mut role = vec![0u8; n_items]; // 0 warm, 1 cold val, 2 cold test
    for &i in &cold_val_items {
        role[i] = 1;
    }
    for &i in &cold_test_items {
        role[i] = 2;
    }

    let mut train = Vec::new();
    let mut warm_val = Vec::new();
    let mut warm_test = Vec::new();
    let mut cold_val = Vec::new();
    let mut cold_test = Vec::new();
    let mut users_without_train = Vec::new();

    for (u, items) in ds.user_items().into_iter().enumerate() {
        let mut warm: Vec<usize> = Vec::new();
        for i in items {
            match role[i] {
                0 => warm.push(i),
                1 => cold_val.push((u, i)),
                _ => cold_test.push((u, i)),
            }
        }
        warm.shuffle(&mut rng);
        let n = warm.len();
        let (n_val, n_test) = if n < 3 {
            (0, 0)
        } else {
            let v = ((n as f64 * ratios.val).round() as usize).max(1);
            let t = ((n as f64 * ratios.test).round() as usize).max(1);
            (v, t.min(n - v - 1))
        };
        let n_train = n - n_val - n_test;
        if n_train == 0 {
            users_without_train.push(u);
        }
        train.extend(warm[..n_train].iter().map(|&i| (u, i)));
        warm_val.extend(warm[n_train..n_train + n_val].iter().map(|&i| (u, i)));
        warm_test.extend(warm[n_train + n_val..].iter().map(|&i| (u, i)));
    }
    if !users_without_train.is_empty() {
        log::warn!(
            "{} users have no warm training interactions after cold-item removal",
            users_without_train.len()
        );
    }
    for part in [&mut train, &mut warm_val, &mut warm_test, &mut cold_val, &mut cold_test] {
        part.sort_unstable();
    }

    Ok(SplitSpec {
        seed,
        user_count: ds.user_count(),
        item_count: n_items,
        warm_items,
        cold_items,
        train,
        warm_val,
        warm_test,
        cold_val_items,
        cold_test_items,
        cold_val,
        cold_test,
        normal_cold: None,
        users_without_train,
    })
}

/// Splits each cold item's interactions 1:1 into known and unknown sets.
/// Odd counts give the extra interaction to the unknown (target) side, so an
/// item with a single interaction contributes only a target.
pub fn build_normal_cold_splits(split: &SplitSpec, seed: u64) -> Result<SplitSpec> {
    if split.cold_val_items.is_empty() && split.cold_test_items.is_empty() {
        return Err(Error::Argument("split has no cold evaluation items".into()));
    }
    let mut per_item: Vec<Vec<usize>> = vec![Vec::new(); split.item_count];
    for &(u, i) in split.cold_val.iter().chain(&split.cold_test) {
        per_item[i].push(u);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = NormalColdSplit::default();
    for &i in &split.cold_items {
        let users = &mut per_item[i];
        users.shuffle(&mut rng);
        let n_known = users.len() / 2;
        out.known.extend(users[..n_known].iter().map(|&u| (u, i)));
        out.unknown.extend(users[n_known..].iter().map(|&u| (u, i)));
    }
    out.known.sort_unstable();
    out.unknown.sort_unstable();
    let mut next = split.clone();
    next.normal_cold = Some(out);
    Ok(next)
}

fn push_items(out: &mut String, name: &str, items: &[usize]) {
    let _ = writeln!(out, "section {name} {}", items.len());
    for &i in items {
        let _ = writeln!(out, "{i}");
    }
}

fn push_pairs(out: &mut String, name: &str, pairs: &[(usize, usize)]) {
    let _ = writeln!(out, "section {name} {}", pairs.len());
    for &(u, i) in pairs {
        let _ = writeln!(out, "{u} {i}");
    }
}

/// Serializes a split as a versioned text manifest.
pub fn write_split_manifest(split: &SplitSpec, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "split-manifest {MANIFEST_VERSION}");
    let _ = writeln!(out, "seed {}", split.seed);
    let _ = writeln!(out, "users {}", split.user_count);
    let _ = writeln!(out, "items {}", split.item_count);
    push_items(&mut out, "warm_items", &split.warm_items);
    push_items(&mut out, "cold_val_items", &split.cold_val_items);
    push_items(&mut out, "cold_test_items", &split.cold_test_items);
    push_pairs(&mut out, "train", &split.train);
    push_pairs(&mut out, "warm_val", &split.warm_val);
    push_pairs(&mut out, "warm_test", &split.warm_test);
    push_pairs(&mut out, "cold_val", &split.cold_val);
    push_pairs(&mut out, "cold_test", &split.cold_test);
    push_items(&mut out, "users_without_train", &split.users_without_train);
    if let Some(nc) = &split.normal_cold {
        push_pairs(&mut out, "known_cold", &nc.known);
        push_pairs(&mut out, "unknown_cold", &nc.unknown);
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_split_manifest(path: &Path) -> Result<SplitSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines().enumerate().map(|(n, l)| (n + 1, l));
    let err = |line: usize, msg: &str| Error::parse(path, line, msg.to_owned());

    let mut header = |key: &str| -> Result<u64> {
        let (n, line) = lines.next().ok_or_else(|| err(0, "truncated manifest header"))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(err(n, &format!("expected `{key}`")));
        }
        parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(n, &format!("bad value for `{key}`")))
    };
    let version = header("split-manifest")?;
    if version != MANIFEST_VERSION as u64 {
        return Err(err(1, &format!("unsupported manifest version {version}")));
    }
    let seed = header("seed")?;
    let user_count = header("users")? as usize;
    let item_count = header("items")? as usize;

    let mut items: std::collections::HashMap<String, Vec<usize>> = Default::default();
    let mut pairs: std::collections::HashMap<String, Vec<(usize, usize)>> = Default::default();
    while let Some((n, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("section") {
            return Err(err(n, "expected a section header"));
        }
        let name = parts.next().ok_or_else(|| err(n, "missing section name"))?.to_owned();
        let count: usize = parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| err(n, "missing section length"))?;
        let is_pairs = !name.ends_with("_items") && name != "users_without_train";
        let mut item_list = Vec::with_capacity(count);
        let mut pair_list = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = lines.next().ok_or_else(|| err(0, "truncated section"))?;
            let vals: Vec<usize> = line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| err(n, "bad index")))
                .collect::<Result<_>>()?;
            match (is_pairs, vals.as_slice()) {
                (true, &[u, i]) if u < user_count && i < item_count => pair_list.push((u, i)),
                (false, &[i]) if i < item_count.max(user_count) => item_list.push(i),
                _ => return Err(err(n, "malformed or out-of-range entry")),
            }
        }
        if is_pairs {
            pairs.insert(name, pair_list);
        } else {
            items.insert(name, item_list);
        }
    }
    let mut take_items = |k: &str| items.remove(k).ok_or_else(|| err(0, &format!("missing section {k}")));
    let warm_items = take_items("warm_items")?;
    let cold_val_items = take_items("cold_val_items")?;
    let cold_test_items = take_items("cold_test_items")?;
    let users_without_train = take_items("users_without_train")?;
    let mut take_pairs = |k: &str| pairs.remove(k).ok_or_else(|| err(0, &format!("missing section {k}")));
    let train = take_pairs("train")?;
    let warm_val = take_pairs("warm_val")?;
    let warm_test = take_pairs("warm_test")?;
    let cold_val = take_pairs("cold_val")?;
    let cold_test = take_pairs("cold_test")?;
    let normal_cold = match (take_pairs("known_cold"), take_pairs("unknown_cold")) {
        (Ok(known), Ok(unknown)) => Some(NormalColdSplit { known, unknown }),
        _ => None,
    };
    let mut cold_items: Vec<usize> = cold_val_items.iter().chain(&cold_test_items).copied().collect();
    cold_items.sort_unstable();
    Ok(SplitSpec {
        seed,
        user_count,
        item_count,
        warm_items,
        cold_items,
        train,
        warm_val,
        warm_test,
        cold_val_items,
        cold_test_items,
        cold_val,
        cold_test,
        normal_cold,
        users_without_train,
    })
}
