use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kg::{EntityType, KnowledgeGraph, Triple};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// Sampled `(h, r)` pairs pointing at brand-new entities.
    Outlier,
    /// Exact copies of sampled triples.
    Duplicate,
    /// Sampled triples with the tail swapped for another entity of the same type.
    Discrepancy,
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::Outlier => "outlier",
            NoiseMode::Duplicate => "duplicate",
            NoiseMode::Discrepancy => "discrepancy",
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outlier" => Ok(NoiseMode::Outlier),
            "duplicate" => Ok(NoiseMode::Duplicate),
            "discrepancy" => Ok(NoiseMode::Discrepancy),
            other => Err(Error::Argument(format!("unknown noise mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseReport {
    pub mode: NoiseMode,
    pub added: usize,
    pub new_entities: usize,
    /// Sampled triples whose tail type had no alternative entity.
    pub skipped: usize,
}

/// Appends `round(fraction · |triples|)` noisy triples to a copy of `kg`.
pub fn inject_kg_noise(
    kg: &KnowledgeGraph,
    mode: NoiseMode,
    fraction: f64,
    seed: u64,
) -> Result<(KnowledgeGraph, NoiseReport)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("noise fraction must be in (0, 1], got {fraction}")));
    }
    let n = kg.triples.len();
    if n == 0 {
        return Err(Error::EmptyDataset("knowledge graph has no triples to perturb".into()));
    }
    let count = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = kg.clone();
    let mut report = NoiseReport {
        mode,
        added: 0,
        new_entities: 0,
        skipped: 0,
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    match mode {
        NoiseMode::Outlier => {
            for (k, &t) in order.iter().cycle().take(count).enumerate() {
                let src = kg.triples[t];
                let e = out.add_entity(&format!("noise:{seed}:{k}"), EntityType::External);
                out.triples.push(Triple::new(src.head, src.relation, e));
                report.new_entities += 1;
            }
        }
        NoiseMode::Duplicate => {
            // count ≤ n, so every duplicated triple is copied exactly once.
            for &t in &order[..count] {
                out.triples.push(kg.triples[t]);
            }
        }
        NoiseMode::Discrepancy => {
            let mut by_type: std::collections::HashMap<EntityType, Vec<usize>> = Default::default();
            for (e, &ty) in kg.entity_types.iter().enumerate() {
                by_type.entry(ty).or_default().push(e);
            }
            let eligible =
                |t: &Triple| by_type.get(&kg.entity_types[t.tail]).is_some_and(|v| v.len() > 1);
            if !kg.triples.iter().any(eligible) {
                return Err(Error::Argument(
                    "discrepancy noise needs at least one tail type with two entities".into(),
                ));
            }
            let mut cursor = order.iter().cycle();
            while report.added < count {
                let src = kg.triples[*cursor.next().expect("cycle is infinite")];
                if !eligible(&src) {
                    report.skipped += 1;
                    continue;
                }
                let pool = &by_type[&kg.entity_types[src.tail]];
                let tail = loop {
                    let c = pool[rng.gen_range(0..pool.len())];
                    if c != src.tail {
                        break c;
                    }
                };
                out.triples.push(Triple::new(src.head, src.relation, tail));
                report.added += 1;
            }
            if report.skipped > 0 {
                log::info!("discrepancy noise skipped {} triples without same-type alternatives", report.skipped);
            }
        }
    }
    report.added = out.triples.len() - n;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Vocab;
    use proptest::prelude::{prop_assert_eq, proptest};
    use std::collections::HashMap;

    fn toy(n_items: usize, n_triples: usize, seed: u64) -> KnowledgeGraph {
        let items = Vocab::from_names((0..n_items).map(|i| format!("i{i}")));
        let mut kg = KnowledgeGraph::with_items(&items);
        let brands: Vec<usize> = (0..3).map(|b| kg.add_entity(&format!("brand:{b}"), EntityType::Brand)).collect();
        let cats: Vec<usize> = (0..2).map(|c| kg.add_entity(&format!("category:{c}"), EntityType::Category)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        while kg.triples.len() < n_triples {
            let h = rng.gen_range(0..n_items);
            let t = match rng.gen_range(0..3) {
                0 => Triple::new(h, 2, brands[rng.gen_range(0..3)]),
                1 => Triple::new(h, 1, cats[rng.gen_range(0..2)]),
                _ => Triple::new(h, 3, rng.gen_range(0..n_items)),
            };
            if seen.insert(t) {
                kg.triples.push(t);
            }
        }
        kg
    }

    #[test]
    fn outlier_adds_fresh_entities() {
        let kg = toy(60, 100, 1);
        let (out, rep) = inject_kg_noise(&kg, NoiseMode::Outlier, 0.2, 3).unwrap();
        assert_eq!(out.triples.len(), 120);
        assert_eq!(out.entity_count(), kg.entity_count() + 20);
        assert_eq!(rep.new_entities, 20);
        for t in &out.triples[100..] {
            assert!(t.tail >= kg.entity_count());
        }
        out.validate().unwrap();
    }

    #[test]
    fn duplicate_counts_are_two() {
        let kg = toy(60, 100, 2);
        let (out, _) = inject_kg_noise(&kg, NoiseMode::Duplicate, 0.2, 4).unwrap();
        let mut counts: HashMap<Triple, usize> = HashMap::new();
        for t in &out.triples {
            *counts.entry(*t).or_default() += 1;
        }
        for t in &out.triples[100..] {
            assert_eq!(counts[t], 2);
        }
        assert_eq!(counts.values().filter(|&&c| c == 2).count(), 20);
    }

    #[test]
    fn discrepancy_keeps_tail_type() {
        let kg = toy(60, 100, 3);
        let (out, _) = inject_kg_noise(&kg, NoiseMode::Discrepancy, 0.2, 5).unwrap();
        assert_eq!(out.triples.len(), 120);
        for t in &out.triples[100..] {
            // Find an original with the same head and relation and a same-type tail.
            let ty = kg.entity_types[t.tail];
            assert!(kg
                .triples
                .iter()
                .any(|o| o.head == t.head && o.relation == t.relation && o.tail != t.tail && kg.entity_types[o.tail] == ty));
        }
    }

    #[test]
    fn discrepancy_skips_singleton_types() {
        let items = Vocab::from_names(["a", "b"]);
        let mut kg = KnowledgeGraph::with_items(&items);
        let brand = kg.add_entity("brand:x", EntityType::Brand);
        kg.triples = vec![Triple::new(0, 2, brand), Triple::new(1, 2, brand), Triple::new(0, 3, 1)];
        let (out, rep) = inject_kg_noise(&kg, NoiseMode::Discrepancy, 1.0, 0).unwrap();
        assert_eq!(out.triples.len(), 6);
        assert!(rep.skipped > 0);
        for t in &out.triples[3..] {
            assert_eq!(kg.entity_types[t.tail], EntityType::Item);
        }

        kg.triples.pop();
        assert!(inject_kg_noise(&kg, NoiseMode::Discrepancy, 0.5, 0).is_err());
    }

    #[test]
    fn fraction_is_validated() {
        let kg = toy(10, 10, 0);
        assert!(inject_kg_noise(&kg, NoiseMode::Duplicate, 0.0, 0).is_err());
        assert!(inject_kg_noise(&kg, NoiseMode::Duplicate, 1.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn cardinality_and_determinism(n in 5usize..80, frac in 0.01f64..=1.0, seed in 0u64..1000, mode in 0usize..3) {
            let mode = [NoiseMode::Outlier, NoiseMode::Duplicate, NoiseMode::Discrepancy][mode];
            let kg = toy(30, n, seed);
            let (a, rep) = inject_kg_noise(&kg, mode, frac, seed).unwrap();
            let expected = (frac * n as f64).round() as usize;
            prop_assert_eq!(a.triples.len(), n + expected);
            prop_assert_eq!(rep.added, expected);
            let (b, _) = inject_kg_noise(&kg, mode, frac, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
