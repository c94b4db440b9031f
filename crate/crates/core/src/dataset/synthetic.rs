use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::features::{FeatureMatrix, Modality};
use super::interactions::InteractionDataset;
use super::kg::{EntityType, KnowledgeGraph, Triple};
use crate::error::{Error, Result};

/// Parameters of the clustered synthetic benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    /// Mean number of interactions per user.
    pub interactions_per_user: usize,
    /// Every user must end with at least this many distinct interactions.
    pub min_user_interactions: usize,
    /// Probability that an interaction falls in the user's preferred cluster.
    pub preference: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Standard deviation of item features around their cluster centroid.
    pub feature_noise: f64,
    /// Probability that a brand or word link points at the item's own cluster.
    pub kg_fidelity: f64,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 300,
            items: 150,
            clusters: 6,
            interactions_per_user: 12,
            min_user_interactions: 5,
            preference: 0.9,
            text_dim: 32,
            image_dim: 48,
            feature_noise: 0.8,
            kg_fidelity: 0.9,
            seed: 7,
            max_retries: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: InteractionDataset,
    pub kg: KnowledgeGraph,
    pub text: FeatureMatrix,
    pub image: FeatureMatrix,
    pub item_clusters: Vec<usize>,
    pub user_clusters: Vec<usize>,
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    let bad = |m: &str| Err(Error::Argument(format!("synthetic spec: {m}")));
    if spec.users == 0 || spec.items == 0 || spec.clusters == 0 {
        return bad("users, items and clusters must be positive");
    }
    if spec.clusters > spec.items {
        return bad("more clusters than items");
    }
    if spec.text_dim == 0 || spec.image_dim == 0 {
        return bad("feature dimensions must be positive");
    }
    if !(0.0..=1.0).contains(&spec.preference) || !(0.0..=1.0).contains(&spec.kg_fidelity) {
        return bad("probabilities must lie in [0, 1]");
    }
    if spec.min_user_interactions > spec.items {
        return bad("min_user_interactions exceeds the item count");
    }
    Ok(())
}

fn features(
    rng: &mut ChaCha8Rng,
    clusters: &[usize],
    n_clusters: usize,
    dim: usize,
    noise: f64,
    modality: Modality,
) -> FeatureMatrix {
    let centroids = Array2::<f64>::from_shape_fn((n_clusters, dim), |_| StandardNormal.sample(rng));
    let mut values = Array2::<f64>::zeros((clusters.len(), dim));
    for (i, &c) in clusters.iter().enumerate() {
        for d in 0..dim {
            let eps: f64 = StandardNormal.sample(rng);
            values[[i, d]] = centroids[[c, d]] + noise * eps;
        }
    }
    FeatureMatrix { modality, values }
}

fn sample_interactions(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    members: &[Vec<usize>],
    user_clusters: &[usize],
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let lo = spec.min_user_interactions.max(1);
    let hi = (2 * spec.interactions_per_user).saturating_sub(lo).max(lo);
    for (u, &c) in user_clusters.iter().enumerate() {
        let n = rng.gen_range(lo..=hi);
        let mut picked: Vec<usize> = Vec::with_capacity(n);
        for _ in 0..20 * n {
            if picked.len() == n {
                break;
            }
            let i = if rng.gen_bool(spec.preference) {
                *members[c].choose(rng).expect("clusters are nonempty")
            } else {
                rng.gen_range(0..spec.items)
            };
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
        pairs.extend(picked.into_iter().map(|i| (u, i)));
    }
    pairs
}

/// Generates clustered users, items, features and an item knowledge graph.
///
/// Items are split evenly into clusters. Users draw most interactions from
/// one preferred cluster, features scatter around per-cluster centroids, and
/// the knowledge graph ties items to cluster-level categories, brands and
/// words, so content alone predicts which users like a held-out item.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut item_clusters: Vec<usize> = (0..spec.items).map(|i| i % spec.clusters).collect();
    item_clusters.shuffle(&mut rng);
    let mut members = vec![Vec::new(); spec.clusters];
    for (i, &c) in item_clusters.iter().enumerate() {
        members[c].push(i);
    }
    let user_clusters: Vec<usize> = (0..spec.users).map(|_| rng.gen_range(0..spec.clusters)).collect();

    let mut dataset = None;
    for attempt in 0..=spec.max_retries {
        let mut pairs = sample_interactions(&mut rng, spec, &members, &user_clusters);
        // Every item gets at least one interaction from a user of its cluster
        // (or any user if the cluster has no fans).
        let mut seen = vec![false; spec.items];
        for &(_, i) in &pairs {
            seen[i] = true;
        }
        for i in (0..spec.items).filter(|&i| !seen[i]) {
            let fans: Vec<usize> = (0..spec.users).filter(|&u| user_clusters[u] == item_clusters[i]).collect();
            let u = fans.choose(&mut rng).copied().unwrap_or_else(|| rng.gen_range(0..spec.users));
            pairs.push((u, i));
        }
        let ds = InteractionDataset::from_indexed(spec.users, spec.items, pairs);
        let short = ds
            .user_items()
            .iter()
            .filter(|items| items.len() < spec.min_user_interactions)
            .count();
        if short == 0 {
            dataset = Some(ds);
            break;
        }
        log::debug!("synthetic attempt {attempt}: {short} users below the interaction floor");
    }
    let dataset = dataset.ok_or_else(|| {
        Error::Argument(format!(
            "synthetic spec could not give every user {} interactions in {} attempts",
            spec.min_user_interactions,
            spec.max_retries + 1
        ))
    })?;

    let text = features(&mut rng, &item_clusters, spec.clusters, spec.text_dim, spec.feature_noise, Modality::Text);
    let image = features(
        &mut rng,
        &item_clusters,
        spec.clusters,
        spec.image_dim,
        spec.feature_noise * 1.25,
        Modality::Image,
    );

    let mut kg = KnowledgeGraph::with_items(&dataset.items);
    let categories: Vec<usize> = (0..spec.clusters)
        .map(|c| kg.add_entity(&format!("category:c{c}"), EntityType::Category))
        .collect();
    let brands: Vec<usize> = (0..2 * spec.clusters)
        .map(|b| kg.add_entity(&format!("brand:b{b}"), EntityType::Brand))
        .collect();
    let words: Vec<usize> = (0..4 * spec.clusters)
        .map(|w| kg.add_entity(&format!("word:w{w}"), EntityType::Word))
        .collect();
    let (belongs_to, produced_by, described_by) = (1, 2, 0);
    for (i, &c) in item_clusters.iter().enumerate() {
        let head = kg.item_alignment[i];
        kg.triples.push(Triple::new(head, belongs_to, categories[c]));
        let brand = if rng.gen_bool(spec.kg_fidelity) {
            brands[2 * c + rng.gen_range(0..2)]
        } else {
            *brands.choose(&mut rng).expect("nonempty")
        };
        kg.triples.push(Triple::new(head, produced_by, brand));
        let mut picked = Vec::new();
        while picked.len() < 2 {
            let w = if rng.gen_bool(spec.kg_fidelity) {
                words[4 * c + rng.gen_range(0..4)]
            } else {
                *words.choose(&mut rng).expect("nonempty")
            };
            if !picked.contains(&w) {
                picked.push(w);
            }
        }
        for w in picked {
            kg.triples.push(Triple::new(head, described_by, w));
        }
    }

    Ok(SyntheticData {
        dataset,
        kg,
        text,
        image,
        item_clusters,
        user_clusters,
    })
}
