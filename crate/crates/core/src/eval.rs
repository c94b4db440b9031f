//! All-ranking evaluation: candidate pools per setting, top-K ranking and
//! the recall / MRR / NDCG / hit / precision family of metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::ArrayView1;
use rayon::prelude::*;

use crate::autograd::Mat;
use crate::config::ColdPool;
use crate::dataset::SplitSpec;
use crate::error::{Error, Result};

/// Evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Setting {
    Cold,
    Warm,
    NormalCold,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::Cold, Setting::Warm, Setting::NormalCold];

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Cold => "cold",
            Setting::Warm => "warm",
            Setting::NormalCold => "normal_cold",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown setting `{s}` (expected cold, warm or normal_cold)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
    pub hit: f64,
    pub precision: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["recall", "mrr", "ndcg", "hit", "precision"];

    pub fn values(&self) -> [f64; 5] {
        [self.recall, self.mrr, self.ndcg, self.hit, self.precision]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self {
            recall: v[0],
            mrr: v[1],
            ndcg: v[2],
            hit: v[3],
            precision: v[4],
        }
    }
}

/// Averaged metrics for one setting and cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `cold`, `warm`, `normal_cold`, `hm`, or a custom tag.
    pub setting: String,
    pub k: usize,
    pub metrics: Metrics,
    pub users: usize,
    /// Users skipped for having no ground truth or no candidates.
    pub excluded: usize,
    pub per_user: Option<Vec<(usize, Metrics)>>,
}

/// Metrics of one ranked list against a relevant set. `ranking` must be the
/// top-`k` prefix (it may be shorter when there are fewer candidates).
pub fn user_metrics(ranking: &[usize], relevant: &[usize], k: usize) -> Metrics {
    let top = &ranking[..ranking.len().min(k)];
    let mut hits = 0usize;
    let mut first = None;
    let mut dcg = 0.0;
    for (pos, item) in top.iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            first.get_or_insert(pos + 1);
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..relevant.len().min(k)).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    Metrics {
        recall: hits as f64 / relevant.len() as f64,
        mrr: first.map_or(0.0, |r| 1.0 / r as f64),
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
        hit: if hits > 0 { 1.0 } else { 0.0 },
        precision: hits as f64 / k as f64,
    }
}

/// Top-`k` candidates by descending score, ties broken by smaller index.
pub fn rank_candidates(user: ArrayView1<f64>, items: &Mat, candidates: &[usize], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&i| (user.dot(&items.row(i)), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Per-metric `2cw/(c+w)`, zero when either side is zero.
pub fn harmonic_mean_value(c: f64, w: f64) -> f64 {
    if c <= 0.0 || w <= 0.0 {
        0.0
    } else {
        2.0 * c * w / (c + w)
    }
}

pub fn harmonic_mean(cold: &MetricsReport, warm: &MetricsReport) -> Result<MetricsReport> {
    if cold.k != warm.k {
        return Err(Error::Argument(format!("harmonic mean over different cutoffs {} and {}", cold.k, warm.k)));
    }
    let (c, w) = (cold.metrics.values(), warm.metrics.values());
    let hm: Vec<f64> = c.iter().zip(&w).map(|(&a, &b)| harmonic_mean_value(a, b)).collect();
    Ok(MetricsReport {
        setting: "hm".into(),
        k: cold.k,
        metrics: Metrics::from_values([hm[0], hm[1], hm[2], hm[3], hm[4]]),
        users: cold.users.min(warm.users),
        excluded: 0,
        per_user: None,
    })
}

/// Users to rank, with a shared candidate base and per-user exclusions.
#[derive(Clone, Debug)]
pub struct RankingTask {
    pub tag: String,
    /// Sorted candidate items before exclusions.
    pub base: Vec<usize>,
    /// `(user, excluded items, relevant items)`, users ascending.
    pub users: Vec<(usize, Vec<usize>, Vec<usize>)>,
    pub excluded_users: usize,
}

fn group_pairs(pairs: &[(usize, usize)]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(u, i) in pairs {
        map.entry(u).or_default().push(i);
    }
    for v in map.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    map
}

impl RankingTask {
    /// Builds the task for a setting on the test (or validation) half.
    pub fn new(split: &SplitSpec, setting: Setting, pool: ColdPool, validation: bool) -> Result<Self> {
        let train = group_pairs(&split.train);
        let all: Vec<usize> = (0..split.item_count).collect();
        let (tag, truth, base, extra): (&str, &[(usize, usize)], Vec<usize>, BTreeMap<usize, Vec<usize>>) = match setting {
            Setting::Warm => (
                "warm",
                if validation { &split.warm_val } else { &split.warm_test },
                sorted(&split.warm_items),
                BTreeMap::new(),
            ),
            Setting::Cold => {
                let items = if validation { &split.cold_val_items } else { &split.cold_test_items };
                let base = match pool {
                    ColdPool::ColdTest => sorted(items),
                    ColdPool::Catalog => all.clone(),
                };
                ("cold", if validation { &split.cold_val } else { &split.cold_test }, base, BTreeMap::new())
            }
            Setting::NormalCold => {
                let nc = split
                    .normal_cold
                    .as_ref()
                    .ok_or_else(|| Error::Argument("the split has no normal cold-start partition".into()))?;
                let base = match pool {
                    ColdPool::ColdTest => sorted(&split.cold_test_items),
                    ColdPool::Catalog => all.clone(),
                };
                ("normal_cold", &nc.unknown, base, group_pairs(&nc.known))
            }
        };
        let mut users = Vec::new();
        let mut excluded_users = 0;
        for (u, relevant) in group_pairs(truth) {
            if u >= split.user_count {
                return Err(Error::Argument(format!("evaluation user {u} is unknown")));
            }
            let mut excl: Vec<usize> = train.get(&u).cloned().unwrap_or_default();
            if let Some(k) = extra.get(&u) {
                excl.extend(k);
            }
            excl.sort_unstable();
            excl.dedup();
            let relevant: Vec<usize> = relevant.into_iter().filter(|i| excl.binary_search(i).is_err()).collect();
            if relevant.is_empty() {
                excluded_users += 1;
                continue;
            }
            users.push((u, excl, relevant));
        }
        Ok(Self {
            tag: tag.into(),
            base,
            users,
            excluded_users,
        })
    }

    fn candidates(&self, excl: &[usize]) -> Vec<usize> {
        self.base.iter().copied().filter(|i| excl.binary_search(i).is_err()).collect()
    }

    /// Expected recall of a uniformly random ranking: mean of `min(k, n)/n`.
    pub fn random_recall(&self, k: usize) -> f64 {
        if self.users.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .users
            .iter()
            .map(|(_, excl, _)| {
                let n = self.candidates(excl).len();
                if n == 0 {
                    0.0
                } else {
                    k.min(n) as f64 / n as f64
                }
            })
            .sum();
        total / self.users.len() as f64
    }

    /// Ranks every user once at the largest cutoff and reports each cutoff.
    pub fn evaluate(&self, users: &Mat, items: &Mat, ks: &[usize], per_user: bool) -> Vec<MetricsReport> {
        let kmax = ks.iter().copied().max().unwrap_or(0);
        let rankings: Vec<Vec<usize>> = self
            .users
            .par_iter()
            .map(|(u, excl, _)| rank_candidates(users.row(*u), items, &self.candidates(excl), kmax))
            .collect();
        ks.iter()
            .map(|&k| {
                let rows: Vec<(usize, Metrics)> = self
                    .users
                    .iter()
                    .zip(&rankings)
                    .map(|((u, _, rel), r)| (*u, user_metrics(r, rel, k)))
                    .collect();
                let mut sum = [0.0; 5];
                for (_, m) in &rows {
                    for (s, v) in sum.iter_mut().zip(m.values()) {
                        *s += v;
                    }
                }
                let n = rows.len().max(1) as f64;
                MetricsReport {
                    setting: self.tag.clone(),
                    k,
                    metrics: Metrics::from_values(sum.map(|s| s / n)),
                    users: rows.len(),
                    excluded: self.excluded_users,
                    per_user: per_user.then_some(rows),
                }
            })
            .collect()
    }
}

fn sorted(items: &[usize]) -> Vec<usize> {
    let mut v = items.to_vec();
    v.sort_unstable();
    v
}

/// One line per metric: `setting metric@K value`, as percentages.
pub fn format_reports(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    for r in reports {
        for (name, v) in Metrics::NAMES.iter().zip(r.metrics.values()) {
            out.push_str(&format!("{}\t{}@{}\t{:.4}\n", r.setting, name, r.k, 100.0 * v));
        }
    }
    out
}

/// Tab-separated table with one row per report and metrics as fractions.
pub fn write_reports_tsv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut text = String::from("setting\tK\tusers\texcluded\trecall\tmrr\tndcg\thit\tprecision\n");
    for r in reports {
        let v = r.metrics.values();
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.setting, r.k, r.users, r.excluded, v[0], v[1], v[2], v[3], v[4]
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
