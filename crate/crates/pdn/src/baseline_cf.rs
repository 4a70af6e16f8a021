//! Pearson item-based CF baseline.
//!
//! Doubles as the supplier of co-occurrence statistics for the feature
//! layer: the same (co-count, per-item count, user count) numbers drive
//! both the Pearson correlation and the co-click feature.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::training::InteractionLog;

#[derive(Debug, Error)]
pub enum CfError {
    #[error("unknown item id {0}")]
    UnknownItem(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Co-occurrence counts over the binarized user-item matrix: for each
/// item the number of distinct users who interacted with it, and for each
/// unordered item pair the number of users who interacted with both.
#[derive(Debug, Clone)]
pub struct CoocStats {
    n_users: usize,
    item_users: Vec<u32>,
    pairs: HashMap<(u32, u32), u32>,
}

fn pair_key(a: u32, b: u32) -> (u32, u32) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl CoocStats {
    pub fn from_log(log: &InteractionLog) -> Self {
        let mut item_users = vec![0u32; log.n_items()];
        let mut pairs: HashMap<(u32, u32), u32> = HashMap::new();
        for u in 0..log.n_users() as u32 {
            let mut items: Vec<u32> = log.user_history(u).iter().map(|r| r.item).collect();
            items.sort_unstable();
            items.dedup();
            for (a, &j) in items.iter().enumerate() {
                item_users[j as usize] += 1;
                for &i in &items[a + 1..] {
                    *pairs.entry((j, i)).or_insert(0) += 1;
                }
            }
        }
        CoocStats {
            n_users: log.n_users(),
            item_users,
            pairs,
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    /// Number of distinct users who interacted with item `i`.
    pub fn item_user_count(&self, i: u32) -> u32 {
        self.item_users.get(i as usize).copied().unwrap_or(0)
    }

    /// Number of distinct users who interacted with both items.
    pub fn co_count(&self, j: u32, i: u32) -> u32 {
        if j == i {
            return self.item_user_count(i);
        }
        self.pairs.get(&pair_key(j, i)).copied().unwrap_or(0)
    }

    /// Pearson correlation of the two items' binary user-interaction
    /// columns; 0 when either column is constant.
    pub fn pearson(&self, j: u32, i: u32) -> f64 {
        let u = self.n_users as f64;
        let nj = self.item_user_count(j) as f64;
        let ni = self.item_user_count(i) as f64;
        let denom_sq = nj * (u - nj) * ni * (u - ni);
        if denom_sq <= 0.0 {
            return 0.0;
        }
        let c = self.co_count(j, i) as f64;
        (u * c - nj * ni) / denom_sq.sqrt()
    }

    /// Iterate all co-occurring pairs (j < i) with their counts.
    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.pairs.iter().map(|(&(j, i), &c)| (j, i, c))
    }
}

/// Pearson correlation between two items' binary interaction columns.
pub fn pearson_sim(log: &InteractionLog, j: u32, i: u32) -> Result<f64, CfError> {
    for id in [j, i] {
        if id as usize >= log.n_items() {
            return Err(CfError::UnknownItem(id));
        }
    }
    Ok(CoocStats::from_log(log).pearson(j, i))
}

/// Anything that can report an item-to-item relevance: the CF matrix here
/// or the SimNet index. Pairs absent from the source score 0.
pub trait ItemSimilarity {
    fn sim(&self, j: u32, i: u32) -> f64;
}

/// Sparse item-item Pearson similarity, truncated to the top `k_hat`
/// neighbors per item. Neighbor lists are kept id-sorted for lookup.
#[derive(Debug, Clone)]
pub struct CfMatrix {
    k_hat: usize,
    lists: Vec<Vec<(u32, f64)>>,
}

impl CfMatrix {
    pub fn build(log: &InteractionLog, stats: &CoocStats, k_hat: usize) -> Self {
        let n = log.n_items();
        // group co-occurring pairs by source item; only co-occurring pairs
        // can have nonzero Pearson numerator above the popularity baseline,
        // but negatively correlated pairs exist too -- they are irrelevant
        // for a top-k_hat positive neighborhood at matching time.
        let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for (j, i, _) in stats.pairs() {
            let r = stats.pearson(j, i);
            adj[j as usize].push((i, r));
            adj[i as usize].push((j, r));
        }
        let lists: Vec<Vec<(u32, f64)>> = adj
            .into_par_iter()
            .map(|mut neigh| {
                neigh.sort_by(|a, b| {
                    b.1.partial_cmp(&a.1)
                        .unwrap()
                        .then_with(|| a.0.cmp(&b.0))
                });
                neigh.truncate(k_hat);
                neigh.sort_by_key(|&(id, _)| id);
                neigh
            })
            .collect();
        CfMatrix { k_hat, lists }
    }

    pub fn k_hat(&self) -> usize {
        self.k_hat
    }

    pub fn n_items(&self) -> usize {
        self.lists.len()
    }

    pub fn neighbors(&self, j: u32) -> &[(u32, f64)] {
        &self.lists[j as usize]
    }

    /// TSV export (j, i, sim), one row per retained entry, mirroring the
    /// SimNet index export for side-by-side comparison.
    pub fn export_tsv(&self, path: &Path) -> Result<(), CfError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (j, list) in self.lists.iter().enumerate() {
            for &(i, s) in list {
                writeln!(f, "{j}\t{i}\t{s}")?;
            }
        }
        Ok(())
    }
}

impl ItemSimilarity for CfMatrix {
    fn sim(&self, j: u32, i: u32) -> f64 {
        if (j as usize) >= self.lists.len() {
            return 0.0;
        }
        match self.lists[j as usize].binary_search_by_key(&i, |&(id, _)| id) {
            Ok(pos) => self.lists[j as usize][pos].1,
            Err(_) => 0.0,
        }
    }
}

/// Sum of item similarities between the
/// history items and the target.
pub fn cf_score<S: ItemSimilarity>(source: &S, history: &[u32], i: u32) -> f64 {
    history.iter().map(|&j| source.sim(j, i)).sum()
}
