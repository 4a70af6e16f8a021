//! Offline SimNet index generation: candidate pair generation, scoring,
//! top-k compression per source item, and a versioned binary file format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::baseline_cf::{CoocStats, ItemSimilarity};
use crate::model::PdnModel;
use crate::training::InteractionLog;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index file corrupt: {0}")]
    Corrupt(String),
    #[error("index was built by model {index_id} but serving model is {model_id}")]
    ModelIdMismatch { index_id: String, model_id: String },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-item top-k neighbor lists with SimNet scores, plus the header that
/// ties the index to the producing model.
#[derive(Debug, Clone, PartialEq)]
pub struct SimIndex {
    pub model_id: String,
    pub k: usize,
    pub build_timestamp: i64,
    /// Pairs dropped because they referenced ids outside the feature space.
    pub skipped_pairs: usize,
    /// lists[j]: (neighbor, s_ji) sorted by score descending, ties by
    /// ascending item id; no self pairs, no duplicates, length <= k.
    lists: Vec<Vec<(u32, f64)>>,
}

impl SimIndex {
    /// Assemble an index from explicit neighbor lists (tools/tests).
    /// Lists are normalized to the canonical (score desc, id asc) order.
    pub fn from_lists(model_id: &str, k: usize, mut lists: Vec<Vec<(u32, f64)>>) -> Self {
        for list in &mut lists {
            list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            list.truncate(k);
        }
        SimIndex {
            model_id: model_id.to_string(),
            k,
            build_timestamp: 0,
            skipped_pairs: 0,
            lists,
        }
    }

    pub fn n_items(&self) -> usize {
        self.lists.len()
    }

    pub fn neighbors(&self, j: u32) -> &[(u32, f64)] {
        static EMPTY: &[(u32, f64)] = &[];
        self.lists.get(j as usize).map_or(EMPTY, |l| l.as_slice())
    }

    pub fn verify_model_id(&self, model_id: &str) -> Result<(), IndexError> {
        if self.model_id != model_id {
            return Err(IndexError::ModelIdMismatch {
                index_id: self.model_id.clone(),
                model_id: model_id.to_string(),
            });
        }
        Ok(())
    }

    /// Human-readable TSV export (j, i, s_ji).
    pub fn export_tsv(&self, path: &Path) -> Result<(), IndexError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (j, list) in self.lists.iter().enumerate() {
            for &(i, s) in list {
                writeln!(f, "{j}\t{i}\t{s}")?;
            }
        }
        Ok(())
    }
}

impl ItemSimilarity for SimIndex {
    fn sim(&self, j: u32, i: u32) -> f64 {
        self.neighbors(j)
            .iter()
            .find(|&&(id, _)| id == i)
            .map_or(0.0, |&(_, s)| s)
    }
}

/// Candidate pairs per source item, capped at k_hat.
pub type CandidatePairs = Vec<Vec<u32>>;

/// Union of session co-occurrence pairs (same user within
/// `session_window_secs`) and profile pairs (same category). Per source
/// item the candidates are capped at k_hat, ordered by session
/// co-occurrence count, then most recent co-occurrence, then item id.
pub fn generate_candidate_pairs(
    log: &InteractionLog,
    k_hat: usize,
    session_window_secs: i64,
) -> CandidatePairs {
    let n = log.n_items();
    // per source item: candidate -> (co-occurrence count, latest co ts)
    let mut cand: Vec<HashMap<u32, (u32, i64)>> = vec![HashMap::new(); n];
    for u in 0..log.n_users() as u32 {
        let hist = log.user_history(u);
        for (a, ra) in hist.iter().enumerate() {
            for rb in &hist[a + 1..] {
                if rb.timestamp - ra.timestamp > session_window_secs {
                    break;
                }
                if ra.item == rb.item {
                    continue;
                }
                let ts = rb.timestamp;
                for (j, i) in [(ra.item, rb.item), (rb.item, ra.item)] {
                    let e = cand[j as usize].entry(i).or_insert((0, ts));
                    e.0 += 1;
                    e.1 = e.1.max(ts);
                }
            }
        }
    }
    // profile pairs: items sharing a category
    let mut by_category: HashMap<u32, Vec<u32>> = HashMap::new();
    for i in 0..n as u32 {
        if let Some(c) = log.item_category(i) {
            by_category.entry(c).or_default().push(i);
        }
    }
    for members in by_category.values() {
        for &j in members {
            for &i in members {
                if i != j {
                    cand[j as usize].entry(i).or_insert((0, i64::MIN));
                }
            }
        }
    }
    cand.into_par_iter()
        .map(|map| {
            let mut items: Vec<(u32, (u32, i64))> = map.into_iter().collect();
            items.sort_by(|a, b| {
                b.1 .0
                    .cmp(&a.1 .0)
                    .then_with(|| b.1 .1.cmp(&a.1 .1))
                    .then_with(|| a.0.cmp(&b.0))
            });
            items.truncate(k_hat);
            items.into_iter().map(|(i, _)| i).collect()
        })
        .collect()
}

/// Score every candidate pair with SimNet and keep the top-k per source
/// item. Deterministic: ties broken by ascending item id, so the result
/// is independent of candidate order and worker count.
pub fn build_index(
    model: &PdnModel,
    log: &InteractionLog,
    stats: &CoocStats,
    pairs: &CandidatePairs,
    k: usize,
) -> Result<SimIndex, IndexError> {
    let n = log.n_items();
    let scored: Vec<(Vec<(u32, f64)>, usize)> = pairs
        .par_iter()
        .enumerate()
        .map(|(j, cands)| {
            let j = j as u32;
            let mut skipped = 0usize;
            if j as usize >= n {
                return (Vec::new(), cands.len());
            }
            let x_j = model.item_fv(log, j);
            let mut list: Vec<(u32, f64)> = Vec::with_capacity(cands.len());
            for &i in cands {
                if i as usize >= n || i == j {
                    skipped += 1;
                    continue;
                }
                let c_ji = crate::features::build_cooccurrence_features(log, stats, j, i);
                let x_i = model.item_fv(log, i);
                match model.sim_score(&x_j, &c_ji, &x_i) {
                    Ok(s) if s.is_finite() => list.push((i, s)),
                    _ => skipped += 1,
                }
            }
            list.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            list.truncate(k);
            (list, skipped)
        })
        .collect();
    let mut lists = Vec::with_capacity(scored.len());
    let mut skipped_pairs = 0;
    for (list, skipped) in scored {
        lists.push(list);
        skipped_pairs += skipped;
    }
    // pad with empty lists for items that had no candidates
    lists.resize(n, Vec::new());
    // data timestamp rather than wall clock, so identical inputs produce
    // byte-identical index files
    let build_timestamp = (0..log.n_users() as u32)
        .filter_map(|u| log.user_history(u).last().map(|r| r.timestamp))
        .max()
        .unwrap_or(0);
    Ok(SimIndex {
        model_id: model.model_id(),
        k,
        build_timestamp,
        skipped_pairs,
        lists,
    })
}

const MAGIC: &[u8; 8] = b"PDNIDX\x01\x00";
const VERSION: u32 = 1;

pub fn index_bytes(index: &SimIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index.model_id.len() as u32).to_le_bytes());
    out.extend_from_slice(index.model_id.as_bytes());
    out.extend_from_slice(&(index.k as u64).to_le_bytes());
    out.extend_from_slice(&index.build_timestamp.to_le_bytes());
    out.extend_from_slice(&(index.skipped_pairs as u64).to_le_bytes());
    out.extend_from_slice(&(index.lists.len() as u64).to_le_bytes());
    for list in &index.lists {
        out.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for &(i, s) in list {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    out
}

pub fn save_index(index: &SimIndex, path: &Path) -> Result<(), IndexError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&index_bytes(index))?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<SimIndex, IndexError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_index(&bytes)
}

pub fn parse_index(bytes: &[u8]) -> Result<SimIndex, IndexError> {
    struct R<'a>(&'a [u8], usize);
    impl<'a> R<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
            if self.1 + n > self.0.len() {
                return Err(IndexError::Corrupt(format!(
                    "truncated at byte {} (wanted {n} more)",
                    self.1
                )));
            }
            let s = &self.0[self.1..self.1 + n];
            self.1 += n;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32, IndexError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64, IndexError> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn i64(&mut self) -> Result<i64, IndexError> {
            Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn f64(&mut self) -> Result<f64, IndexError> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }
    let mut r = R(bytes, 0);
    if r.take(8)? != MAGIC {
        return Err(IndexError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(IndexError::Corrupt(format!("unsupported version {version}")));
    }
    let id_len = r.u32()? as usize;
    let model_id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| IndexError::Corrupt("non-utf8 model id".into()))?
        .to_string();
    let k = r.u64()? as usize;
    let build_timestamp = r.i64()?;
    let skipped_pairs = r.u64()? as usize;
    let n = r.u64()? as usize;
    let mut lists = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            let i = r.u32()?;
            let s = r.f64()?;
            list.push((i, s));
        }
        lists.push(list);
    }
    if r.1 != bytes.len() {
        return Err(IndexError::Corrupt(format!("{} trailing bytes", bytes.len() - r.1)));
    }
    Ok(SimIndex {
        model_id,
        k,
        build_timestamp,
        skipped_pairs,
        lists,
    })
}
