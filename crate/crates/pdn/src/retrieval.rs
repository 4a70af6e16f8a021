//! Online greedy path retrieval: top-m trigger extraction, index lookup,
//! path-score aggregation, top-K selection. The bias net never
//! participates here.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use thiserror::Error;

use crate::index::{IndexError, SimIndex};
use crate::model::{merge_path, PdnModel};
use crate::tensorcore::softplus;
use crate::training::{InteractionLog, TriggerCtx};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub item: u32,
    pub score: f64,
    /// Triggers whose index lists contributed a path to this score, in
    /// descending-t order.
    pub triggers: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// Descending by score, ties by ascending item id; length <= K.
    pub items: Vec<ScoredCandidate>,
    pub m: usize,
    pub k: usize,
    pub big_k: usize,
    /// Triggers among the top-m whose index lists were empty.
    pub missing_triggers: usize,
    pub wall_micros: u128,
}

/// Precomputed tower outputs keyed by id; purely an inference-time
/// shortcut, scores are identical with or without it.
#[derive(Debug, Default, Clone)]
pub struct DirectCache {
    pub users: HashMap<u32, Vec<f64>>,
    pub items: HashMap<u32, Vec<f64>>,
}

pub fn precompute_direct(
    model: &PdnModel,
    log: &InteractionLog,
) -> Result<DirectCache, RetrievalError> {
    let mut cache = DirectCache::default();
    for u in 0..log.n_users() as u32 {
        cache.users.insert(u, model.user_repr(&model.user_fv(u))?);
    }
    for i in 0..log.n_items() as u32 {
        cache.items.insert(i, model.item_repr(&model.item_fv(log, i))?);
    }
    Ok(cache)
}

/// The user's interactions before `now` as trigger contexts, truncated to
/// the `n_max` most recent. Unlike the training-example builder there is
/// no target to exclude.
pub fn user_triggers(log: &InteractionLog, u: u32, now: i64, n_max: usize) -> Vec<TriggerCtx> {
    let mut counts: HashMap<u32, u32> = HashMap::new();
    let mut all = Vec::new();
    for r in log.user_history(u) {
        if r.timestamp >= now {
            break;
        }
        let c = counts.entry(r.item).or_insert(0);
        *c += 1;
        all.push(TriggerCtx {
            item: r.item,
            recency_secs: (now - r.timestamp) as f64,
            count: *c as f64,
        });
    }
    if all.len() > n_max {
        all.drain(..all.len() - n_max);
    }
    all
}

/// TrigNet-score every history item and keep the top m. Repeated items
/// are deduplicated to their most recent context first. Ties in t break
/// by recency (most recent first), then item id. Empty history yields an
/// empty list.
pub fn extract_triggers(
    model: &PdnModel,
    log: &InteractionLog,
    user: u32,
    history: &[TriggerCtx],
    m: usize,
) -> Result<Vec<(u32, f64)>, RetrievalError> {
    let z_u = model.user_fv(user);
    // later entries are more recent; keep the last context per item
    let mut latest: HashMap<u32, &TriggerCtx> = HashMap::new();
    for ctx in history {
        latest.insert(ctx.item, ctx);
    }
    let mut scored: Vec<(u32, f64, f64)> = Vec::with_capacity(latest.len());
    for ctx in latest.into_values() {
        let t = model.trig_score(
            &z_u,
            &model.behavior_fv(ctx.recency_secs, ctx.count),
            &model.item_fv(log, ctx.item),
        )?;
        scored.push((ctx.item, t, ctx.recency_secs));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| a.2.partial_cmp(&b.2).unwrap())
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(m);
    Ok(scored.into_iter().map(|(i, t, _)| (i, t)).collect())
}

/// Candidate generation and scoring in one pass: union the index lists of
/// the top-m triggers, drop anything the user already interacted with,
/// score each survivor as softplus(d_ui) + sum over found paths of
/// softplus(t_uj + s_ji), and return the top K.
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    model: &PdnModel,
    index: &SimIndex,
    log: &InteractionLog,
    user: u32,
    history: &[TriggerCtx],
    m: usize,
    big_k: usize,
    cache: Option<&DirectCache>,
) -> Result<RetrievalResult, RetrievalError> {
    let start = Instant::now();
    index.verify_model_id(&model.model_id())?;
    let triggers = extract_triggers(model, log, user, history, m)?;

    let seen: HashSet<u32> = history.iter().map(|c| c.item).collect();
    let mut missing_triggers = 0usize;
    // item -> (path score sum, contributing triggers)
    let mut paths: HashMap<u32, (f64, Vec<u32>)> = HashMap::new();
    for &(j, t) in &triggers {
        let neigh = index.neighbors(j);
        if neigh.is_empty() {
            missing_triggers += 1;
            continue;
        }
        for &(i, s) in neigh {
            if seen.contains(&i) {
                continue;
            }
            let e = paths.entry(i).or_insert((0.0, Vec::new()));
            e.0 += merge_path(t, s);
            e.1.push(j);
        }
    }

    let p_u = match cache.and_then(|c| c.users.get(&user)) {
        Some(p) => p.clone(),
        None => model.user_repr(&model.user_fv(user))?,
    };
    let mut items: Vec<ScoredCandidate> = Vec::with_capacity(paths.len());
    for (i, (path_sum, trigs)) in paths {
        let q_i = match cache.and_then(|c| c.items.get(&i)) {
            Some(q) => q.clone(),
            None => model.item_repr(&model.item_fv(log, i))?,
        };
        let d: f64 = p_u.iter().zip(&q_i).map(|(a, b)| a * b).sum();
        items.push(ScoredCandidate {
            item: i,
            score: softplus(d) + path_sum,
            triggers: trigs,
        });
    }
    items.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.item.cmp(&b.item))
    });
    items.truncate(big_k);

    Ok(RetrievalResult {
        items,
        m,
        k: index.k,
        big_k,
        missing_triggers,
        wall_micros: start.elapsed().as_micros(),
    })
}
