//! Leave-one-out evaluation: HR@K / NDCG@K, category-coverage diversity,
//! and history-length breakdowns, for full-model scoring and for
//! item-to-item similarity sources.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baseline_cf::{cf_score, CoocStats, ItemSimilarity};
use crate::model::PdnModel;
use crate::retrieval::user_triggers;
use crate::training::{InteractionLog, TestCase};

/// Negative protocol: rank the target against every non-interacted item,
/// or against a fixed-size sample of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    All,
    Sampled { n: usize, seed: u64 },
}

impl Protocol {
    pub fn descriptor(&self) -> String {
        match self {
            Protocol::All => "all".into(),
            Protocol::Sampled { n, seed } => format!("sampled({n}, seed {seed})"),
        }
    }
}

/// Scores one candidate for one held-out case. `None` means the scorer
/// cannot handle the user (counted as skipped).
pub trait Scorer: Sync {
    fn score(&self, case: &TestCase, candidate: u32) -> Option<f64>;
    fn name(&self) -> &str;
}

/// Full path-based score (bias net excluded), with triggers drawn from the
/// training history strictly before the held-out timestamp.
pub struct PdnScorer<'a> {
    pub model: &'a PdnModel,
    pub train: &'a InteractionLog,
    pub stats: &'a CoocStats,
    pub n_max: usize,
}

impl Scorer for PdnScorer<'_> {
    fn score(&self, case: &TestCase, candidate: u32) -> Option<f64> {
        if case.user as usize >= self.train.n_users() {
            return None;
        }
        let triggers = user_triggers(self.train, case.user, case.timestamp, self.n_max);
        // the candidate never triggers itself (mirrors training examples)
        let inputs: Vec<_> = triggers
            .iter()
            .filter(|t| t.item != candidate)
            .map(|t| self.model.trigger_input(self.train, self.stats, t, candidate))
            .collect();
        self.model
            .score(
                &self.model.user_fv(case.user),
                &self.model.item_fv(self.train, candidate),
                &inputs,
                None,
            )
            .ok()
    }

    fn name(&self) -> &str {
        "pdn"
    }
}

/// Summed item-to-item similarity between the training history and the
/// candidate; works for both the SimNet index and the CF matrix.
pub struct ItemToItemScorer<'a, S: ItemSimilarity + Sync> {
    pub source: &'a S,
    pub train: &'a InteractionLog,
    pub label: String,
}

impl<S: ItemSimilarity + Sync> Scorer for ItemToItemScorer<'_, S> {
    fn score(&self, case: &TestCase, candidate: u32) -> Option<f64> {
        if case.user as usize >= self.train.n_users() {
            return None;
        }
        let history: Vec<u32> = self
            .train
            .user_history(case.user)
            .iter()
            .filter(|r| r.timestamp < case.timestamp)
            .map(|r| r.item)
            .collect();
        Some(cf_score(self.source, &history, candidate))
    }

    fn name(&self) -> &str {
        &self.label
    }
}

pub const BUCKET_LABELS: [&str; 4] = ["<=15", "16-30", "31-45", ">45"];

pub fn history_bucket(len: usize) -> usize {
    match len {
        0..=15 => 0,
        16..=30 => 1,
        31..=45 => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketMetrics {
    pub label: &'static str,
    pub n: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub protocol: String,
    pub k: usize,
    pub n_cases: usize,
    pub skipped: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub diversity: f64,
    pub buckets: Vec<BucketMetrics>,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str("method\tprotocol\tbucket\tn\thr\tndcg\tdiversity\n");
        let _ = writeln!(
            out,
            "{}\t{}\tall\t{}\t{:.6}\t{:.6}\t{:.6}",
            self.method, self.protocol, self.n_cases, self.hr, self.ndcg, self.diversity
        );
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t-",
                self.method, self.protocol, b.label, b.n, b.hr, b.ndcg
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} (protocol {}, K={}): HR@{} {:.4}, NDCG@{} {:.4}, diversity {:.4} over {} cases ({} skipped)\n",
            self.method,
            self.protocol,
            self.k,
            self.k,
            self.hr,
            self.k,
            self.ndcg,
            self.diversity,
            self.n_cases,
            self.skipped
        );
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "  history {:>5}: n={:<6} HR {:.4}  NDCG {:.4}",
                b.label, b.n, b.hr, b.ndcg
            );
        }
        out
    }
}

/// Hit ratio and NDCG of `target` within the top K of a ranked list:
/// hr = 1 iff the target appears in the top K, ndcg = 1/log2(rank + 1)
/// at its 1-based rank (0 on a miss).
pub fn hr_ndcg(ranked: &[u32], target: u32, k: usize) -> (f64, f64) {
    match ranked.iter().take(k).position(|&i| i == target) {
        Some(pos) => {
            let rank = (pos + 1) as f64;
            (1.0, 1.0 / (rank + 1.0).log2())
        }
        None => (0.0, 0.0),
    }
}

/// Distinct negatives for one case, drawn uniformly from items the user
/// never interacted with in `train` (the target is excluded too). The
/// sequence is a deterministic function of (seed, user), and a larger `n`
/// with the same seed extends the smaller sample (prefix property), so
/// growing the negative set only adds items.
fn draw_negatives(
    train: &InteractionLog,
    case: &TestCase,
    n: usize,
    seed: u64,
) -> Vec<u32> {
    let mut seen = train.user_item_set(case.user);
    seen.insert(case.target);
    let n_items = train.n_items();
    let eligible = n_items - seen.len().min(n_items);
    if eligible == 0 {
        return Vec::new();
    }
    if n >= eligible {
        return (0..n_items as u32).filter(|i| !seen.contains(i)).collect();
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (case.user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut drawn: HashSet<u32> = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let cand = rng.gen_range(0..n_items as u32);
        if !seen.contains(&cand) && drawn.insert(cand) {
            out.push(cand);
        }
    }
    out
}

struct CaseOutcome {
    hr: f64,
    ndcg: f64,
    top_categories: HashSet<u32>,
    bucket: usize,
    skipped: bool,
}

/// Rank each held-out target against its protocol-defined negative set and
/// aggregate. Deterministic given the protocol seed; test cases are
/// evaluated in parallel and reduced in test-set order.
pub fn evaluate(
    scorer: &dyn Scorer,
    train: &InteractionLog,
    test: &[TestCase],
    protocol: Protocol,
    k: usize,
) -> EvalReport {
    let n_categories = train.n_categories();
    let outcomes: Vec<CaseOutcome> = test
        .par_iter()
        .map(|case| {
            let bucket = history_bucket(train.user_history(case.user).len());
            let negatives = match protocol {
                Protocol::All => draw_negatives(train, case, usize::MAX, 0),
                Protocol::Sampled { n, seed } => draw_negatives(train, case, n, seed),
            };
            let mut scored: Vec<(u32, f64)> = Vec::with_capacity(negatives.len() + 1);
            for &cand in negatives.iter().chain(std::iter::once(&case.target)) {
                match scorer.score(case, cand) {
                    Some(s) => scored.push((cand, s)),
                    None => {
                        return CaseOutcome {
                            hr: 0.0,
                            ndcg: 0.0,
                            top_categories: HashSet::new(),
                            bucket,
                            skipped: true,
                        }
                    }
                }
            }
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            let ranked: Vec<u32> = scored.iter().map(|&(i, _)| i).collect();
            let (hr, ndcg) = hr_ndcg(&ranked, case.target, k);
            let top_categories = ranked
                .iter()
                .take(k)
                .filter_map(|&i| train.item_category(i))
                .collect();
            CaseOutcome {
                hr,
                ndcg,
                top_categories,
                bucket,
                skipped: false,
            }
        })
        .collect();

    let mut n_cases = 0usize;
    let mut skipped = 0usize;
    let mut hr_sum = 0.0;
    let mut ndcg_sum = 0.0;
    let mut div_sum = 0.0;
    let mut bucket_n = [0usize; 4];
    let mut bucket_hr = [0.0f64; 4];
    let mut bucket_ndcg = [0.0f64; 4];
    for o in &outcomes {
        if o.skipped {
            skipped += 1;
            continue;
        }
        n_cases += 1;
        hr_sum += o.hr;
        ndcg_sum += o.ndcg;
        if n_categories > 0 {
            div_sum += o.top_categories.len() as f64 / n_categories as f64;
        }
        bucket_n[o.bucket] += 1;
        bucket_hr[o.bucket] += o.hr;
        bucket_ndcg[o.bucket] += o.ndcg;
    }
    let mean = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { 0.0 };
    EvalReport {
        method: scorer.name().to_string(),
        protocol: protocol.descriptor(),
        k,
        n_cases,
        skipped,
        hr: mean(hr_sum, n_cases),
        ndcg: mean(ndcg_sum, n_cases),
        diversity: mean(div_sum, n_cases),
        buckets: (0..4)
            .map(|b| BucketMetrics {
                label: BUCKET_LABELS[b],
                n: bucket_n[b],
                hr: mean(bucket_hr[b], bucket_n[b]),
                ndcg: mean(bucket_ndcg[b], bucket_n[b]),
            })
            .collect(),
    }
}

/// Evaluate an item-to-item similarity source (SimNet index or CF matrix)
/// under cf_score ranking semantics.
pub fn item_to_item_evaluate<S: ItemSimilarity + Sync>(
    source: &S,
    label: &str,
    train: &InteractionLog,
    test: &[TestCase],
    protocol: Protocol,
    k: usize,
) -> EvalReport {
    let scorer = ItemToItemScorer {
        source,
        train,
        label: label.to_string(),
    };
    evaluate(&scorer, train, test, protocol, k)
}
