//! Feature fields and embedding layer.
//!
//! Four fields feed the path networks: user, behavior, co-occurrence and
//! item (plus a dedicated bias field used only in training). Continuous
//! features are bucketed against monotone bin boundaries, every feature is
//! embedded via a per-feature table, and tables belonging to the same
//! field are concatenated into one dense field embedding.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline_cf::CoocStats;
use crate::tensorcore::{Param, ParamStore};
use crate::training::InteractionLog;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("NaN is not a valid continuous feature value")]
    InvalidFeature,
    #[error("field kind mismatch: expected {expected:?}, got {got:?}")]
    FieldKind { expected: FieldKind, got: FieldKind },
    #[error("feature vector has {got} values, schema declares {expected}")]
    Arity { expected: usize, got: usize },
    #[error("feature {index}: expected a {expected} value")]
    ValueType { index: usize, expected: &'static str },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensorcore::TensorError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    User,
    Behavior,
    Cooccurrence,
    Item,
    Bias,
}

impl FieldKind {
    pub fn tag(&self) -> &'static str {
        match self {
            FieldKind::User => "user",
            FieldKind::Behavior => "behavior",
            FieldKind::Cooccurrence => "cooc",
            FieldKind::Item => "item",
            FieldKind::Bias => "bias",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureDef {
    Categorical {
        name: String,
        vocab: usize,
        width: usize,
    },
    Continuous {
        name: String,
        /// Strictly increasing bucket boundaries; B boundaries make B+1 buckets.
        bins: Vec<f64>,
        width: usize,
    },
}

impl FeatureDef {
    pub fn name(&self) -> &str {
        match self {
            FeatureDef::Categorical { name, .. } | FeatureDef::Continuous { name, .. } => name,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            FeatureDef::Categorical { width, .. } | FeatureDef::Continuous { width, .. } => *width,
        }
    }

    /// Number of embedding rows this feature needs.
    pub fn vocab(&self) -> usize {
        match self {
            FeatureDef::Categorical { vocab, .. } => *vocab,
            FeatureDef::Continuous { bins, .. } => bins.len() + 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSchema {
    pub kind: FieldKind,
    pub features: Vec<FeatureDef>,
}

impl FieldSchema {
    pub fn validate(&self) -> Result<()> {
        for f in &self.features {
            match f {
                FeatureDef::Categorical { name, vocab, .. } => {
                    if *vocab == 0 {
                        return Err(FeatureError::InvalidSchema(format!(
                            "feature `{name}`: vocabulary size must be >= 1"
                        )));
                    }
                }
                FeatureDef::Continuous { name, bins, .. } => {
                    if bins.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(FeatureError::InvalidSchema(format!(
                            "feature `{name}`: bin boundaries must be strictly increasing"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Field embedding width: sum of per-feature widths.
    pub fn d_field(&self) -> usize {
        self.features.iter().map(FeatureDef::width).sum()
    }

    pub fn group_name(&self, feature_index: usize) -> String {
        format!(
            "emb/{}/{}_{}",
            self.kind.tag(),
            feature_index,
            self.features[feature_index].name()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureValue {
    Cat(usize),
    Real(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub kind: FieldKind,
    pub values: Vec<FeatureValue>,
}

impl FeatureVector {
    pub fn new(kind: FieldKind, values: Vec<FeatureValue>) -> Self {
        FeatureVector { kind, values }
    }
}

/// Bucket a continuous value: boundaries b_1 < ... < b_B define buckets
/// (-inf, b_1], (b_1, b_2], ..., (b_B, inf), ids 0..=B.
pub fn discretize(value: f64, bins: &[f64]) -> Result<usize> {
    if value.is_nan() {
        return Err(FeatureError::InvalidFeature);
    }
    Ok(bins.partition_point(|&b| b < value))
}

/// A concatenated field embedding plus the row lookups needed to route
/// gradients back into the selected embedding rows.
#[derive(Debug, Clone)]
pub struct FieldEmbedding {
    pub kind: FieldKind,
    pub vec: Vec<f64>,
    pub lookups: Vec<EmbedLookup>,
}

#[derive(Debug, Clone)]
pub struct EmbedLookup {
    pub group: String,
    pub row: usize,
    /// Offset of this feature's slice inside the concatenated vector.
    pub offset: usize,
    pub width: usize,
}

static OOV_WARNED: AtomicBool = AtomicBool::new(false);

/// Create one Glorot-initialized embedding table per feature of `schema`.
pub fn register_embeddings<R: Rng>(
    store: &mut ParamStore,
    schema: &FieldSchema,
    rng: &mut R,
) -> Result<()> {
    schema.validate()?;
    for (i, f) in schema.features.iter().enumerate() {
        store.insert(&schema.group_name(i), Param::glorot(f.vocab(), f.width(), rng))?;
    }
    Ok(())
}

/// Look up each feature's embedding row and concatenate in schema order.
pub fn embed_field(
    fv: &FeatureVector,
    schema: &FieldSchema,
    tables: &ParamStore,
) -> Result<FieldEmbedding> {
    if fv.kind != schema.kind {
        return Err(FeatureError::FieldKind {
            expected: schema.kind,
            got: fv.kind,
        });
    }
    if fv.values.len() != schema.features.len() {
        return Err(FeatureError::Arity {
            expected: schema.features.len(),
            got: fv.values.len(),
        });
    }
    let mut vec = Vec::with_capacity(schema.d_field());
    let mut lookups = Vec::with_capacity(schema.features.len());
    for (i, (def, val)) in schema.features.iter().zip(&fv.values).enumerate() {
        let row = match (def, val) {
            (FeatureDef::Categorical { vocab, .. }, FeatureValue::Cat(id)) => {
                if *id >= *vocab {
                    // Out-of-vocabulary ids map to the reserved row 0.
                    if !OOV_WARNED.swap(true, Ordering::Relaxed) {
                        eprintln!(
                            "warning: out-of-vocabulary id {id} for feature `{}`; using row 0",
                            def.name()
                        );
                    }
                    0
                } else {
                    *id
                }
            }
            (FeatureDef::Continuous { bins, .. }, FeatureValue::Real(x)) => discretize(*x, bins)?,
            (FeatureDef::Categorical { .. }, _) => {
                return Err(FeatureError::ValueType {
                    index: i,
                    expected: "categorical",
                })
            }
            (FeatureDef::Continuous { .. }, _) => {
                return Err(FeatureError::ValueType {
                    index: i,
                    expected: "continuous",
                })
            }
        };
        let group = schema.group_name(i);
        let table = tables.get(&group)?;
        let offset = vec.len();
        vec.extend_from_slice(table.row(row));
        lookups.push(EmbedLookup {
            group,
            row,
            offset,
            width: def.width(),
        });
    }
    Ok(FieldEmbedding {
        kind: fv.kind,
        vec,
        lookups,
    })
}

/// Accumulate `upstream` (gradient w.r.t. the concatenated embedding) into
/// the looked-up rows. Rows not referenced get exactly zero gradient.
pub fn embed_backward(
    tables: &mut ParamStore,
    emb: &FieldEmbedding,
    upstream: &[f64],
) -> Result<()> {
    debug_assert_eq!(upstream.len(), emb.vec.len());
    for l in &emb.lookups {
        let p = tables.get_mut(&l.group)?;
        let dst = &mut p.grad[l.row * l.width..(l.row + 1) * l.width];
        for (g, u) in dst.iter_mut().zip(&upstream[l.offset..l.offset + l.width]) {
            *g += u;
        }
    }
    Ok(())
}

/// Emit the co-occurrence field c_ji for an (interacted item j, target
/// item i) pair: co-click count, Pearson-style correlation, and a
/// same-category indicator. An unseen pair yields all-zero statistics.
pub fn build_cooccurrence_features(
    log: &InteractionLog,
    stats: &CoocStats,
    j: u32,
    i: u32,
) -> FeatureVector {
    debug_assert_ne!(j, i, "self-pairs are rejected upstream");
    let co = stats.co_count(j, i) as f64;
    let corr = stats.pearson(j, i);
    let same_cat = match (log.item_category(j), log.item_category(i)) {
        (Some(a), Some(b)) if a == b => 1usize,
        _ => 0,
    };
    FeatureVector::new(
        FieldKind::Cooccurrence,
        vec![
            FeatureValue::Real(co),
            FeatureValue::Real(corr),
            FeatureValue::Cat(same_cat),
        ],
    )
}

/// The full schema bundle consumed by the model: the four path fields
/// plus the training-only bias field. Serialized as TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaSet {
    pub user: FieldSchema,
    pub behavior: FieldSchema,
    pub cooccurrence: FieldSchema,
    pub item: FieldSchema,
    pub bias: FieldSchema,
}

impl SchemaSet {
    pub fn validate(&self) -> Result<()> {
        for (schema, kind) in [
            (&self.user, FieldKind::User),
            (&self.behavior, FieldKind::Behavior),
            (&self.cooccurrence, FieldKind::Cooccurrence),
            (&self.item, FieldKind::Item),
            (&self.bias, FieldKind::Bias),
        ] {
            if schema.kind != kind {
                return Err(FeatureError::InvalidSchema(format!(
                    "schema slot {:?} declares kind {:?}",
                    kind, schema.kind
                )));
            }
            schema.validate()?;
        }
        Ok(())
    }

    pub fn of(&self, kind: FieldKind) -> &FieldSchema {
        match kind {
            FieldKind::User => &self.user,
            FieldKind::Behavior => &self.behavior,
            FieldKind::Cooccurrence => &self.cooccurrence,
            FieldKind::Item => &self.item,
            FieldKind::Bias => &self.bias,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let set: SchemaSet = toml::from_str(s)
            .map_err(|e| FeatureError::InvalidSchema(format!("schema parse: {e}")))?;
        set.validate()?;
        Ok(set)
    }

    pub fn register_all<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for schema in [
            &self.user,
            &self.behavior,
            &self.cooccurrence,
            &self.item,
            &self.bias,
        ] {
            register_embeddings(store, schema, rng)?;
        }
        Ok(())
    }
}

/// Widths used by the default schema: 16 per id feature, 4 per bucket
/// feature.
pub const ID_WIDTH: usize = 16;
pub const BUCKET_WIDTH: usize = 4;

/// Derive the default schema bundle from a training log: user id, item id
/// (+ category when the log has one), recency/count behavior buckets, the
/// three co-occurrence statistics, and position/hour bias features.
/// Continuous bins are quantiles of the training distribution, except the
/// correlation feature which uses fixed uniform bins on [-1, 1].
pub fn default_schema_set(log: &InteractionLog, stats: &CoocStats) -> SchemaSet {
    let buckets = 32usize;

    // recency of each interaction relative to the user's last one
    let mut recency: Vec<f64> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for u in 0..log.n_users() as u32 {
        let hist = log.user_history(u);
        if let Some(last) = hist.last() {
            let mut per_item: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
            for r in hist {
                let c = per_item.entry(r.item).or_insert(0);
                *c += 1;
                if r.timestamp < last.timestamp {
                    recency.push((last.timestamp - r.timestamp) as f64);
                    counts.push(*c as f64);
                }
            }
        }
    }
    let recency_bins = quantile_bins(&mut recency, buckets);
    let count_bins = quantile_bins(&mut counts, buckets);

    let mut co_counts: Vec<f64> = stats.pairs().map(|(_, _, c)| c as f64).collect();
    let co_bins = quantile_bins(&mut co_counts, buckets);
    let corr_bins: Vec<f64> = (1..buckets).map(|k| -1.0 + 2.0 * k as f64 / buckets as f64).collect();

    let mut item_features = vec![FeatureDef::Categorical {
        name: "item_id".into(),
        vocab: log.n_items().max(1),
        width: ID_WIDTH,
    }];
    if log.n_categories() > 0 {
        item_features.push(FeatureDef::Categorical {
            name: "category".into(),
            vocab: log.n_categories() + 1, // 0 reserved for unknown
            width: BUCKET_WIDTH,
        });
    }

    SchemaSet {
        user: FieldSchema {
            kind: FieldKind::User,
            features: vec![FeatureDef::Categorical {
                name: "user_id".into(),
                vocab: log.n_users().max(1),
                width: ID_WIDTH,
            }],
        },
        behavior: FieldSchema {
            kind: FieldKind::Behavior,
            features: vec![
                FeatureDef::Continuous {
                    name: "recency".into(),
                    bins: recency_bins,
                    width: BUCKET_WIDTH,
                },
                FeatureDef::Continuous {
                    name: "count".into(),
                    bins: count_bins,
                    width: BUCKET_WIDTH,
                },
            ],
        },
        cooccurrence: FieldSchema {
            kind: FieldKind::Cooccurrence,
            features: vec![
                FeatureDef::Continuous {
                    name: "co_count".into(),
                    bins: co_bins,
                    width: BUCKET_WIDTH,
                },
                FeatureDef::Continuous {
                    name: "corr".into(),
                    bins: corr_bins,
                    width: BUCKET_WIDTH,
                },
                FeatureDef::Categorical {
                    name: "same_category".into(),
                    vocab: 2,
                    width: BUCKET_WIDTH,
                },
            ],
        },
        item: FieldSchema {
            kind: FieldKind::Item,
            features: item_features,
        },
        bias: FieldSchema {
            kind: FieldKind::Bias,
            features: vec![
                FeatureDef::Categorical {
                    name: "position".into(),
                    vocab: 64, // 0 reserved for unknown
                    width: BUCKET_WIDTH,
                },
                FeatureDef::Categorical {
                    name: "hour".into(),
                    vocab: 24,
                    width: BUCKET_WIDTH,
                },
            ],
        },
    }
}

/// Quantile-based bin boundaries: up to `buckets - 1` strictly increasing
/// cut points taken from the empirical distribution of `values`.
pub fn quantile_bins(values: &mut Vec<f64>, buckets: usize) -> Vec<f64> {
    values.retain(|v| v.is_finite());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut bins = Vec::new();
    if values.is_empty() || buckets < 2 {
        return bins;
    }
    for k in 1..buckets {
        let idx = (k * values.len()) / buckets;
        let q = values[idx.min(values.len() - 1)];
        if bins.last().map_or(true, |&last| q > last) {
            bins.push(q);
        }
    }
    bins
}
