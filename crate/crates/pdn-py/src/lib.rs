//! Python bindings for the pdn crate: scalar primitives plus an `Engine`
//! class that drives the full pipeline (train, index, retrieve, evaluate)
//! on in-memory interaction rows.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pdn::baseline_cf::{CfMatrix, CoocStats};
use pdn::evaluation::{evaluate, item_to_item_evaluate, EvalReport, PdnScorer, Protocol};
use pdn::features::default_schema_set;
use pdn::index::{build_index, generate_candidate_pairs, load_index, save_index, SimIndex};
use pdn::model::{ModelConfig, PdnModel};
use pdn::retrieval::{retrieve, user_triggers};
use pdn::training::{split_leave_one_out, train, InteractionLog, TestCase, TrainConfig};

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Numerically stable ln(1 + e^x).
#[pyfunction]
fn softplus(x: f64) -> f64 {
    pdn::tensorcore::softplus(x)
}

/// Path score ln(1 + e^t * e^s) for a trigger score t and similarity s.
#[pyfunction]
fn merge_path(t: f64, s: f64) -> f64 {
    pdn::model::merge_path(t, s)
}

/// Map an additive relevance score y_hat >= 0 to P(click) = 1 - e^(-y_hat).
#[pyfunction]
fn click_probability(y_hat: f64) -> f64 {
    pdn::model::click_probability(y_hat)
}

/// Per-example loss for a binary label under the exponential link.
#[pyfunction]
fn loss(y_hat: f64, label: u8) -> PyResult<f64> {
    if label > 1 {
        return Err(PyValueError::new_err("label must be 0 or 1"));
    }
    Ok(pdn::model::loss(y_hat, label))
}

fn report_to_dict(py: Python<'_>, r: &EvalReport) -> PyResult<PyObject> {
    let d = pyo3::types::PyDict::new_bound(py);
    d.set_item("method", &r.method)?;
    d.set_item("protocol", &r.protocol)?;
    d.set_item("k", r.k)?;
    d.set_item("n_cases", r.n_cases)?;
    d.set_item("skipped", r.skipped)?;
    d.set_item("hr", r.hr)?;
    d.set_item("ndcg", r.ndcg)?;
    d.set_item("diversity", r.diversity)?;
    let buckets: Vec<(String, usize, f64, f64)> = r
        .buckets
        .iter()
        .map(|b| (b.label.to_string(), b.n, b.hr, b.ndcg))
        .collect();
    d.set_item("buckets", buckets)?;
    Ok(d.into())
}

/// End-to-end pipeline over in-memory rows: holds the interaction log,
/// its leave-one-out split, co-occurrence statistics, and (once built)
/// the trained model and similarity index.
#[pyclass]
struct Engine {
    log: InteractionLog,
    train_log: InteractionLog,
    test: Vec<TestCase>,
    stats: CoocStats,
    n_max: usize,
    model: Option<PdnModel>,
    index: Option<SimIndex>,
}

impl Engine {
    fn model(&self) -> PyResult<&PdnModel> {
        self.model
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("no model: call train() or load_model() first"))
    }

    fn index(&self) -> PyResult<&SimIndex> {
        self.index
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("no index: call build_index() or load_index() first"))
    }

    fn user(&self, key: &str) -> PyResult<u32> {
        self.log
            .user_id(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown user `{key}`")))
    }

    fn item(&self, key: &str) -> PyResult<u32> {
        self.log
            .item_id(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown item `{key}`")))
    }
}

#[pymethods]
impl Engine {
    /// rows: list of (user, item, timestamp[, category]) tuples. Either
    /// every row carries a category or none does.
    #[new]
    #[pyo3(signature = (rows, min_interactions = 1, n_max = 10))]
    fn new(
        rows: Vec<(String, String, i64, Option<String>)>,
        min_interactions: usize,
        n_max: usize,
    ) -> PyResult<Self> {
        let with_cat = rows.iter().filter(|r| r.3.is_some()).count();
        let log = if with_cat == rows.len() {
            InteractionLog::from_rows_with_category(
                rows.into_iter()
                    .map(|(u, i, ts, c)| (u, i, ts, c.unwrap()))
                    .collect(),
                min_interactions,
            )
        } else if with_cat == 0 {
            InteractionLog::from_rows(
                rows.into_iter().map(|(u, i, ts, _)| (u, i, ts)).collect(),
                min_interactions,
            )
        } else {
            return Err(PyValueError::new_err(
                "rows mix categorized and uncategorized interactions",
            ));
        };
        let log = log.ok_or_else(|| {
            PyValueError::new_err("no interactions left after min_interactions filtering")
        })?;
        let (train_log, test) = split_leave_one_out(&log);
        let stats = CoocStats::from_log(&train_log);
        Ok(Engine {
            log,
            train_log,
            test,
            stats,
            n_max,
            model: None,
            index: None,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Engine({} users, {} items, {} interactions, model={}, index={})",
            self.log.n_users(),
            self.log.n_items(),
            self.log.n_interactions(),
            self.model.is_some(),
            self.index.is_some()
        )
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.log.n_users()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.log.n_items()
    }

    #[getter]
    fn n_interactions(&self) -> usize {
        self.log.n_interactions()
    }

    fn summary(&self) -> String {
        self.log.summary()
    }

    /// Pearson correlation between two items' user sets on the train split.
    fn pearson(&self, item_a: &str, item_b: &str) -> PyResult<f64> {
        Ok(self.stats.pearson(self.item(item_a)?, self.item(item_b)?))
    }

    /// Train a fresh model on the train split; returns per-epoch mean loss.
    #[pyo3(signature = (
        epochs = 5, batch_size = 64, negatives = 2, seed = 42, lr = 1e-3,
        hidden = 16, k = 8, alpha = 0.01
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        epochs: usize,
        batch_size: usize,
        negatives: usize,
        seed: u64,
        lr: f64,
        hidden: usize,
        k: usize,
        alpha: f64,
    ) -> PyResult<Vec<f64>> {
        let schemas = default_schema_set(&self.train_log, &self.stats);
        let config = ModelConfig {
            trig_hidden: vec![hidden],
            sim_hidden: vec![hidden],
            tower_hidden: vec![hidden],
            bias_hidden: vec![4],
            k,
            alpha,
        };
        let mut model = PdnModel::new(schemas, config, seed).map_err(runtime_err)?;
        let cfg = TrainConfig {
            epochs,
            batch_size,
            negatives_per_positive: negatives,
            n_max: self.n_max,
            seed,
            adam: pdn::tensorcore::AdamConfig {
                lr,
                ..Default::default()
            },
        };
        let trace = train(&mut model, &self.train_log, &self.stats, &cfg).map_err(runtime_err)?;
        self.model = Some(model);
        self.index = None;
        Ok(trace)
    }

    #[getter]
    fn model_id(&self) -> PyResult<String> {
        Ok(self.model()?.model_id())
    }

    /// Relevance score y_hat for one user-item pair (bias net excluded,
    /// as at serving time).
    fn score(&self, user: &str, item: &str) -> PyResult<f64> {
        let model = self.model()?;
        let u = self.user(user)?;
        let i = self.item(item)?;
        let now = self
            .train_log
            .user_history(u)
            .last()
            .map_or(i64::MAX, |r| r.timestamp + 1);
        let triggers: Vec<_> = user_triggers(&self.train_log, u, now, self.n_max)
            .into_iter()
            .filter(|t| t.item != i)
            .map(|t| model.trigger_input(&self.train_log, &self.stats, &t, i))
            .collect();
        let z_u = model.user_fv(u);
        let x_i = model.item_fv(&self.train_log, i);
        model.score(&z_u, &x_i, &triggers, None).map_err(runtime_err)
    }

    /// Build the item-to-item SimNet index from the trained model.
    #[pyo3(signature = (k = 60, k_hat = 600, session_window_secs = 3600))]
    fn build_index(&mut self, k: usize, k_hat: usize, session_window_secs: i64) -> PyResult<()> {
        let model = self.model()?;
        let pairs = generate_candidate_pairs(&self.train_log, k_hat, session_window_secs);
        let index =
            build_index(model, &self.train_log, &self.stats, &pairs, k).map_err(runtime_err)?;
        self.index = Some(index);
        Ok(())
    }

    /// Top index neighbors of an item as (item, similarity) pairs.
    fn neighbors(&self, item: &str) -> PyResult<Vec<(String, f64)>> {
        let j = self.item(item)?;
        Ok(self
            .index()?
            .neighbors(j)
            .iter()
            .map(|&(i, s)| (self.log.item_key(i).to_string(), s))
            .collect())
    }

    /// Greedy path-based retrieval for one user over the index.
    #[pyo3(signature = (user, m = 20, k = 100))]
    fn retrieve(&self, user: &str, m: usize, k: usize) -> PyResult<Vec<(String, f64, usize)>> {
        let model = self.model()?;
        let index = self.index()?;
        let u = self.user(user)?;
        let now = self
            .train_log
            .user_history(u)
            .last()
            .map_or(i64::MAX, |r| r.timestamp + 1);
        let history = user_triggers(&self.train_log, u, now, usize::MAX);
        let result =
            retrieve(model, index, &self.train_log, u, &history, m, k, None).map_err(runtime_err)?;
        Ok(result
            .items
            .into_iter()
            .map(|c| (self.log.item_key(c.item).to_string(), c.score, c.triggers.len()))
            .collect())
    }

    /// Leave-one-out evaluation on the held-out split. `method` is one of
    /// "pdn", "simnet" (index as item-to-item source) or "pcf".
    #[pyo3(signature = (method = "pdn", k = 10, negatives = 100, seed = 42))]
    fn evaluate(
        &self,
        py: Python<'_>,
        method: &str,
        k: usize,
        negatives: usize,
        seed: u64,
    ) -> PyResult<PyObject> {
        let protocol = Protocol::Sampled { n: negatives, seed };
        let report = match method {
            "pdn" => {
                let scorer = PdnScorer {
                    model: self.model()?,
                    train: &self.train_log,
                    stats: &self.stats,
                    n_max: self.n_max,
                };
                evaluate(&scorer, &self.train_log, &self.test, protocol, k)
            }
            "simnet" => {
                item_to_item_evaluate(self.index()?, "simnet", &self.train_log, &self.test, protocol, k)
            }
            "pcf" => {
                let cf = CfMatrix::build(&self.train_log, &self.stats, 60);
                item_to_item_evaluate(&cf, "pcf", &self.train_log, &self.test, protocol, k)
            }
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown method `{other}` (expected pdn, simnet or pcf)"
                )))
            }
        };
        report_to_dict(py, &report)
    }

    /// Persist the model checkpoint (and index, if built) under `dir`.
    fn save(&self, dir: PathBuf) -> PyResult<()> {
        let model = self.model()?;
        std::fs::create_dir_all(&dir).map_err(runtime_err)?;
        model.save(&dir.join("model")).map_err(runtime_err)?;
        if let Some(index) = &self.index {
            save_index(index, &dir.join("index.bin")).map_err(runtime_err)?;
        }
        Ok(())
    }

    /// Load a model checkpoint (and index.bin, if present) saved by `save`.
    fn load(&mut self, dir: PathBuf) -> PyResult<()> {
        let model = PdnModel::load(&dir.join("model")).map_err(runtime_err)?;
        let index_path = dir.join("index.bin");
        let index = if index_path.exists() {
            let idx = load_index(&index_path).map_err(runtime_err)?;
            idx.verify_model_id(&model.model_id()).map_err(runtime_err)?;
            Some(idx)
        } else {
            None
        };
        self.model = Some(model);
        self.index = index;
        Ok(())
    }

    /// Distinct-category histogram of the log, for quick sanity checks.
    fn category_counts(&self) -> HashMap<String, usize> {
        let mut counts = HashMap::new();
        for i in 0..self.log.n_items() as u32 {
            if let Some(c) = self.log.item_category(i) {
                *counts.entry(self.log.category_key(c).to_string()).or_insert(0) += 1;
            }
        }
        counts
    }
}

#[pymodule]
fn pdn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softplus, m)?)?;
    m.add_function(wrap_pyfunction!(merge_path, m)?)?;
    m.add_function(wrap_pyfunction!(click_probability, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_class::<Engine>()?;
    Ok(())
}
