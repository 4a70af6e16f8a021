use super::ParamStore;

/// Compare the analytic gradients already accumulated in `store` against
/// central finite differences of `loss`, returning the max relative error
/// over every scalar parameter.
///
/// `loss` must be deterministic in the parameters. The store's values are
/// restored exactly before returning.
pub fn grad_check<F>(mut loss: F, store: &mut ParamStore, eps: f64) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let mut max_rel = 0.0f64;
    for name in names {
        let len = store.get(&name).unwrap().len();
        for i in 0..len {
            let analytic = store.get(&name).unwrap().grad[i];
            let orig = store.get(&name).unwrap().value[i];
            store.get_mut(&name).unwrap().value[i] = orig + eps;
            let up = loss(store);
            store.get_mut(&name).unwrap().value[i] = orig - eps;
            let down = loss(store);
            store.get_mut(&name).unwrap().value[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
