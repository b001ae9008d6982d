use super::{Graph, NumericsError, ParamStore, Var};

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Max over checked scalars of `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
    pub max_rel_err: f64,
    /// Parameter path and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of every tunable scalar in `store` against
/// `(f(p+ε) − f(p−ε)) / 2ε`.
///
/// `loss_fn` builds a fresh graph from the store and returns it with its
/// scalar loss node. The store is perturbed in place and restored bitwise.
pub fn finite_diff_check<E, F>(store: &mut ParamStore, eps: f64, loss_fn: F) -> Result<FdReport, E>
where
    E: From<NumericsError>,
    F: FnMut(&ParamStore) -> Result<(Graph, Var), E>,
{
    let paths: Vec<String> = store.tunable().iter().cloned().collect();
    finite_diff_check_paths(store, &paths, eps, loss_fn)
}

/// [`finite_diff_check`] restricted to the tunable tensors in `paths`.
pub fn finite_diff_check_paths<E, F>(store: &mut ParamStore, paths: &[String], eps: f64, mut loss_fn: F) -> Result<FdReport, E>
where
    E: From<NumericsError>,
    F: FnMut(&ParamStore) -> Result<(Graph, Var), E>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::BadEpsilon(eps).into());
    }
    let (graph, loss) = loss_fn(store)?;
    let first = graph.value(loss).item();
    let grads = graph.backward(loss)?;
    drop(graph);

    let (g2, l2) = loss_fn(store)?;
    let second = g2.value(l2).item();
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { first, second }.into());
    }
    drop(g2);

    let mut eval = |s: &ParamStore| -> Result<f64, E> {
        let (g, l) = loss_fn(s)?;
        Ok(g.value(l).item())
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for path in paths {
        let analytic = grads
            .get(path)
            .cloned()
            .ok_or_else(|| NumericsError::UnknownParam(path.clone()))?;
        let n = store.get(path).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = store.get(path).unwrap().data()[i];
            store.get_mut(path).unwrap().data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(path).unwrap().data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(path).unwrap().data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((path.to_string(), i));
            }
        }
    }
    Ok(report)
}
