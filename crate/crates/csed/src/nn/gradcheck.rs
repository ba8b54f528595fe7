//! Finite-difference verification of analytic gradients.
//!
//! Central differences with a caller-chosen step, compared coordinate by
//! coordinate against gradients from a backward sweep. Used by the test
//! suite; kept in the library so integration tests and binaries share one
//! implementation.

use std::collections::BTreeMap;

use rand::Rng;

use super::optim::ParamStore;
use super::tensor::{Tensor, TensorError};

/// |a - b| relative to the magnitude of the pair, floored so that two
/// near-zero values compare equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// One coordinate of one named parameter tensor.
pub type Coord = (String, usize);

/// Draws `n` coordinates uniformly over all scalar parameters in the store.
pub fn sample_coords(store: &ParamStore, n: usize, rng: &mut impl Rng) -> Vec<Coord> {
    let sizes: Vec<(String, usize)> = store
        .names()
        .map(|name| (name.to_string(), store.get(name).unwrap().len()))
        .collect();
    let total: usize = sizes.iter().map(|(_, l)| l).sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut flat = rng.gen_range(0..total);
        for (name, len) in &sizes {
            if flat < *len {
                out.push((name.clone(), flat));
                break;
            }
            flat -= len;
        }
    }
    out
}

#[derive(Debug)]
pub struct GradCheckSummary {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: String,
    pub worst_numeric: f64,
    pub worst_analytic: f64,
}

/// Compares analytic gradients against central differences of `forward` at
/// the listed coordinates. `forward` must be a pure function of the store's
/// current values.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    mut forward: F,
    analytic: &BTreeMap<String, Tensor>,
    coords: &[Coord],
    step: f64,
) -> Result<GradCheckSummary, TensorError>
where
    F: FnMut(&ParamStore) -> Result<f64, TensorError>,
{
    if coords.is_empty() {
        return Err(TensorError::Argument("gradcheck: no coordinates".into()));
    }
    let mut summary = GradCheckSummary {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst_coord: String::new(),
        worst_numeric: 0.0,
        worst_analytic: 0.0,
    };
    for (name, idx) in coords {
        let original = {
            let t = store
                .get(name)
                .ok_or_else(|| TensorError::Usage(format!("gradcheck: unknown parameter {name:?}")))?;
            t.data()[*idx]
        };
        store.set_value(name, *idx, original + step)?;
        let f_plus = forward(store)?;
        store.set_value(name, *idx, original - step)?;
        let f_minus = forward(store)?;
        store.set_value(name, *idx, original)?;
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic
            .get(name)
            .ok_or_else(|| TensorError::Usage(format!("gradcheck: no analytic gradient for {name:?}")))?
            .data()[*idx];
        let rel = relative_error(numeric, a);
        summary.coords_checked += 1;
        if rel >= summary.max_rel_err {
            summary.max_rel_err = rel;
            summary.worst_coord = format!("{name}[{idx}]");
            summary.worst_numeric = numeric;
            summary.worst_analytic = a;
        }
    }
    Ok(summary)
}

impl ParamStore {
    /// Overwrites one scalar coordinate; finite differencing needs this.
    pub fn set_value(&mut self, name: &str, idx: usize, value: f64) -> Result<(), TensorError> {
        let t = self
            .value_mut(name)
            .ok_or_else(|| TensorError::Usage(format!("unknown parameter {name:?}")))?;
        if idx >= t.len() {
            return Err(TensorError::Argument(format!(
                "coordinate {idx} out of range for {name:?} with {} elements",
                t.len()
            )));
        }
        t.data_mut()[idx] = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relative_error_floors_near_zero() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, -1e-12) < 1e-3);
        assert!(relative_error(1.0, 1.1) > 0.01);
    }

    #[test]
    fn quadratic_loss_gradient_checks_out() {
        // loss = sum(w * w), gradient 2w.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.init_uniform("w", vec![3], 1, &mut rng).unwrap();
        let forward = |s: &ParamStore| -> Result<f64, TensorError> {
            let mut tape = Tape::new();
            let ids = s.bind(&mut tape)?;
            let w = ids["w"];
            let sq = tape.mul(w, w)?;
            let loss = tape.sum_all(sq);
            Ok(tape.value(loss).scalar_value())
        };
        let analytic = {
            let mut tape = Tape::new();
            let ids = store.bind(&mut tape).unwrap();
            let w = ids["w"];
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss).unwrap().into_named()
        };
        let coords: Vec<Coord> = (0..3).map(|i| ("w".to_string(), i)).collect();
        let summary = check_gradients(&mut store, forward, &analytic, &coords, 1e-5).unwrap();
        assert_eq!(summary.coords_checked, 3);
        assert!(summary.max_rel_err < 1e-9, "{summary:?}");
    }

    #[test]
    fn detects_wrong_gradients() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![1], vec![0.7]).unwrap())
            .unwrap();
        let forward = |s: &ParamStore| -> Result<f64, TensorError> {
            Ok(s.get("w").unwrap().data()[0].powi(2))
        };
        let mut wrong = BTreeMap::new();
        wrong.insert("w".to_string(), Tensor::new(vec![1], vec![5.0]).unwrap());
        let coords = vec![("w".to_string(), 0)];
        let summary = check_gradients(&mut store, forward, &wrong, &coords, 1e-5).unwrap();
        assert!(summary.max_rel_err > 0.1);
    }

    #[test]
    fn sample_coords_stays_in_bounds() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::zeros(vec![2])).unwrap();
        store.insert("b", Tensor::zeros(vec![3, 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (name, idx) in sample_coords(&store, 50, &mut rng) {
            assert!(idx < store.get(&name).unwrap().len());
        }
    }
}
