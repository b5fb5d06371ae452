use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParameterStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates_checked: usize,
}

/// Compares analytic parameter gradients of `loss_fn` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` on up to `samples` coordinates.
///
/// The error for one coordinate is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`. When `samples`
/// covers every coordinate, all of them are checked in order.
pub fn grad_check<F>(
    store: &ParameterStore,
    loss_fn: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?.into_params()
    };

    let sizes: Vec<usize> = store.iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<(usize, usize)> = if samples >= total {
        sizes
            .iter()
            .enumerate()
            .flat_map(|(p, &n)| (0..n).map(move |c| (p, c)))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| {
                let mut flat = rng.random_range(0..total);
                let mut p = 0;
                while flat >= sizes[p] {
                    flat -= sizes[p];
                    p += 1;
                }
                (p, flat)
            })
            .collect()
    };

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::inference(s);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss)[0])
    };

    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &(p, c) in &coords {
        let original = work.by_index(p).1.data()[c];
        work.by_index_mut(p).1.data_mut()[c] = original + eps;
        let plus = eval(&work)?;
        work.by_index_mut(p).1.data_mut()[c] = original - eps;
        let minus = eval(&work)?;
        work.by_index_mut(p).1.data_mut()[c] = original;

        let numeric = (plus - minus) / (2.0 * eps);
        let exact = analytic.param(p).map_or(0.0, |g| g[c]);
        let err = (exact - numeric).abs() / 1f64.max(exact.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        coordinates_checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorValue;

    #[test]
    fn sum_of_squares_passes() {
        let mut s = ParameterStore::new();
        s.insert("x", TensorValue::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap())
            .unwrap();
        let report = grad_check(
            &s,
            |g| {
                let x = g.param("x")?;
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert_eq!(report.coordinates_checked, 3);
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly zero has a kink: analytic 0, numeric 0.5
        let mut s = ParameterStore::new();
        s.insert("x", TensorValue::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let report = grad_check(
            &s,
            |g| {
                let x = g.param("x")?;
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            1e-5,
            1,
            0,
        )
        .unwrap();
        assert!(report.max_relative_error > 0.4);
    }
}
