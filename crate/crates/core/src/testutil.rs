//! Synthetic designs shared by the unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::model::{self, BasisSpec, Family, GamDesign};

/// Intercept plus a binary column, `q` uniform covariates with sine effects.
pub(crate) fn make_design(family: Family, n: usize, q: usize, knots: usize, seed: u64) -> GamDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<Vec<f64>> = (0..q)
        .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
        .collect();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i % 2) as f64 });
    let y = DVector::from_fn(n, |i, _| {
        let f: f64 = u.iter().enumerate().map(|(j, c)| ((j + 1) as f64 * 3.0 * c[i]).sin()).sum();
        let eta = 0.2 + 0.4 * x[(i, 1)] + 0.8 * f;
        match family {
            Family::Normal => eta + 0.5 * rng.sample::<f64, _>(StandardNormal),
            Family::Poisson => Poisson::new(eta.exp()).unwrap().sample(&mut rng),
            Family::Bernoulli => (rng.random::<f64>() < model::logistic(eta)) as u8 as f64,
        }
    });
    GamDesign::from_covariates(family, y, x, &u, BasisSpec::cubic(knots)).unwrap()
}
