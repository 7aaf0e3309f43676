//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use threepart::diagnostics::effective_sample_size;
use threepart::model::EquationColumns;
use threepart::sampler::{ChainMeta, ChainStore, Draw, Step2Set};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}


/// Truncated standard-normal shift: z ~ N(m, 1) restricted to z > 0 (or
/// z <= 0), by naive rejection near the mass and Robert's exponential
/// proposal in the tail.
pub fn tn_unit<R: Rng>(m: f64, positive: bool, rng: &mut R) -> f64 {
    // reduce to a standard normal restricted to (a, inf)
    let (a, sign) = if positive { (-m, 1.0) } else { (m, -1.0) };
    let z = if a < 0.5 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z > a {
                break z;
            }
        }
    } else {
        let alpha = (a + (a * a + 4.0).sqrt()) / 2.0;
        loop {
            let u: f64 = rng.random();
            let z = a - u.ln() / alpha;
            let rho = (-(z - alpha).powi(2) / 2.0).exp();
            if rng.random::<f64>() <= rho {
                break z;
            }
        }
    };
    // back to the original scale: u = m + sign * z
    m + sign * z
}

pub fn mvn_draw<R: Rng>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let l = cov.clone().cholesky().unwrap().l();
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + l * z
}

/// Albert–Chib augmented probit with β ~ N(0, 1000 I).
pub fn probit_gibbs(x: &[Vec<f64>], y: &[bool], iters: usize, burn: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = x[0].len();
    let xm = DMatrix::from_fn(x.len(), k, |i, j| x[i][j]);
    let v = (DMatrix::identity(k, k) / 1000.0 + xm.transpose() * &xm).try_inverse().unwrap();
    let mut beta = DVector::zeros(k);
    let mut out = Vec::new();
    for it in 0..iters {
        let mu = &xm * &beta;
        let z = DVector::from_fn(x.len(), |i, _| tn_unit(mu[i], y[i], &mut rng));
        let m = &v * (xm.transpose() * z);
        beta = mvn_draw(&m, &v, &mut rng);
        if it >= burn {
            out.push(beta.iter().copied().collect());
        }
    }
    out
}

/// Normal linear regression with β ~ N(0, 1000 I). σ² ~ IG(1, 1) unless
/// `fixed_variance` pins it.
pub fn regression_gibbs(
    x: &[Vec<f64>],
    y: &[f64],
    fixed_variance: Option<f64>,
    iters: usize,
    burn: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = x[0].len();
    let n = x.len() as f64;
    let xm = DMatrix::from_fn(x.len(), k, |i, j| x[i][j]);
    let yv = DVector::from_column_slice(y);
    let xtx = xm.transpose() * &xm;
    let xty = xm.transpose() * &yv;
    let mut s2 = fixed_variance.unwrap_or(1.0);
    let mut out = Vec::new();
    for it in 0..iters {
        let v = (DMatrix::identity(k, k) / 1000.0 + &xtx / s2).try_inverse().unwrap();
        let beta = mvn_draw(&(&v * &xty / s2), &v, &mut rng);
        let ssr = (&yv - &xm * &beta).norm_squared();
        // σ² ~ IG(1 + n/2, 1 + SSR/2) as 1 / Gamma
        if fixed_variance.is_none() {
            let g: f64 = rng.sample(rand_distr::Gamma::new(1.0 + n / 2.0, 1.0 / (1.0 + ssr / 2.0)).unwrap());
            s2 = 1.0 / g;
        }
        if it >= burn {
            out.push(beta.iter().copied().collect());
        }
    }
    out
}

pub fn mcse(x: &[f64]) -> f64 {
    sd(x) / effective_sample_size(x).unwrap().sqrt()
}

/// Two-sample Kolmogorov–Smirnov p-value (asymptotic distribution).
pub fn ks_p(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        p += 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

pub fn single_draw_chain(theta: Vec<f64>, sigma: Matrix3<f64>) -> ChainStore {
    let one = || vec!["intercept".to_string()];
    ChainStore {
        meta: ChainMeta {
            seed: 0,
            chain: 0,
            iterations: 1,
            burn_in: 0,
            thin: 1,
            step2: Step2Set::Accessed,
            columns: EquationColumns { access: one(), use_: one(), quantity: one() },
            n_obs: 0,
            group_counts: [0; 3],
            variance_repairs: 0,
        },
        draws: vec![Draw { theta: theta.clone(), omega: sigma, sigma, theta_identified: theta }],
        wall_time: Default::default(),
    }
}


/// Per-equation designs and outcomes in the layout the univariate samplers
/// take: access on everyone, use on those with access, log quantity on users.
pub struct Margins {
    pub xa: Vec<Vec<f64>>,
    pub a: Vec<bool>,
    pub xc: Vec<Vec<f64>>,
    pub c: Vec<bool>,
    pub xy: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

pub fn margins(dataset: &threepart::model::Dataset) -> Margins {
    let recs = dataset.records();
    let acc: Vec<_> = recs.iter().filter(|r| r.access).collect();
    let users: Vec<_> = acc.iter().filter(|r| r.uses == Some(true)).collect();
    Margins {
        xa: recs.iter().map(|r| r.x_access.clone()).collect(),
        a: recs.iter().map(|r| r.access).collect(),
        xc: acc.iter().map(|r| r.x_use.clone()).collect(),
        c: acc.iter().map(|r| r.uses == Some(true)).collect(),
        xy: users.iter().map(|r| r.x_quantity.clone()).collect(),
        y: users.iter().map(|r| r.log_quantity.unwrap()).collect(),
    }
}

/// `(mean_a - mean_b) / sqrt(mcse_a² + mcse_b²)` for coordinate `k` of each.
pub fn mc_z(a: &[f64], b: &[f64]) -> f64 {
    (mean(a) - mean(b)) / (mcse(a).powi(2) + mcse(b).powi(2)).sqrt()
}
