//! Browser bindings: a truncated-normal sampler histogram, a small synthetic
//! fit, and predictive curves from the fitted chain.
//!
//! Each operation has a plain Rust entry point returning JSON so it can be
//! exercised natively; the `#[wasm_bindgen]` wrappers only translate errors.

use serde::Serialize;
use threepart::distributions::{normal_cdf, normal_pdf, sample_truncated_normal, TruncationInterval};
use threepart::model::PriorSpec;
use threepart::policy::{predict_individual, AccessRegime, Estimate};
use threepart::rng::{Block, Streams};
use threepart::sampler::{run_chain, ChainConfig, ChainStore};
use threepart::synthetic::{generate, GeneratorSpec};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Histogram {
    edges: Vec<f64>,
    counts: Vec<usize>,
    /// Truncated density integrated over each bin, times the draw count.
    expected: Vec<f64>,
    mean: f64,
    exact_mean: f64,
}

pub fn histogram_json(
    mean: f64,
    variance: f64,
    lower: f64,
    upper: f64,
    draws: usize,
    bins: usize,
    seed: u64,
) -> Result<String, String> {
    let interval = TruncationInterval::new(lower, upper).map_err(|e| e.to_string())?;
    if draws == 0 || bins == 0 {
        return Err("draws and bins must be positive".into());
    }
    let sd = variance.sqrt();
    let mut rng = Streams::new(seed).block(0, Block::Predictive);
    let xs: Vec<f64> = (0..draws)
        .map(|_| sample_truncated_normal(mean, variance, interval, &mut rng))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    // plot range: the interval clipped to four sd beyond the draws
    let lo = if lower.is_finite() { lower } else { xs.iter().copied().fold(f64::INFINITY, f64::min) };
    let hi = if upper.is_finite() { upper } else { xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) };
    let width = (hi - lo).max(1e-12) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0; bins];
    for x in &xs {
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let z = |x: f64| (x - mean) / sd;
    let mass = normal_cdf(z(upper)) - normal_cdf(z(lower));
    let expected = edges
        .windows(2)
        .map(|e| draws as f64 * (normal_cdf(z(e[1])) - normal_cdf(z(e[0]))) / mass)
        .collect();
    let (a, b) = (z(lower), z(upper));
    let pdf = |t: f64| if t.is_finite() { normal_pdf(t) } else { 0.0 };
    let exact_mean = mean + sd * (pdf(a) - pdf(b)) / mass;
    let h = Histogram { edges, counts, expected, mean: xs.iter().sum::<f64>() / draws as f64, exact_mean };
    Ok(serde_json::to_string(&h).expect("plain data"))
}

#[derive(Serialize)]
struct ParameterRow {
    name: String,
    truth: f64,
    mean: f64,
    sd: f64,
}

#[derive(Serialize)]
struct FitSummary {
    group_counts: [usize; 3],
    draws: usize,
    parameters: Vec<ParameterRow>,
}

/// A chain fitted in the page, kept for prediction.
#[wasm_bindgen]
pub struct Fit {
    chain: ChainStore,
    summary: String,
}

impl Fit {
    pub fn run(n: usize, iterations: usize, burn_in: usize, correlations: [f64; 3], seed: u64) -> Result<Fit, String> {
        let [ac, ay, cy] = correlations;
        let spec = GeneratorSpec {
            sigma: [[1.0, ac, ay], [ac, 1.0, cy], [ay, cy, 1.0]],
            ..GeneratorSpec::recovery_design(n, seed)
        };
        let data = generate(&spec).map_err(|e| e.to_string())?;
        let cols = spec.columns();
        let prior = PriorSpec::vague(cols.total());
        let chain = run_chain(&data.dataset, prior, &ChainConfig::new(iterations, burn_in, 1, seed.wrapping_add(1)))
            .map_err(|e| e.to_string())?;

        let truth: Vec<f64> = [&spec.theta_access, &spec.theta_use, &spec.theta_quantity]
            .into_iter()
            .flatten()
            .copied()
            .chain([ac, ay, cy])
            .collect();
        let names = cols
            .access
            .iter()
            .map(|c| format!("access: {c}"))
            .chain(cols.use_.iter().map(|c| format!("use: {c}")))
            .chain(cols.quantity.iter().map(|c| format!("quantity: {c}")))
            .chain(["corr(access, use)", "corr(access, quantity)", "corr(use, quantity)"].map(String::from));
        let value = |d: &threepart::sampler::Draw, k: usize| {
            let p = cols.total();
            if k < p {
                d.theta_identified[k]
            } else {
                let s = &d.sigma;
                match k - p {
                    0 => s[(0, 1)],
                    1 => s[(0, 2)] / s[(2, 2)].sqrt(),
                    _ => s[(1, 2)] / s[(2, 2)].sqrt(),
                }
            }
        };
        let m = chain.draws.len() as f64;
        let parameters = names
            .zip(truth)
            .enumerate()
            .map(|(k, (name, truth))| {
                let v: Vec<f64> = chain.draws.iter().map(|d| value(d, k)).collect();
                let mean = v.iter().sum::<f64>() / m;
                let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt();
                ParameterRow { name, truth, mean, sd }
            })
            .collect();
        let summary = FitSummary { group_counts: chain.meta.group_counts, draws: chain.draws.len(), parameters };
        Ok(Fit { summary: serde_json::to_string(&summary).expect("plain data"), chain })
    }

    /// Predictions for an individual whose regressors are all zero except
    /// `regressor` (1 or 2, shared across the three equations), swept over
    /// `values`.
    pub fn curve(&self, regressor: usize, values: &[f64], legalized: bool, mc: usize, seed: u64) -> Result<String, String> {
        #[derive(Serialize)]
        struct Point {
            x: f64,
            p_access: Estimate,
            p_use: Estimate,
            p_use_given_access: Estimate,
            consumption: Estimate,
        }
        let [pa, pc, py] = self.chain.dims();
        if regressor == 0 || regressor >= pa.min(pc).min(py) {
            return Err(format!("regressor must be between 1 and {}", pa.min(pc).min(py) - 1));
        }
        let regime = if legalized { AccessRegime::Legalized } else { AccessRegime::Observed };
        let streams = Streams::new(seed);
        let points = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let row = |p: usize| {
                    let mut x = vec![0.0; p];
                    x[0] = 1.0;
                    x[regressor] = v;
                    x
                };
                let mut rng = streams.block(i as u64, Block::Predictive);
                let r = predict_individual(&[row(pa), row(pc), row(py)], &self.chain, regime, mc, &mut rng)
                    .map_err(|e| e.to_string())?;
                Ok(Point {
                    x: v,
                    p_access: r.p_access,
                    p_use: r.p_use,
                    p_use_given_access: r.p_use_given_access,
                    consumption: r.consumption,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(serde_json::to_string(&points).expect("plain data"))
    }
}

#[wasm_bindgen]
impl Fit {
    #[wasm_bindgen(constructor)]
    pub fn new(
        n: usize,
        iterations: usize,
        burn_in: usize,
        corr_ac: f64,
        corr_ay: f64,
        corr_cy: f64,
        seed: u32,
    ) -> Result<Fit, JsError> {
        Fit::run(n, iterations, burn_in, [corr_ac, corr_ay, corr_cy], seed.into()).map_err(|e| JsError::new(&e))
    }

    pub fn summary(&self) -> String {
        self.summary.clone()
    }

    #[wasm_bindgen(js_name = curve)]
    pub fn curve_js(&self, regressor: usize, values: Vec<f64>, legalized: bool, mc: usize, seed: u32) -> Result<String, JsError> {
        self.curve(regressor, &values, legalized, mc, seed.into()).map_err(|e| JsError::new(&e))
    }
}

#[wasm_bindgen]
pub fn truncated_normal_histogram(
    mean: f64,
    variance: f64,
    lower: f64,
    upper: f64,
    draws: usize,
    bins: usize,
    seed: u32,
) -> Result<String, JsError> {
    histogram_json(mean, variance, lower, upper, draws, bins, seed.into()).map_err(|e| JsError::new(&e))
}
