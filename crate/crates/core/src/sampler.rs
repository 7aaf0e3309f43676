//! Data-augmented Gibbs sampler for the three-part model.
//!
//! One sweep draws, in order: the latent utilities `(U_a, U_c)` of every
//! observation, the stacked location vector θ, and the unidentified
//! covariance Ω through its sequential (Bartlett) decomposition. Draws are
//! mapped to the identified scale after every sweep.
//!
//! Observations are processed in ascending id order and each one draws from
//! its own substream, so the chain does not depend on the input row order.

use std::time::Duration;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    sample_inverse_wishart_1d, sample_matrix_normal, sample_normal_from_precision,
    sample_truncated_normal, TruncationInterval,
};
use crate::error::{Error, Result};
use crate::model::{identify, Dataset, EquationColumns, Group, LocationParams, PriorSpec};
use crate::rng::{Block, Streams};

/// Which accessed observations inform the `(ω_c², ω_ca)` block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step2Set {
    /// Every observation with access (G2 ∪ G3).
    #[default]
    Accessed,
    /// Only those with access who do not use (G2).
    AccessOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    #[serde(default)]
    pub chain: u64,
    #[serde(default)]
    pub step2: Step2Set,
}

impl ChainConfig {
    pub fn new(iterations: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        Self {
            iterations,
            burn_in,
            thin,
            seed,
            chain: 0,
            step2: Step2Set::default(),
        }
    }

    pub fn retained(&self) -> usize {
        self.iterations.saturating_sub(self.burn_in) / self.thin.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 {
            return Err(Error::InvalidArgument(
                "iterations and thin must be positive".into(),
            ));
        }
        if self.retained() == 0 {
            return Err(Error::InvalidArgument("no retained draws".into()));
        }
        Ok(())
    }
}

/// Augmented latent utilities, in the sampler's (ascending id) order.
/// `use_` is NaN for observations without access.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub ids: Vec<u64>,
    pub access: Vec<f64>,
    pub use_: Vec<f64>,
}

/// Conditional of one coordinate given the other observed coordinates of
/// its group: mean shift coefficients and variance.
#[derive(Debug, Clone, Copy)]
struct Conditional {
    coef: [f64; 2],
    var: f64,
}

/// Per-sweep conditional moments derived from Ω.
struct LatentConditionals {
    g1_var: f64,
    g2: [Conditional; 2],
    g3: [Conditional; 2],
    repairs: usize,
}

fn conditional(block: &DMatrix<f64>, l: usize, repairs: &mut usize) -> Result<Conditional> {
    let d = block.nrows();
    let others: Vec<usize> = (0..d).filter(|&k| k != l).collect();
    let rest = DMatrix::from_fn(d - 1, d - 1, |i, j| block[(others[i], others[j])]);
    let cross = DVector::from_fn(d - 1, |i, _| block[(l, others[i])]);
    let chol = rest
        .cholesky()
        .ok_or_else(|| Error::numerical("latent conditioning block is not positive definite"))?;
    let coef_v = chol.solve(&cross);
    let mut var = block[(l, l)] - coef_v.dot(&cross);
    let floor = block[(l, l)] * 1e-10;
    if !(var > floor) {
        var = floor;
        *repairs += 1;
    }
    let mut coef = [0.0; 2];
    coef[..d - 1].copy_from_slice(coef_v.as_slice());
    Ok(Conditional { coef, var })
}

impl LatentConditionals {
    fn new(omega: &Matrix3<f64>) -> Result<Self> {
        let mut repairs = 0;
        let g2 = Group::AccessOnly.block(omega);
        let g3 = Group::User.block(omega);
        Ok(Self {
            g1_var: omega[(0, 0)],
            g2: [conditional(&g2, 0, &mut repairs)?, conditional(&g2, 1, &mut repairs)?],
            g3: [conditional(&g3, 0, &mut repairs)?, conditional(&g3, 1, &mut repairs)?],
            repairs,
        })
    }
}

/// Row-major regressors of one equation.
#[derive(Debug, Clone)]
struct Design {
    dim: usize,
    data: Vec<f64>,
}

impl Design {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn dot(&self, i: usize, beta: &DVector<f64>) -> f64 {
        self.row(i).iter().zip(beta.iter()).map(|(x, b)| x * b).sum()
    }
}

/// The Gibbs sampler bound to one dataset and prior.
pub struct GibbsSampler {
    ids: Vec<u64>,
    groups: Vec<Group>,
    access: Vec<bool>,
    uses: Vec<bool>,
    quantity: Vec<f64>,
    designs: [Design; 3],
    columns: EquationColumns,
    counts: [usize; 3],
    /// `Σ_{i∈g} x_j x_k'` for every group and equation pair.
    cross: [[[DMatrix<f64>; 3]; 3]; 3],
    prior: PriorSpec,
    prior_precision: DMatrix<f64>,
    prior_shift: DVector<f64>,
    step2: Step2Set,
}

impl GibbsSampler {
    pub fn new(dataset: &Dataset, prior: PriorSpec) -> Result<Self> {
        let columns = dataset.columns().clone();
        let dims = columns.dims();
        prior.validate(columns.total())?;

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.sort_by_key(|&i| dataset.records()[i].id);
        let records: Vec<_> = order.iter().map(|&i| &dataset.records()[i]).collect();

        let designs = [0, 1, 2].map(|e| Design {
            dim: dims[e],
            data: records
                .iter()
                .flat_map(|r| r.regressors(crate::model::Equation::ALL[e]).iter().copied())
                .collect(),
        });
        let groups: Vec<Group> = records.iter().map(|r| r.group()).collect();
        let mut counts = [0; 3];
        for g in &groups {
            counts[g.index()] += 1;
        }

        let mut cross: [[[DMatrix<f64>; 3]; 3]; 3] = std::array::from_fn(|_| {
            std::array::from_fn(|j| std::array::from_fn(|k| DMatrix::zeros(dims[j], dims[k])))
        });
        for (i, g) in groups.iter().enumerate() {
            let d = g.dim();
            for j in 0..d {
                let xj = designs[j].row(i);
                for k in j..d {
                    let xk = designs[k].row(i);
                    let m = &mut cross[g.index()][j][k];
                    for (p, &a) in xj.iter().enumerate() {
                        for (q, &b) in xk.iter().enumerate() {
                            m[(p, q)] += a * b;
                        }
                    }
                }
            }
        }
        for g in 0..3 {
            for j in 0..3 {
                for k in 0..j {
                    cross[g][j][k] = cross[g][k][j].transpose();
                }
            }
        }

        let cov_chol = prior
            .theta_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("prior location covariance is not SPD".into()))?;
        let prior_precision = cov_chol.inverse();
        let prior_shift = &prior_precision * &prior.theta_mean;

        Ok(Self {
            ids: records.iter().map(|r| r.id).collect(),
            groups,
            access: records.iter().map(|r| r.access).collect(),
            uses: records.iter().map(|r| r.uses == Some(true)).collect(),
            quantity: records.iter().map(|r| r.log_quantity.unwrap_or(f64::NAN)).collect(),
            designs,
            columns,
            counts,
            cross,
            prior,
            prior_precision,
            prior_shift,
            step2: Step2Set::default(),
        })
    }

    pub fn with_step2(mut self, step2: Step2Set) -> Self {
        self.step2 = step2;
        self
    }

    pub fn columns(&self) -> &EquationColumns {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn index(&self, i: usize, theta: &LocationParams) -> [f64; 3] {
        [
            self.designs[0].dot(i, &theta.access),
            self.designs[1].dot(i, &theta.use_),
            self.designs[2].dot(i, &theta.quantity),
        ]
    }

    /// Latents drawn from their truncated priors at θ = 0, Ω = I.
    pub fn initial_latents(&self, streams: &Streams) -> Result<LatentState> {
        let n = self.len();
        let mut state = LatentState {
            ids: self.ids.clone(),
            access: vec![0.0; n],
            use_: vec![f64::NAN; n],
        };
        for i in 0..n {
            let mut rng = streams.observation(0, self.ids[i]);
            let draw = |positive, rng: &mut _| {
                sample_truncated_normal(0.0, 1.0, TruncationInterval::for_indicator(positive), rng)
                    .map_err(|e| e.at_observation(self.ids[i]))
            };
            state.access[i] = draw(self.access[i], &mut rng)?;
            if self.access[i] {
                state.use_[i] = draw(self.uses[i], &mut rng)?;
            }
        }
        Ok(state)
    }

    /// Redraws every latent utility from its truncated-normal full
    /// conditional. Returns the number of conditional variances that had to
    /// be floored.
    pub fn draw_latents(
        &self,
        latents: &mut LatentState,
        theta: &LocationParams,
        omega: &Matrix3<f64>,
        streams: &Streams,
        sweep: u64,
    ) -> Result<usize> {
        let cond = LatentConditionals::new(omega)?;
        for i in 0..self.len() {
            let id = self.ids[i];
            let mut rng = streams.observation(sweep, id);
            let mu = self.index(i, theta);
            let tn = |mean: f64, var: f64, positive: bool, rng: &mut _| {
                sample_truncated_normal(mean, var, TruncationInterval::for_indicator(positive), rng)
                    .map_err(|e| e.at_observation(id))
            };
            match self.groups[i] {
                Group::NoAccess => {
                    latents.access[i] = tn(mu[0], cond.g1_var, false, &mut rng)?;
                }
                Group::AccessOnly => {
                    let [ca, cc] = cond.g2;
                    let m = mu[0] + ca.coef[0] * (latents.use_[i] - mu[1]);
                    latents.access[i] = tn(m, ca.var, true, &mut rng)?;
                    let m = mu[1] + cc.coef[0] * (latents.access[i] - mu[0]);
                    latents.use_[i] = tn(m, cc.var, false, &mut rng)?;
                }
                Group::User => {
                    let [ca, cc] = cond.g3;
                    let ry = self.quantity[i] - mu[2];
                    let m = mu[0] + ca.coef[0] * (latents.use_[i] - mu[1]) + ca.coef[1] * ry;
                    latents.access[i] = tn(m, ca.var, true, &mut rng)?;
                    let m = mu[1] + cc.coef[0] * (latents.access[i] - mu[0]) + cc.coef[1] * ry;
                    latents.use_[i] = tn(m, cc.var, true, &mut rng)?;
                }
            }
        }
        Ok(cond.repairs)
    }

    fn stacked_obs(&self, i: usize, latents: &LatentState) -> [f64; 3] {
        [latents.access[i], latents.use_[i], self.quantity[i]]
    }

    /// Draws θ from its multivariate normal full conditional.
    pub fn draw_theta<R: Rng + ?Sized>(
        &self,
        latents: &LatentState,
        omega: &Matrix3<f64>,
        rng: &mut R,
    ) -> Result<LocationParams> {
        let dims = self.columns.dims();
        let offsets = [0, dims[0], dims[0] + dims[1]];
        let mut precision = self.prior_precision.clone();
        let mut rhs = self.prior_shift.clone();

        let inverses: Vec<DMatrix<f64>> = Group::ALL
            .iter()
            .map(|g| {
                g.block(omega)
                    .cholesky()
                    .map(|c| c.inverse())
                    .ok_or_else(|| Error::numerical("covariance block is not positive definite"))
            })
            .collect::<Result<_>>()?;

        for g in Group::ALL {
            if self.counts[g.index()] == 0 {
                continue;
            }
            let inv = &inverses[g.index()];
            for j in 0..g.dim() {
                for k in 0..g.dim() {
                    let w = inv[(j, k)];
                    let mut view =
                        precision.view_mut((offsets[j], offsets[k]), (dims[j], dims[k]));
                    view += &self.cross[g.index()][j][k] * w;
                }
            }
        }

        for i in 0..self.len() {
            let g = self.groups[i];
            let d = g.dim();
            let inv = &inverses[g.index()];
            let t = self.stacked_obs(i, latents);
            for j in 0..d {
                let v: f64 = (0..d).map(|k| inv[(j, k)] * t[k]).sum();
                for (p, x) in self.designs[j].row(i).iter().enumerate() {
                    rhs[offsets[j] + p] += v * x;
                }
            }
        }

        let chol = precision.clone().cholesky().ok_or_else(|| {
            let eig = precision.symmetric_eigenvalues();
            let (lo, hi) = eig.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| {
                (lo.min(e), hi.max(e))
            });
            Error::numerical(format!(
                "location posterior precision is singular (condition number {:.3e})",
                hi / lo
            ))
        })?;
        let (draw, _) = sample_normal_from_precision(&chol, &rhs, rng);
        LocationParams::from_stacked(draw.as_slice(), dims)
    }

    /// Residual `T - Xθ` of one observation (entries beyond its group's
    /// dimension are meaningless).
    fn residual(&self, i: usize, latents: &LatentState, theta: &LocationParams) -> [f64; 3] {
        let mu = self.index(i, theta);
        let t = self.stacked_obs(i, latents);
        [t[0] - mu[0], t[1] - mu[1], t[2] - mu[2]]
    }

    /// Draws Ω by the sequential decomposition: ω_a², then (ω_ca, ω_c²)
    /// from the accessed observations, then (ω_ya, ω_yc, ω_y²) from users.
    pub fn draw_omega<R: Rng + ?Sized>(
        &self,
        latents: &LatentState,
        theta: &LocationParams,
        rng: &mut R,
    ) -> Result<Matrix3<f64>> {
        let r0 = &self.prior.omega_scale;
        let dof0 = self.prior.omega_dof;

        let mut r11 = r0[(0, 0)];
        let mut r22n = Matrix2::new(r0[(0, 0)], r0[(0, 1)], r0[(1, 0)], r0[(1, 1)]);
        let mut rn = *r0;
        let mut n2 = 0usize;
        for i in 0..self.len() {
            let e = self.residual(i, latents, theta);
            r11 += e[0] * e[0];
            let g = self.groups[i];
            let in_step2 = match self.step2 {
                Step2Set::Accessed => g != Group::NoAccess,
                Step2Set::AccessOnly => g == Group::AccessOnly,
            };
            if in_step2 {
                let v = Vector2::new(e[0], e[1]);
                r22n += v * v.transpose();
                n2 += 1;
            }
            if g == Group::User {
                let v = nalgebra::Vector3::from(e);
                rn += v * v.transpose();
            }
        }
        let n = self.len() as f64;
        let n3 = self.counts[Group::User.index()] as f64;

        // step 1
        let omega_a2 = sample_inverse_wishart_1d(r11, dof0 - 2.0 + n, rng)?;

        // step 2
        let r22_1 = schur_2x2(&r22n)?;
        let omega_c1 = sample_inverse_wishart_1d(r22_1, dof0 - 1.0 + n2 as f64, rng)?;
        let z: f64 = rng.sample(StandardNormal);
        let omega_ca1 = r22n[(1, 0)] / r22n[(0, 0)] + (omega_c1 / r22n[(0, 0)]).sqrt() * z;
        let omega_ca = omega_ca1 * omega_a2;
        let omega_c2 = omega_c1 + omega_ca * omega_ca / omega_a2;
        let omega22 = Matrix2::new(omega_a2, omega_ca, omega_ca, omega_c2);

        // step 3
        let rn22 = Matrix2::new(rn[(0, 0)], rn[(0, 1)], rn[(1, 0)], rn[(1, 1)]);
        let rn32 = Vector2::new(rn[(2, 0)], rn[(2, 1)]);
        let rn22_chol = rn22
            .cholesky()
            .ok_or_else(|| Error::numerical("accumulated 2x2 scale is not positive definite"))?;
        let regression = rn22_chol.solve(&rn32);
        let r33_1 = rn[(2, 2)] - regression.dot(&rn32);
        let r33_1 = if r33_1 > 0.0 {
            r33_1
        } else {
            schur_3x3(&rn)?
        };
        let omega_y1 = sample_inverse_wishart_1d(r33_1, dof0 + n3, rng)?;
        let rn22_inv = rn22_chol.inverse();
        let mean = DMatrix::from_row_slice(1, 2, regression.as_slice());
        let row_scale = DMatrix::from_row_slice(2, 2, rn22_inv.as_slice());
        let omega32_1 = sample_matrix_normal(&mean, &row_scale, omega_y1, rng)?;
        let b = Vector2::new(omega32_1[(0, 0)], omega32_1[(0, 1)]);
        let omega32 = omega22 * b;
        let omega_y2 = omega_y1 + omega32.dot(&b);

        let omega = Matrix3::new(
            omega_a2, omega_ca, omega32[0],
            omega_ca, omega_c2, omega32[1],
            omega32[0], omega32[1], omega_y2,
        );
        if omega.cholesky().is_none() {
            return Err(Error::numerical("assembled covariance is not positive definite"));
        }
        Ok(omega)
    }

    /// Runs one chain.
    pub fn run(&self, config: &ChainConfig) -> Result<ChainStore> {
        config.validate()?;
        let sampler_step2 = self.step2;
        let started = Stopwatch::start();
        let streams = Streams::for_chain(config.seed, config.chain);
        let dims = self.columns.dims();

        let mut theta = LocationParams::zeros(dims);
        let mut omega = Matrix3::identity();
        let mut latents = self.initial_latents(&streams)?;
        let mut draws = Vec::with_capacity(config.retained());
        let mut repairs = 0usize;

        let dump = |theta: &LocationParams, omega: &Matrix3<f64>| {
            format!("theta={:?} omega={:?}", theta.stacked(), omega.as_slice())
        };
        let fail = |it: usize, e: Error, state: String| match e {
            Error::Numerical { message, .. } => Error::Numerical {
                iteration: Some(it),
                message,
                state: Some(state),
            },
            Error::Decomposition(message) | Error::InvalidArgument(message) => Error::Numerical {
                iteration: Some(it),
                message,
                state: Some(state),
            },
            other => other,
        };

        for it in 1..=config.iterations {
            let sweep = it as u64;
            repairs += self
                .draw_latents(&mut latents, &theta, &omega, &streams, sweep)
                .map_err(|e| fail(it, e, dump(&theta, &omega)))?;
            theta = self
                .draw_theta(&latents, &omega, &mut streams.block(sweep, Block::Location))
                .map_err(|e| fail(it, e, dump(&theta, &omega)))?;
            omega = self
                .draw_omega(&latents, &theta, &mut streams.block(sweep, Block::Covariance))
                .map_err(|e| fail(it, e, dump(&theta, &omega)))?;
            let id = identify(&omega).map_err(|e| fail(it, e, dump(&theta, &omega)))?;
            let finite = theta.stacked().iter().all(|x| x.is_finite())
                && omega.iter().all(|x| x.is_finite());
            if !finite {
                return Err(fail(
                    it,
                    Error::numerical("non-finite parameter"),
                    dump(&theta, &omega),
                ));
            }

            if it > config.burn_in && (it - config.burn_in).is_multiple_of(config.thin) {
                draws.push(Draw {
                    theta: theta.stacked(),
                    omega,
                    sigma: id.sigma,
                    theta_identified: theta.rescaled(id.rescale).stacked(),
                });
            }
        }
        debug_assert_eq!(draws.len(), config.retained());

        Ok(ChainStore {
            meta: ChainMeta {
                seed: config.seed,
                chain: config.chain,
                iterations: config.iterations,
                burn_in: config.burn_in,
                thin: config.thin,
                step2: sampler_step2,
                columns: self.columns.clone(),
                n_obs: self.len(),
                group_counts: self.counts,
                variance_repairs: repairs,
            },
            draws,
            wall_time: started.elapsed(),
        })
    }
}

/// `r22 - r12² / r11`, falling back to the Cholesky route when direct
/// subtraction cancels.
fn schur_2x2(m: &Matrix2<f64>) -> Result<f64> {
    let direct = m[(1, 1)] - m[(0, 1)] * m[(0, 1)] / m[(0, 0)];
    if direct > 0.0 {
        return Ok(direct);
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::numerical("accumulated 2x2 scale is not positive definite"))?;
    let l = chol.l()[(1, 1)];
    let v = l * l;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(Error::numerical("conditional scale is not positive"))
    }
}

fn schur_3x3(m: &Matrix3<f64>) -> Result<f64> {
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::numerical("accumulated 3x3 scale is not positive definite"))?;
    let l = chol.l()[(2, 2)];
    let v = l * l;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(Error::numerical("conditional scale is not positive"))
    }
}

// wasm32-unknown-unknown has no clock; chains there report zero wall time.
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Self(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn elapsed(&self) -> Duration {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed();
        #[cfg(target_arch = "wasm32")]
        Duration::ZERO
    }
}

/// One retained draw on both scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    /// Stacked θ on the sampling (unidentified) scale.
    pub theta: Vec<f64>,
    pub omega: Matrix3<f64>,
    pub sigma: Matrix3<f64>,
    /// θ with the probit blocks divided by √ω_aa and √ω_cc.
    pub theta_identified: Vec<f64>,
}

impl Draw {
    pub fn location(&self, dims: [usize; 3]) -> LocationParams {
        LocationParams::from_stacked(&self.theta_identified, dims)
            .expect("stored draws match the column layout")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub seed: u64,
    pub chain: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub step2: Step2Set,
    pub columns: EquationColumns,
    pub n_obs: usize,
    pub group_counts: [usize; 3],
    pub variance_repairs: usize,
}

/// Retained draws plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStore {
    pub meta: ChainMeta,
    pub draws: Vec<Draw>,
    pub wall_time: Duration,
}

impl ChainStore {
    pub fn dims(&self) -> [usize; 3] {
        self.meta.columns.dims()
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Fits the model with one chain.
pub fn run_chain(dataset: &Dataset, prior: PriorSpec, config: &ChainConfig) -> Result<ChainStore> {
    GibbsSampler::new(dataset, prior)?
        .with_step2(config.step2)
        .run(config)
}
