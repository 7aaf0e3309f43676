//! Samplers and density evaluators needed by the Gibbs sampler and the
//! predictive engine: univariate and truncated normals, inverse gamma,
//! matrix normal and inverse Wishart.
//!
//! Every sampler takes the random stream by `&mut R` and consumes from it
//! deterministically, so identical stream states give identical draws.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01, StandardNormal};

use crate::error::{Error, Result};

/// Standardized distance beyond which a truncation interval is treated as
/// carrying no representable probability mass.
pub const TAIL_LIMIT: f64 = 38.0;

/// Switch from inverse-CDF to exponential rejection beyond this many
/// standard deviations.
const ROBERT_THRESHOLD: f64 = 4.0;

/// Interval `(lower, upper)` on the extended real line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationInterval {
    lower: f64,
    upper: f64,
}

impl TruncationInterval {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower >= upper {
            return Err(Error::InvalidArgument(format!(
                "empty truncation interval ({lower}, {upper})"
            )));
        }
        Ok(Self { lower, upper })
    }

    /// `(-inf, 0]`, the support of a latent utility whose indicator is zero.
    pub const fn non_positive() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: 0.0,
        }
    }

    /// `(0, inf)`, the support of a latent utility whose indicator is one.
    pub const fn positive() -> Self {
        Self {
            lower: 0.0,
            upper: f64::INFINITY,
        }
    }

    pub const fn whole_line() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    /// Interval implied by a binary outcome.
    pub const fn for_indicator(positive: bool) -> Self {
        if positive {
            Self::positive()
        } else {
            Self::non_positive()
        }
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, x: f64) -> bool {
        let above = if self.lower == 0.0 && self.upper == f64::INFINITY {
            x > 0.0
        } else {
            x >= self.lower
        };
        above && x <= self.upper
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal upper tail `1 - Φ(x)`, accurate for large `x`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Inverse of the standard normal CDF (Wichura's AS 241 rational
/// approximations followed by one Newton step on `erfc`).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "quantile probability must lie in (0, 1), got {p}"
        )));
    }
    let x = ppnd16(p);
    // one Newton refinement against the more accurate tail
    let refined = if p < 0.5 {
        x - (normal_cdf(x) - p) / normal_pdf(x)
    } else {
        x + (normal_sf(x) - (1.0 - p)) / normal_pdf(x)
    };
    Ok(if refined.is_finite() { refined } else { x })
}

fn ppnd16(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_6,
        1.331_416_678_917_843_8e2,
        1.971_590_950_306_551_3e3,
        1.373_169_376_550_946_2e4,
        4.592_195_393_154_987e4,
        6.726_577_092_700_87e4,
        3.343_057_558_358_813e4,
        2.509_080_928_730_122_7e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.231_333_070_160_091e1,
        6.871_870_074_920_579e2,
        5.394_196_021_424_751e3,
        2.121_379_430_158_659_7e4,
        3.930_789_580_009_271e4,
        2.872_908_573_572_194_3e4,
        5.226_495_278_852_545e3,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_6,
        4.630_337_846_156_546,
        5.769_497_221_460_691,
        3.647_848_324_763_204_5,
        1.270_458_252_452_368_4,
        2.417_807_251_774_506e-1,
        2.272_384_498_926_918_4e-2,
        7.745_450_142_783_414e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_759,
        1.676_384_830_183_803_8,
        6.897_673_349_851e-1,
        1.481_039_764_274_800_8e-1,
        1.519_866_656_361_645_7e-2,
        5.475_938_084_995_345e-4,
        1.050_750_071_644_416_8e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103,
        5.463_784_911_164_114,
        1.784_826_539_917_291_3,
        2.965_605_718_285_048_7e-1,
        2.653_218_952_657_612_4e-2,
        1.242_660_947_388_078_4e-3,
        2.711_555_568_743_487_6e-5,
        2.010_334_399_292_288_1e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.998_322_065_558_879e-1,
        1.369_298_809_227_358e-1,
        1.487_536_129_085_061_5e-2,
        7.868_691_311_456_133e-4,
        1.846_318_317_510_054_8e-5,
        1.421_511_758_316_446e-7,
        2.044_263_103_389_939_7e-15,
    ];
    fn poly(c: &[f64; 8], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
    }

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn check_finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be finite, got {x}")))
    }
}

/// Draws from `N(mean, variance)` restricted to `interval`.
///
/// Uses inverse-CDF sampling when the interval reaches within four standard
/// deviations of the mean, and Robert's exponential (or uniform) rejection
/// sampler for intervals lying entirely in a far tail.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    variance: f64,
    interval: TruncationInterval,
    rng: &mut R,
) -> Result<f64> {
    check_finite("mean", mean)?;
    check_finite("variance", variance)?;
    if variance <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "variance must be positive, got {variance}"
        )));
    }
    let sd = variance.sqrt();
    let a = (interval.lower - mean) / sd;
    let b = (interval.upper - mean) / sd;
    if a > TAIL_LIMIT {
        return Err(Error::DegenerateTail { z: a, observation: None });
    }
    if b < -TAIL_LIMIT {
        return Err(Error::DegenerateTail { z: b, observation: None });
    }

    loop {
        let z = standard_truncated(a, b, rng);
        let x = mean + sd * z;
        if interval.contains(x) {
            return Ok(x);
        }
    }
}

fn standard_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a >= ROBERT_THRESHOLD {
        tail_rejection(a, b, rng)
    } else if b <= -ROBERT_THRESHOLD {
        -tail_rejection(-b, -a, rng)
    } else if a >= 0.0 {
        let (qa, qb) = (normal_sf(a), normal_sf(b));
        let u: f64 = rng.sample(Open01);
        let q = qa - u * (qa - qb);
        -ppnd_clamped(q)
    } else {
        let (pa, pb) = (normal_cdf(a), normal_cdf(b));
        let u: f64 = rng.sample(Open01);
        ppnd_clamped(pa + u * (pb - pa))
    }
}

fn ppnd_clamped(p: f64) -> f64 {
    let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    normal_quantile(p).unwrap_or_else(|_| ppnd16(p))
}

/// Robert (1995) sampler for a standard normal on `[a, b)` with `a > 0`.
fn tail_rejection<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let root = (a * a + 4.0).sqrt();
    let alpha = 0.5 * (a + root);
    let uniform_cutoff =
        2.0 * 0.5f64.exp().sqrt() / (a + root) * ((a * a - a * root) / 4.0).exp();
    if b - a < uniform_cutoff {
        loop {
            let u: f64 = rng.sample(Open01);
            let z = a + u * (b - a);
            let accept: f64 = rng.sample(Open01);
            if accept.ln() <= 0.5 * (a * a - z * z) {
                return z;
            }
        }
    }
    loop {
        let u: f64 = rng.sample(Open01);
        let z = a - u.ln() / alpha;
        if z >= b {
            continue;
        }
        let accept: f64 = rng.sample(Open01);
        if accept.ln() <= -0.5 * (z - alpha) * (z - alpha) {
            return z;
        }
    }
}

/// Inverse gamma with density proportional to `x^-(shape+1) exp(-scale/x)`,
/// mean `scale / (shape - 1)`.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(scale: f64, shape: f64, rng: &mut R) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite() && shape > 0.0 && shape.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "inverse gamma needs positive finite parameters, got scale={scale} shape={shape}"
        )));
    }
    let gamma = Gamma::new(shape, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let g: f64 = gamma.sample(rng);
    Ok(scale / g)
}

/// One-dimensional inverse Wishart `IW(scale, dof)`: density proportional to
/// `x^-(dof/2+1) exp(-scale/(2x))`. This is the parameterization of the
/// variance blocks in the covariance decomposition, where `IW_3(R, r)` has
/// leading element distributed as `IW_1(R_11, r - 2)`.
pub fn sample_inverse_wishart_1d<R: Rng + ?Sized>(scale: f64, dof: f64, rng: &mut R) -> Result<f64> {
    sample_inverse_gamma(scale / 2.0, dof / 2.0, rng)
}

/// Matrix normal draw with mean `mean` (r x c). Each row has covariance
/// `column_scale * row_scale` (`row_scale` is c x c) and rows are
/// independent, so `vec(X)` has covariance `column_scale ⊗ row_scale`.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    mean: &DMatrix<f64>,
    row_scale: &DMatrix<f64>,
    column_scale: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let cols = mean.ncols();
    if row_scale.nrows() != cols || row_scale.ncols() != cols {
        return Err(Error::InvalidArgument(format!(
            "row scale must be {cols}x{cols}, got {}x{}",
            row_scale.nrows(),
            row_scale.ncols()
        )));
    }
    if !(column_scale >= 0.0 && column_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "column scale must be non-negative, got {column_scale}"
        )));
    }
    let chol = row_scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Decomposition("matrix normal row scale is not SPD".into()))?;
    let z = DMatrix::<f64>::from_fn(mean.nrows(), cols, |_, _| rng.sample(StandardNormal));
    Ok(mean + (z * chol.l().transpose()) * column_scale.sqrt())
}

/// Inverse Wishart with scale `scale` and `dof` degrees of freedom
/// (mean `scale / (dof - p - 1)`), drawn by inverting a Bartlett-decomposed
/// Wishart draw.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    scale: &DMatrix<f64>,
    dof: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if scale.ncols() != p || p == 0 {
        return Err(Error::InvalidArgument("inverse Wishart scale must be square".into()));
    }
    if !(dof > p as f64 - 1.0) {
        return Err(Error::InvalidArgument(format!(
            "inverse Wishart dof must exceed {}, got {dof}",
            p - 1
        )));
    }
    let scale_chol = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Decomposition("inverse Wishart scale is not SPD".into()))?;
    let precision = scale_chol.inverse();
    let l = precision
        .cholesky()
        .ok_or_else(|| Error::Decomposition("inverse of scale is not SPD".into()))?
        .l();

    let mut bartlett = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi2 = Gamma::new((dof - i as f64) / 2.0, 2.0)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(rng);
        bartlett[(i, i)] = f64::sqrt(chi2);
        for j in 0..i {
            bartlett[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // W = (L A)(L A)^T, so W^-1 = (L A)^-T (L A)^-1
    let factor = l * bartlett;
    let inv_factor = factor
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Decomposition("singular Bartlett factor".into()))?;
    let mut draw = inv_factor.transpose() * inv_factor;
    symmetrize(&mut draw);
    Ok(draw)
}

/// Draws from `N(P^-1 b, P^-1)` given the Cholesky factor of the precision
/// `P` and the right-hand side `b`. Returns `(draw, mean)`.
pub(crate) fn sample_normal_from_precision<R: Rng + ?Sized>(
    precision_chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    rhs: &DVector<f64>,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>) {
    let mean = precision_chol.solve(rhs);
    let z = DVector::<f64>::from_fn(rhs.len(), |_, _| rng.sample(StandardNormal));
    let offset = precision_chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    (&mean + offset, mean)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}
