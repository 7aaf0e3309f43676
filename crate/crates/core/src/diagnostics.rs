//! Single-chain convergence diagnostics: Geweke, Heidelberger–Welch,
//! Raftery–Lewis and effective sample size.
//!
//! Spectral densities at frequency zero come from an autoregressive fit
//! (Yule–Walker, order by AIC), the estimator the classic implementations
//! use. All functions are pure.

use serde::{Deserialize, Serialize};

use crate::distributions::normal_quantile;
use crate::error::{Error, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// True when the series is constant up to a linear trend.
fn is_degenerate(x: &[f64]) -> bool {
    let n = x.len() as f64;
    let tbar = (n - 1.0) / 2.0;
    let xbar = mean(x);
    let (mut sxt, mut stt) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        let dt = t as f64 - tbar;
        sxt += dt * (v - xbar);
        stt += dt * dt;
    }
    let slope = if stt > 0.0 { sxt / stt } else { 0.0 };
    let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    x.iter()
        .enumerate()
        .all(|(t, v)| (v - xbar - slope * (t as f64 - tbar)).abs() <= 1e-10 * scale)
}

/// Fitted autoregression used for the spectral estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    pub order: usize,
    pub coefficients: Vec<f64>,
    pub innovation_variance: f64,
}

/// Yule–Walker autoregression with order chosen by AIC up to
/// `floor(min(n - 1, 10 log10 n))`.
pub fn fit_ar(x: &[f64]) -> Result<ArFit> {
    let n = x.len();
    if n < 3 {
        return Err(Error::SeriesTooShort { required: 3, actual: n });
    }
    let xbar = mean(x);
    let max_order = ((10.0 * (n as f64).log10()).floor() as usize).min(n - 1);
    let acov: Vec<f64> = (0..=max_order)
        .map(|lag| {
            (0..n - lag)
                .map(|t| (x[t] - xbar) * (x[t + lag] - xbar))
                .sum::<f64>()
                / n as f64
        })
        .collect();
    if !(acov[0] > 0.0) {
        return Err(Error::DegenerateSeries("series has zero variance".into()));
    }

    // Levinson–Durbin
    let mut coefs: Vec<Vec<f64>> = vec![Vec::new()];
    let mut vars = vec![acov[0]];
    let mut phi: Vec<f64> = Vec::new();
    for k in 1..=max_order {
        let num = acov[k] - phi.iter().enumerate().map(|(j, p)| p * acov[k - 1 - j]).sum::<f64>();
        let pacf = num / vars[k - 1];
        let mut next = vec![0.0; k];
        for j in 0..k - 1 {
            next[j] = phi[j] - pacf * phi[k - 2 - j];
        }
        next[k - 1] = pacf;
        phi = next;
        vars.push(vars[k - 1] * (1.0 - pacf * pacf));
        coefs.push(phi.clone());
    }
    let aic: Vec<f64> = vars
        .iter()
        .enumerate()
        .map(|(k, v)| n as f64 * v.ln() + 2.0 * k as f64)
        .collect();
    let order = aic
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (k, &a)| if a < best.1 { (k, a) } else { best })
        .0;
    let innovation_variance = vars[order] * n as f64 / (n as f64 - (order as f64 + 1.0));
    Ok(ArFit {
        order,
        coefficients: coefs[order].clone(),
        innovation_variance,
    })
}

/// Spectral density at frequency zero from the AR fit,
/// `σ² / (1 - Σφ)²`. This is the asymptotic variance of `√n · mean`.
pub fn spectrum0_ar(x: &[f64]) -> Result<f64> {
    if is_degenerate(x) {
        return Err(Error::DegenerateSeries("series is constant up to a linear trend".into()));
    }
    let fit = fit_ar(x)?;
    let s: f64 = fit.coefficients.iter().sum();
    Ok(fit.innovation_variance / (1.0 - s).powi(2))
}

pub const GEWEKE_MIN_LENGTH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geweke {
    pub z: f64,
    pub pass: bool,
}

/// Difference of means between the first `first` and last `last` fractions
/// of the chain, standardized by spectral variances. Passes at |z| < 1.96.
pub fn geweke(x: &[f64], first: f64, last: f64) -> Result<Geweke> {
    if x.len() < GEWEKE_MIN_LENGTH {
        return Err(Error::SeriesTooShort {
            required: GEWEKE_MIN_LENGTH,
            actual: x.len(),
        });
    }
    if !(first > 0.0 && last > 0.0 && first + last <= 1.0) {
        return Err(Error::InvalidArgument("window fractions must be positive and sum to at most 1".into()));
    }
    // 1-based window ends as in the reference implementation
    let n = x.len() as f64;
    let end1 = (1.0 + first * (n - 1.0)).ceil() as usize;
    let start2 = (n - last * (n - 1.0)).floor() as usize;
    let a = &x[..end1];
    let b = &x[start2 - 1..];
    let z = (mean(a) - mean(b))
        / (spectrum0_ar(a)? / a.len() as f64 + spectrum0_ar(b)? / b.len() as f64).sqrt();
    Ok(Geweke { z, pass: z.abs() < 1.96 })
}

/// Modified Bessel function of the second kind, by quadrature of
/// `∫₀^∞ exp(-x cosh t) cosh(ν t) dt`.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0);
    // integrand below e^-745 beyond this point
    let upper = ((745.0 + x) / x).acosh() + 1.0;
    let steps = 4000;
    let h = upper / steps as f64;
    let f = |t: f64| (-x * t.cosh()).exp() * (nu * t).cosh();
    let mut sum = f(0.0) + f(upper);
    for i in 1..steps {
        sum += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

/// Limiting distribution function of the Cramér–von Mises statistic.
///
/// Terms are summed until their exponential factor drops below 1e-5; a fixed
/// four-term truncation turns the function down again for q above ~5.
pub fn pcramer(q: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let cutoff = -(1e-5f64).ln();
    let mut total = 0.0;
    for k in 0.. {
        let kf = k as f64;
        let u = (4.0 * kf + 1.0).powi(2) / (16.0 * q);
        if u > cutoff {
            break;
        }
        let z = (libm::lgamma(kf + 0.5) - libm::lgamma(kf + 1.0)).exp() * (4.0 * kf + 1.0).sqrt()
            / (std::f64::consts::PI.powf(1.5) * q.sqrt());
        total += z * (-u).exp() * bessel_k(0.25, u);
    }
    total.min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeidelbergerWelch {
    pub stationary: bool,
    /// Index of the first retained draw in the accepted window (0-based).
    pub start: Option<usize>,
    pub p_value: f64,
    pub mean: Option<f64>,
    pub halfwidth: Option<f64>,
    pub halfwidth_ratio: Option<f64>,
    pub halfwidth_pass: Option<bool>,
}

/// Cramér–von Mises stationarity test, repeated after discarding 10%, 20%,
/// … 50% of the chain until it passes at the 5% level, followed by the
/// halfwidth test (ratio < 0.1) on the accepted window.
pub fn heidelberger_welch(x: &[f64]) -> Result<HeidelbergerWelch> {
    let n1 = x.len();
    if n1 < 20 {
        return Err(Error::SeriesTooShort { required: 20, actual: n1 });
    }
    let half_start = ((n1 as f64) / 2.0).ceil() as usize - 1;
    let s0 = spectrum0_ar(&x[half_start..])?;
    let step = n1 as f64 / 10.0;

    let mut last_p = f64::NAN;
    let mut accepted = None;
    let mut k = 0;
    loop {
        let start = (k as f64 * step).round() as usize;
        if start as f64 > n1 as f64 / 2.0 {
            break;
        }
        let y = &x[start..];
        let n = y.len() as f64;
        let ybar = mean(y);
        let mut cum = 0.0;
        let mut stat = 0.0;
        for (i, v) in y.iter().enumerate() {
            cum += v;
            let b = cum - ybar * (i as f64 + 1.0);
            stat += b * b / (n * s0);
        }
        stat /= n;
        last_p = 1.0 - pcramer(stat);
        if pcramer(stat) < 0.95 {
            accepted = Some(start);
            break;
        }
        k += 1;
    }

    let Some(start) = accepted else {
        return Ok(HeidelbergerWelch {
            stationary: false,
            start: None,
            p_value: last_p,
            mean: None,
            halfwidth: None,
            halfwidth_ratio: None,
            halfwidth_pass: None,
        });
    };
    let y = &x[start..];
    let ybar = mean(y);
    let halfwidth = 1.96 * (spectrum0_ar(y)? / y.len() as f64).sqrt();
    let ratio = (halfwidth / ybar).abs();
    Ok(HeidelbergerWelch {
        stationary: true,
        start: Some(start),
        p_value: last_p,
        mean: Some(ybar),
        halfwidth: Some(halfwidth),
        halfwidth_ratio: Some(ratio),
        halfwidth_pass: Some(ratio < 0.1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RafteryLewisConfig {
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub converge_eps: f64,
}

impl Default for RafteryLewisConfig {
    fn default() -> Self {
        Self {
            q: 0.025,
            r: 0.01,
            s: 0.95,
            converge_eps: 0.001,
        }
    }
}

impl RafteryLewisConfig {
    /// Run length needed for independent draws.
    pub fn nmin(&self) -> usize {
        let z = normal_quantile((self.s + 1.0) / 2.0).expect("s in (0,1)");
        (self.q * (1.0 - self.q) * z * z / (self.r * self.r)).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RafteryLewis {
    pub thin: usize,
    pub burn_in: usize,
    pub total: usize,
    pub nmin: usize,
    pub dependence_factor: f64,
}

/// Sample quantile, linear interpolation between order statistics
/// (the default "type 7" definition).
pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Raftery–Lewis run-length diagnostic for the `q` quantile.
pub fn raftery_lewis(x: &[f64], cfg: &RafteryLewisConfig) -> Result<RafteryLewis> {
    let nmin = cfg.nmin();
    if x.len() < nmin {
        return Err(Error::SeriesTooShort { required: nmin, actual: x.len() });
    }
    let cut = quantile(x, cfg.q);
    let dichot: Vec<usize> = x.iter().map(|&v| usize::from(v <= cut)).collect();
    if dichot.iter().all(|&d| d == dichot[0]) {
        return Err(Error::DegenerateSeries("quantile indicator is constant".into()));
    }

    let mut kthin = 0;
    let thinned = loop {
        kthin += 1;
        let t: Vec<usize> = dichot.iter().step_by(kthin).copied().collect();
        if t.len() < 3 {
            return Err(Error::SeriesTooShort { required: nmin, actual: x.len() });
        }
        let mut tab = [[[0.0f64; 2]; 2]; 2];
        for w in t.windows(3) {
            tab[w[0]][w[1]][w[2]] += 1.0;
        }
        let mut g2 = 0.0;
        for i1 in 0..2 {
            for i2 in 0..2 {
                for i3 in 0..2 {
                    let c = tab[i1][i2][i3];
                    if c != 0.0 {
                        let mid: f64 = (0..2).flat_map(|a| (0..2).map(move |b| (a, b))).map(|(a, b)| tab[a][i2][b]).sum();
                        let fitted = (tab[i1][i2][0] + tab[i1][i2][1]) * (tab[0][i2][i3] + tab[1][i2][i3]) / mid;
                        g2 += 2.0 * c * (c / fitted).ln();
                    }
                }
            }
        }
        let bic = g2 - 2.0 * ((t.len() - 2) as f64).ln();
        if bic < 0.0 {
            break t;
        }
    };

    let mut tran = [[0.0f64; 2]; 2];
    for w in thinned.windows(2) {
        tran[w[0]][w[1]] += 1.0;
    }
    let alpha = tran[0][1] / (tran[0][0] + tran[0][1]);
    let beta = tran[1][0] / (tran[1][0] + tran[1][1]);
    if !(alpha + beta > 0.0) {
        return Err(Error::DegenerateSeries("indicator chain never changes state".into()));
    }
    let temp_burn = (cfg.converge_eps * (alpha + beta) / alpha.max(beta)).ln() / (1.0 - alpha - beta).abs().ln();
    let burn_in = if temp_burn.is_finite() { temp_burn.ceil().max(0.0) as usize * kthin } else { 0 };
    let z = normal_quantile((cfg.s + 1.0) / 2.0)?;
    let temp_prec = (2.0 - alpha - beta) * alpha * beta * z * z / ((alpha + beta).powi(3) * cfg.r * cfg.r);
    let keep = temp_prec.ceil() as usize * kthin;
    Ok(RafteryLewis {
        thin: kthin,
        burn_in,
        total: burn_in + keep,
        nmin,
        dependence_factor: (burn_in + keep) as f64 / nmin as f64,
    })
}

/// Effective sample size, `n · var / S(0)`.
pub fn effective_sample_size(x: &[f64]) -> Result<f64> {
    Ok(x.len() as f64 * sample_variance(x) / spectrum0_ar(x)?)
}

/// Diagnostics for one parameter. A test that cannot run on the series
/// leaves its field empty and records why in `notes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub geweke: Option<Geweke>,
    pub heidelberger_welch: Option<HeidelbergerWelch>,
    pub raftery_lewis: Option<RafteryLewis>,
    pub ess: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn diagnose(name: &str, x: &[f64]) -> ParameterDiagnostics {
    fn keep<T>(notes: &mut Vec<String>, label: &str, r: Result<T>) -> Option<T> {
        r.map_err(|e| notes.push(format!("{label}: {e}"))).ok()
    }
    let mut notes = Vec::new();
    let geweke = keep(&mut notes, "geweke", geweke(x, 0.1, 0.5));
    let hw = keep(&mut notes, "heidelberger-welch", heidelberger_welch(x));
    let rl = keep(&mut notes, "raftery-lewis", raftery_lewis(x, &RafteryLewisConfig::default()));
    let ess = keep(&mut notes, "ess", effective_sample_size(x));
    ParameterDiagnostics {
        name: name.to_string(),
        mean: if x.is_empty() { f64::NAN } else { mean(x) },
        sd: if x.len() < 2 { f64::NAN } else { sample_variance(x).sqrt() },
        geweke,
        heidelberger_welch: hw,
        raftery_lewis: rl,
        ess,
        notes,
    }
}

/// Dependence factors below this are considered acceptable.
pub const DEPENDENCE_THRESHOLD: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub parameters: usize,
    pub geweke: usize,
    pub stationarity: usize,
    pub halfwidth: usize,
    pub dependence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub parameters: Vec<ParameterDiagnostics>,
    pub summary: PassCounts,
}

impl DiagnosticReport {
    pub fn new(parameters: Vec<ParameterDiagnostics>) -> Self {
        let count = |f: &dyn Fn(&ParameterDiagnostics) -> bool| parameters.iter().filter(|p| f(p)).count();
        let summary = PassCounts {
            parameters: parameters.len(),
            geweke: count(&|p| p.geweke.is_some_and(|g| g.pass)),
            stationarity: count(&|p| p.heidelberger_welch.is_some_and(|h| h.stationary)),
            halfwidth: count(&|p| p.heidelberger_welch.and_then(|h| h.halfwidth_pass) == Some(true)),
            dependence: count(&|p| p.raftery_lewis.is_some_and(|r| r.dependence_factor < DEPENDENCE_THRESHOLD)),
        };
        Self { parameters, summary }
    }

    pub fn from_series<'a>(series: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> Self {
        Self::new(series.into_iter().map(|(n, x)| diagnose(n, x)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let width = self.parameters.iter().map(|p| p.name.len()).max().unwrap_or(9).max(9);
        let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        let flag = |v: Option<bool>| match v {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "-",
        };
        let mut out = format!(
            "{:<width$} {:>10} {:>9} {:>8} {:>5} {:>6} {:>8} {:>5} {:>7} {:>8}\n",
            "parameter", "mean", "sd", "geweke", "", "hw", "hw-ratio", "", "rl-dep", "ess"
        );
        for p in &self.parameters {
            let hw = p.heidelberger_welch;
            out += &format!(
                "{:<width$} {:>10.4} {:>9.4} {:>8} {:>5} {:>6} {:>8} {:>5} {:>7} {:>8}\n",
                p.name,
                p.mean,
                p.sd,
                opt(p.geweke.map(|g| g.z), 3),
                flag(p.geweke.map(|g| g.pass)),
                flag(hw.map(|h| h.stationary)),
                opt(hw.and_then(|h| h.halfwidth_ratio), 4),
                flag(hw.and_then(|h| h.halfwidth_pass)),
                opt(p.raftery_lewis.map(|r| r.dependence_factor), 2),
                opt(p.ess, 0),
            );
        }
        let s = self.summary;
        out += &format!(
            "\n{} out of {} parameters passed the Geweke test\n\
             {} out of {} passed the Heidelberger-Welch stationarity test ({} the halfwidth test)\n\
             {} out of {} have Raftery-Lewis dependence factors below {}\n",
            s.geweke, s.parameters, s.stationarity, s.parameters, s.halfwidth, s.dependence, s.parameters,
            DEPENDENCE_THRESHOLD
        );
        out
    }
}
