//! Posterior-predictive probabilities, counterfactual legalization
//! scenarios, tax revenue and price elasticities.

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{normal_cdf, sample_truncated_normal, TruncationInterval};
use crate::error::{Error, Result};
use crate::model::{Dataset, Equation, EquationColumns};
use crate::pipeline::RiskLevel;
use crate::rng::{Block, Streams};
use crate::sampler::ChainStore;

/// Cost of a legal gram (≈ one joint) before tax, in US cents.
pub const DEFAULT_COST_CENTS: f64 = 1.33;
/// Share of legal-market demand assumed to stay untaxed.
pub const DEFAULT_BLACK_MARKET: f64 = 0.34;
pub const DEFAULT_COP_PER_USD: f64 = 3274.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessRegime {
    #[default]
    Observed,
    Legalized,
}

fn default_cost() -> f64 {
    DEFAULT_COST_CENTS
}

fn default_black_market() -> f64 {
    DEFAULT_BLACK_MARKET
}

/// One counterfactual. Prices are US cents per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub regime: AccessRegime,
    pub price: f64,
    #[serde(default)]
    pub risk: Option<RiskLevel>,
    /// Tax per gram; when given, `price` must equal `cost + tax`.
    #[serde(default)]
    pub tax: Option<f64>,
    #[serde(default = "default_black_market")]
    pub black_market_share: f64,
    #[serde(default = "default_cost")]
    pub cost: f64,
}

/// Hundredths of a cent, so that price − cost is exact for prices quoted
/// to two decimals.
fn hundredths(x: f64) -> i64 {
    (x * 100.0).round() as i64
}

impl Scenario {
    pub fn new(name: impl Into<String>, price: f64) -> Self {
        Self {
            name: name.into(),
            regime: AccessRegime::Observed,
            price,
            risk: None,
            tax: None,
            black_market_share: DEFAULT_BLACK_MARKET,
            cost: DEFAULT_COST_CENTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.price > 0.0 && self.price.is_finite()) {
            return Err(Error::InvalidArgument(format!("price must be positive, got {}", self.price)));
        }
        if !(self.cost > 0.0) {
            return Err(Error::InvalidArgument("cost must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.black_market_share) {
            return Err(Error::InvalidArgument("black-market share must be in [0, 1)".into()));
        }
        if let Some(t) = self.tax {
            if t < 0.0 {
                return Err(Error::InvalidArgument("tax must be non-negative".into()));
            }
            if hundredths(self.cost) + hundredths(t) != hundredths(self.price) {
                return Err(Error::InvalidArgument(format!(
                    "scenario `{}`: price {} != cost {} + tax {}",
                    self.name, self.price, self.cost, t
                )));
            }
        }
        Ok(())
    }

    /// Tax per gram in hundredths of a cent.
    pub fn tax_hundredths(&self) -> i64 {
        match self.tax {
            Some(t) => hundredths(t),
            None => (hundredths(self.price) - hundredths(self.cost)).max(0),
        }
    }

    pub fn tax_per_gram(&self) -> f64 {
        self.tax_hundredths() as f64 / 100.0
    }

    /// Tax per gram rounded to one decimal of a cent, half away from zero.
    pub fn tax_display(&self) -> String {
        let h = self.tax_hundredths();
        let tenths = (h + 5).div_euclid(10);
        format!("{}.{}", tenths / 10, tenths % 10)
    }
}

/// Currency of the price regressor in the fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "snake_case")]
pub enum PriceUnits {
    /// Pesos per joint, converted from US cents at `cop_per_usd`.
    Cop { cop_per_usd: f64 },
    UsdCents,
}

impl Default for PriceUnits {
    fn default() -> Self {
        PriceUnits::Cop { cop_per_usd: DEFAULT_COP_PER_USD }
    }
}

impl PriceUnits {
    pub fn from_cents(self, cents: f64) -> f64 {
        match self {
            PriceUnits::Cop { cop_per_usd } => cents / 100.0 * cop_per_usd,
            PriceUnits::UsdCents => cents,
        }
    }
}

/// Where the scenario levers live among the regressors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyLayout {
    /// Regressor holding log price, in every equation that has it.
    #[serde(default)]
    pub log_price: Option<String>,
    /// `(interaction regressor, group indicator)`: the interaction is set to
    /// indicator × log price.
    #[serde(default)]
    pub price_interactions: Vec<(String, String)>,
    /// Dummy per non-base risk level.
    #[serde(default)]
    pub risk_dummies: BTreeMap<RiskLevel, String>,
    #[serde(default)]
    pub price_units: PriceUnits,
}

/// Named regressor values for one representative individual.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateProfile {
    #[serde(default)]
    pub name: String,
    pub values: BTreeMap<String, f64>,
}

impl CovariateProfile {
    /// The profile with the scenario's price and risk applied.
    pub fn with_scenario(&self, scenario: &Scenario, layout: &PolicyLayout) -> Result<Self> {
        let mut out = self.clone();
        if let Some(lp) = &layout.log_price {
            let v = layout.price_units.from_cents(scenario.price).ln();
            out.values.insert(lp.clone(), v);
            for (inter, group) in &layout.price_interactions {
                let g = *self.values.get(group).ok_or_else(|| {
                    Error::Schema(format!("profile lacks interaction group `{group}`"))
                })?;
                out.values.insert(inter.clone(), g * v);
            }
        }
        if let Some(level) = scenario.risk {
            for name in layout.risk_dummies.values() {
                out.values.insert(name.clone(), 0.0);
            }
            if let Some(name) = layout.risk_dummies.get(&level) {
                out.values.insert(name.clone(), 1.0);
            }
        }
        Ok(out)
    }

    pub fn regressors(&self, columns: &EquationColumns) -> Result<[Vec<f64>; 3]> {
        let build = |eq: Equation| -> Result<Vec<f64>> {
            columns
                .names(eq)
                .iter()
                .map(|n| {
                    self.values.get(n).copied().ok_or_else(|| {
                        Error::Schema(format!("profile has no value for regressor `{n}` ({} equation)", eq.tag()))
                    })
                })
                .collect()
        };
        Ok([build(Equation::Access)?, build(Equation::Use)?, build(Equation::Quantity)?])
    }
}

/// Mean shift coefficients and variance of Y given the two probit errors:
/// `μ_{y|ac} = x'θ_y + b_a r_a + b_c r_c`, `σ²_{y|ac}`.
pub fn quantity_conditional_moments(sigma: &Matrix3<f64>) -> Result<([f64; 2], f64)> {
    let sac = sigma[(0, 1)];
    let det = 1.0 - sac * sac;
    if !(det > 0.0) {
        return Err(Error::Numerical {
            iteration: None,
            message: format!("σ_ac² = {} ≥ 1", sac * sac),
            state: None,
        });
    }
    let (sya, syc) = (sigma[(2, 0)], sigma[(2, 1)]);
    // [σ_ya σ_yc] [[1, σ_ac], [σ_ac, 1]]^-1
    let ba = (sya - syc * sac) / det;
    let bc = (syc - sya * sac) / det;
    let var = sigma[(2, 2)] - (ba * sya + bc * syc);
    Ok(([ba, bc], var))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Spread across posterior draws.
    pub sd: f64,
    /// Monte Carlo standard error of `mean`.
    pub se: f64,
}

impl Estimate {
    fn scaled(self, k: f64) -> Self {
        Self { mean: self.mean * k, sd: self.sd * k.abs(), se: self.se * k.abs() }
    }
}

/// Per-draw values and their within-draw simulation variances, reduced to
/// an [`Estimate`].
#[derive(Default)]
struct Accumulator {
    values: Vec<f64>,
    within: Vec<f64>,
}

impl Accumulator {
    fn push(&mut self, v: f64, within_var: f64) {
        self.values.push(v);
        self.within.push(within_var);
    }

    fn finish(&self) -> Estimate {
        let d = self.values.len() as f64;
        if d == 0.0 {
            return Estimate { mean: f64::NAN, sd: f64::NAN, se: f64::NAN };
        }
        let mean = self.values.iter().sum::<f64>() / d;
        let sd = if d > 1.0 {
            (self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d - 1.0)).sqrt()
        } else {
            0.0
        };
        // the spread across draws already contains each draw's simulation
        // noise; a lone draw only has the latter
        let se = if d > 1.0 { sd / d.sqrt() } else { self.within.iter().sum::<f64>().sqrt() / d };
        Estimate { mean, sd, se }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveResult {
    pub p_access: Estimate,
    /// P(use) over everyone, under the scenario's access regime.
    pub p_use: Estimate,
    pub p_use_given_access: Estimate,
    /// P(use | legalized) − P(use | observed), in percentage points.
    pub change_pp: Estimate,
    /// Expected joints per month given use.
    pub consumption: Estimate,
    pub draws_used: usize,
    pub draws_skipped: usize,
    /// P(use) rounds to zero at four digits; consumption is conditional on
    /// an event the model all but rules out.
    pub zero_probability: bool,
}

/// Everything simulated for one posterior draw.
struct DrawPrediction {
    p_access: f64,
    p_cond: f64,
    p_cond_var: f64,
    consumption: f64,
    consumption_var: f64,
}

fn predict_draw<R: Rng + ?Sized>(
    x: &[Vec<f64>; 3],
    theta: &[f64],
    sigma: &Matrix3<f64>,
    dims: [usize; 3],
    mc: usize,
    rng: &mut R,
) -> Result<Option<DrawPrediction>> {
    let dot = |x: &[f64], b: &[f64]| x.iter().zip(b).map(|(x, b)| x * b).sum::<f64>();
    let mu_a = dot(&x[0], &theta[..dims[0]]);
    let mu_c = dot(&x[1], &theta[dims[0]..dims[0] + dims[1]]);
    let mu_y = dot(&x[2], &theta[dims[0] + dims[1]..]);
    let sac = sigma[(0, 1)];
    if sac * sac >= 1.0 {
        return Ok(None);
    }
    let cond_var = 1.0 - sac * sac;
    let cond_sd = cond_var.sqrt();
    let ([ba, bc], var_y) = quantity_conditional_moments(sigma)?;
    let sd_y = var_y.max(0.0).sqrt();

    let mut ps = Vec::with_capacity(mc);
    let mut ys = Vec::with_capacity(mc);
    for _ in 0..mc {
        let ua = sample_truncated_normal(mu_a, 1.0, TruncationInterval::positive(), rng)?;
        let m_c = mu_c + sac * (ua - mu_a);
        let p = normal_cdf(m_c / cond_sd);
        // U_c from its positive-truncated conditional, weighted by p
        let uc = if p > 0.0 {
            sample_truncated_normal(m_c, cond_var, TruncationInterval::positive(), rng)?
        } else {
            0.0
        };
        let z: f64 = rng.sample(StandardNormal);
        let y = mu_y + ba * (ua - mu_a) + bc * (uc - mu_c) + sd_y * z;
        ps.push(p);
        ys.push(y.exp());
    }
    let m = mc as f64;
    let p_cond = ps.iter().sum::<f64>() / m;
    let p_cond_var = ps.iter().map(|p| (p - p_cond).powi(2)).sum::<f64>() / (m * (m - 1.0).max(1.0));
    let wsum: f64 = ps.iter().sum();
    let (consumption, consumption_var) = if wsum > 0.0 {
        let c = ps.iter().zip(&ys).map(|(p, y)| p * y).sum::<f64>() / wsum;
        let v = ps.iter().zip(&ys).map(|(p, y)| (p * (y - c)).powi(2)).sum::<f64>() / (wsum * wsum);
        (c, v)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(Some(DrawPrediction {
        p_access: normal_cdf(mu_a),
        p_cond,
        p_cond_var,
        consumption,
        consumption_var,
    }))
}

/// Posterior-predictive access, use and consumption for one individual.
/// `mc` simulations of the latent utilities are used per posterior draw.
pub fn predict_individual<R: Rng + ?Sized>(
    x: &[Vec<f64>; 3],
    chain: &ChainStore,
    regime: AccessRegime,
    mc: usize,
    rng: &mut R,
) -> Result<PredictiveResult> {
    let dims = chain.dims();
    for (eq, v) in Equation::ALL.iter().zip(x) {
        if v.len() != dims[eq.index()] {
            return Err(Error::InvalidArgument(format!(
                "{} regressors: expected {}, got {}",
                eq.tag(),
                dims[eq.index()],
                v.len()
            )));
        }
    }
    if chain.is_empty() {
        return Err(Error::InvalidArgument("chain has no draws".into()));
    }
    if mc == 0 {
        return Err(Error::InvalidArgument("need at least one simulation per draw".into()));
    }

    let mut pa = Accumulator::default();
    let mut pu = Accumulator::default();
    let mut pca = Accumulator::default();
    let mut change = Accumulator::default();
    let mut cons = Accumulator::default();
    let mut skipped = 0;
    for d in &chain.draws {
        let Some(p) = predict_draw(x, &d.theta_identified, &d.sigma, dims, mc, rng)? else {
            skipped += 1;
            continue;
        };
        let p_access = match regime {
            AccessRegime::Observed => p.p_access,
            AccessRegime::Legalized => 1.0,
        };
        pa.push(p_access, 0.0);
        pca.push(p.p_cond, p.p_cond_var);
        pu.push(p_access * p.p_cond, p_access * p_access * p.p_cond_var);
        let gap = 1.0 - p.p_access;
        change.push(gap * p.p_cond, gap * gap * p.p_cond_var);
        if p.consumption.is_finite() {
            cons.push(p.consumption, p.consumption_var);
        }
    }
    let p_use = pu.finish();
    Ok(PredictiveResult {
        p_access: pa.finish(),
        p_use,
        p_use_given_access: pca.finish(),
        change_pp: change.finish().scaled(100.0),
        consumption: cons.finish(),
        draws_used: pa.values.len(),
        draws_skipped: skipped,
        zero_probability: p_use.mean < 5e-5,
    })
}

/// Change in P(use) from making access certain, in percentage points.
pub fn legalize_delta<R: Rng + ?Sized>(
    x: &[Vec<f64>; 3],
    chain: &ChainStore,
    mc: usize,
    rng: &mut R,
) -> Result<Estimate> {
    Ok(predict_individual(x, chain, AccessRegime::Observed, mc, rng)?.change_pp)
}

/// One individual of the population used for revenue aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationMember {
    pub x: [Vec<f64>; 3],
    /// Survey expansion factor.
    pub weight: f64,
}

/// Population from a dataset, with each record's price regressors replaced
/// by the scenario's.
pub fn population_from_dataset(
    dataset: &Dataset,
    scenario: &Scenario,
    layout: &PolicyLayout,
) -> Result<Vec<PopulationMember>> {
    let columns = dataset.columns();
    dataset
        .records()
        .iter()
        .map(|r| {
            if !(r.weight > 0.0 && r.weight.is_finite()) {
                return Err(Error::DataIntegrity {
                    message: "revenue aggregation needs a positive weight for every record".into(),
                    rows: vec![r.id],
                });
            }
            let mut profile = CovariateProfile::default();
            for eq in Equation::ALL {
                for (name, v) in columns.names(eq).iter().zip(r.regressors(eq)) {
                    profile.values.insert(name.clone(), *v);
                }
            }
            let x = profile.with_scenario(scenario, layout)?.regressors(columns)?;
            Ok(PopulationMember { x, weight: r.weight })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Revenue {
    /// Annual tax revenue in US dollars.
    pub usd: Estimate,
    /// Weighted share of the population using under legalization.
    pub users_share: Estimate,
    /// Weighted mean monthly joints among users.
    pub joints_per_user: Estimate,
}

/// Kahan–Babuška summation.
#[derive(Default, Clone, Copy)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(self) -> f64 {
        self.s + self.c
    }
}

/// Annual legal-market tax revenue under legalization: every individual has
/// access, use and quantity are simulated jointly from each posterior draw,
/// and taxed grams (one joint ≈ one gram) outside the black market are
/// aggregated with survey weights. `reps` simulations per individual and
/// draw.
pub fn tax_revenue<R: Rng + ?Sized>(
    population: &[PopulationMember],
    chain: &ChainStore,
    scenario: &Scenario,
    reps: usize,
    rng: &mut R,
) -> Result<Revenue> {
    scenario.validate()?;
    if chain.is_empty() || reps == 0 {
        return Err(Error::InvalidArgument("need draws and at least one replication".into()));
    }
    let dims = chain.dims();
    let tax_usd = scenario.tax_hundredths() as f64 / 10_000.0;
    let legal = 1.0 - scenario.black_market_share;
    let dot = |x: &[f64], b: &[f64]| x.iter().zip(b).map(|(x, b)| x * b).sum::<f64>();

    let (mut rev, mut share, mut joints) = (Accumulator::default(), Accumulator::default(), Accumulator::default());
    for d in &chain.draws {
        let sac = d.sigma[(0, 1)];
        if sac * sac >= 1.0 {
            continue;
        }
        let cond_sd = (1.0 - sac * sac).sqrt();
        let ([ba, bc], var_y) = quantity_conditional_moments(&d.sigma)?;
        let sd_y = var_y.max(0.0).sqrt();
        let th = &d.theta_identified;
        let (mut total, mut users, mut units, mut weight) = (Sum::default(), Sum::default(), Sum::default(), Sum::default());
        for m in population {
            let mu_a = dot(&m.x[0], &th[..dims[0]]);
            let mu_c = dot(&m.x[1], &th[dims[0]..dims[0] + dims[1]]);
            let mu_y = dot(&m.x[2], &th[dims[0] + dims[1]..]);
            weight.add(m.weight);
            for _ in 0..reps {
                let ua = sample_truncated_normal(mu_a, 1.0, TruncationInterval::positive(), rng)?;
                let z: f64 = rng.sample(StandardNormal);
                let uc = mu_c + sac * (ua - mu_a) + cond_sd * z;
                if uc <= 0.0 {
                    continue;
                }
                let z: f64 = rng.sample(StandardNormal);
                let q = (mu_y + ba * (ua - mu_a) + bc * (uc - mu_c) + sd_y * z).exp();
                let w = m.weight / reps as f64;
                total.add(q * 12.0 * legal * w * tax_usd);
                users.add(w);
                units.add(w * q);
            }
        }
        rev.push(total.value(), 0.0);
        share.push(users.value() / weight.value(), 0.0);
        if users.value() > 0.0 {
            joints.push(units.value() / users.value(), 0.0);
        }
    }
    Ok(Revenue {
        usd: rev.finish(),
        users_share: share.finish(),
        joints_per_user: joints.finish(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Summary {
    /// Mean, sd and equal-tailed 95% interval.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if n > 1.0 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            sd,
            lower: crate::diagnostics::quantile(values, 0.025),
            upper: crate::diagnostics::quantile(values, 0.975),
        }
    }
}

/// Price elasticity of quantity per draw: the log-price coefficient, plus
/// the group's interaction coefficient when `interaction` is given.
pub fn elasticity_draws(chain: &ChainStore, log_price: &str, interaction: Option<&str>) -> Result<Vec<f64>> {
    let cols = &chain.meta.columns;
    let off = cols.offset(Equation::Quantity);
    let pos = |name: &str| {
        cols.position(Equation::Quantity, name)
            .map(|p| off + p)
            .ok_or_else(|| Error::Schema(format!("no quantity regressor `{name}`")))
    };
    let base = pos(log_price)?;
    let extra = interaction.map(pos).transpose()?;
    Ok(chain
        .draws
        .iter()
        .map(|d| d.theta_identified[base] + extra.map_or(0.0, |k| d.theta_identified[k]))
        .collect())
}

pub fn elasticity(chain: &ChainStore, log_price: &str, interaction: Option<&str>) -> Result<Summary> {
    if chain.is_empty() {
        return Err(Error::InvalidArgument("chain has no draws".into()));
    }
    Ok(Summary::of(&elasticity_draws(chain, log_price, interaction)?))
}

/// A row of the scenario table (one individual, one scenario).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub profile: String,
    pub scenario: String,
    pub price_cents: f64,
    pub risk: Option<RiskLevel>,
    pub result: PredictiveResult,
}

pub fn scenario_table_csv(rows: &[ScenarioRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "profile",
        "scenario",
        "price_usd_cents",
        "risk",
        "p_access",
        "p_access_se",
        "p_use",
        "p_use_se",
        "p_use_access",
        "p_use_access_se",
        "change_pp",
        "consumption",
        "consumption_se",
        "zero_probability",
    ])?;
    for r in rows {
        let res = &r.result;
        w.write_record([
            r.profile.clone(),
            r.scenario.clone(),
            r.price_cents.to_string(),
            r.risk.map(|k| k.as_str().to_string()).unwrap_or_default(),
            res.p_access.mean.to_string(),
            res.p_access.se.to_string(),
            res.p_use.mean.to_string(),
            res.p_use.se.to_string(),
            res.p_use_given_access.mean.to_string(),
            res.p_use_given_access.se.to_string(),
            res.change_pp.mean.to_string(),
            res.consumption.mean.to_string(),
            res.consumption.se.to_string(),
            res.zero_probability.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn scenario_table_text(rows: &[ScenarioRow]) -> String {
    let mut out = format!(
        "{:<16} {:>9} {:>7}  {:>8} {:>7}  {:>8} {:>7}  {:>8} {:>7}  {:>10}  {:>8} {:>7}\n",
        "Price scenario", "Price", "Risk", "P(acc)", "se", "P(use)", "se", "P(use|a)", "se", "Change", "Cons.", "se"
    );
    let mut current = None;
    for r in rows {
        if current != Some(&r.profile) {
            out += &format!("-- {} --\n", r.profile);
            current = Some(&r.profile);
        }
        let res = &r.result;
        let star = if res.zero_probability { "*" } else { "" };
        out += &format!(
            "{:<16} {:>9} {:>7}  {:>7.2}% {:>7.4}  {:>7.2}% {:>7.4}  {:>7.2}% {:>7.4}  {:>6.2} p.p.  {:>7.2}{star} {:>7.2}\n",
            r.scenario,
            format!("US¢ {:.1}", r.price_cents),
            r.risk.map_or("-", |k| k.as_str()),
            100.0 * res.p_access.mean,
            res.p_access.se,
            100.0 * res.p_use.mean,
            res.p_use.se,
            100.0 * res.p_use_given_access.mean,
            res.p_use_given_access.se,
            res.change_pp.mean,
            res.consumption.mean,
            res.consumption.se,
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenueRow {
    pub scenario: String,
    pub price_cents: f64,
    pub tax_cents: String,
    pub revenue: Revenue,
}

pub fn revenue_table_csv(rows: &[RevenueRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "scenario",
        "price_usd_cents",
        "tax_usd_cents",
        "revenue_usd_million",
        "revenue_sd",
        "revenue_se",
        "users_share",
        "joints_per_user",
    ])?;
    for r in rows {
        let m = r.revenue.usd.scaled(1e-6);
        w.write_record([
            r.scenario.clone(),
            r.price_cents.to_string(),
            r.tax_cents.clone(),
            m.mean.to_string(),
            m.sd.to_string(),
            m.se.to_string(),
            r.revenue.users_share.mean.to_string(),
            r.revenue.joints_per_user.mean.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

pub fn revenue_table_text(rows: &[RevenueRow]) -> String {
    let mut out = format!("{:<16} {:>12} {:>12} {:>14}\n", "Price scenario", "Price/gram", "Tax/gram", "USD million");
    for r in rows {
        out += &format!(
            "{:<16} {:>12} {:>12} {:>14}\n",
            r.scenario,
            format!("US¢ {:.1}", r.price_cents),
            format!("US¢ {}", r.tax_cents),
            format!("USD {:.1}", r.revenue.usd.mean * 1e-6),
        );
    }
    out
}

fn default_mc() -> usize {
    1000
}

fn default_reps() -> usize {
    1
}

/// Scenario file: representative individuals × scenarios for the
/// prediction table, and the price points for the revenue table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioGrid {
    #[serde(default)]
    pub layout: PolicyLayout,
    #[serde(default)]
    pub profiles: Vec<CovariateProfile>,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
    #[serde(default)]
    pub revenue: Vec<Scenario>,
    /// Latent simulations per posterior draw for each prediction.
    #[serde(default = "default_mc")]
    pub mc_draws: usize,
    /// Simulations per individual and draw for revenue.
    #[serde(default = "default_reps")]
    pub reps: usize,
}

impl ScenarioGrid {
    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let grid: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.scenarios.iter().chain(&self.revenue) {
            s.validate()?;
        }
        if self.mc_draws == 0 || self.reps == 0 {
            return Err(Error::InvalidArgument("mc_draws and reps must be positive".into()));
        }
        Ok(())
    }
}

/// Every profile under every scenario. Row `k` uses its own random stream,
/// so rows do not depend on each other.
pub fn run_scenarios(grid: &ScenarioGrid, chain: &ChainStore, seed: u64) -> Result<Vec<ScenarioRow>> {
    let streams = Streams::new(seed);
    let mut rows = Vec::new();
    for profile in &grid.profiles {
        for scenario in &grid.scenarios {
            scenario.validate()?;
            let x = profile.with_scenario(scenario, &grid.layout)?.regressors(&chain.meta.columns)?;
            let mut rng = streams.block(rows.len() as u64, Block::Predictive);
            let result = predict_individual(&x, chain, scenario.regime, grid.mc_draws, &mut rng)?;
            rows.push(ScenarioRow {
                profile: profile.name.clone(),
                scenario: scenario.name.clone(),
                price_cents: scenario.price,
                risk: scenario.risk,
                result,
            });
        }
    }
    Ok(rows)
}

pub fn run_revenue(grid: &ScenarioGrid, population: &Dataset, chain: &ChainStore, seed: u64) -> Result<Vec<RevenueRow>> {
    if population.columns() != &chain.meta.columns {
        return Err(Error::Schema("population regressors differ from the fitted chain's".into()));
    }
    let streams = Streams::new(seed);
    grid.revenue
        .iter()
        .enumerate()
        .map(|(k, scenario)| {
            let members = population_from_dataset(population, scenario, &grid.layout)?;
            let mut rng = streams.block(k as u64, Block::Predictive);
            Ok(RevenueRow {
                scenario: scenario.name.clone(),
                price_cents: scenario.price,
                tax_cents: scenario.tax_display(),
                revenue: tax_revenue(&members, chain, scenario, grid.reps, &mut rng)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{ChainMeta, Draw, Step2Set};
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_with(theta: Vec<f64>, sigma: Matrix3<f64>, dims: [usize; 3], n: usize) -> ChainStore {
        let names = |p: &str, k: usize| (0..k).map(|i| format!("{p}{i}")).collect();
        ChainStore {
            meta: ChainMeta {
                seed: 0,
                chain: 0,
                iterations: n,
                burn_in: 0,
                thin: 1,
                step2: Step2Set::Accessed,
                columns: EquationColumns {
                    access: names("a", dims[0]),
                    use_: names("c", dims[1]),
                    quantity: names("y", dims[2]),
                },
                n_obs: 0,
                group_counts: [0; 3],
                variance_repairs: 0,
            },
            draws: (0..n)
                .map(|_| Draw { theta: theta.clone(), omega: sigma, sigma, theta_identified: theta.clone() })
                .collect(),
            wall_time: Default::default(),
        }
    }

    #[test]
    fn table4_tax_arithmetic() {
        for (price, tax) in [(7.3, "6.0"), (11.5, "10.2"), (39.1, "37.8"), (97.8, "96.5")] {
            let s = Scenario::new("s", price);
            assert_eq!(s.tax_display(), tax);
            assert_eq!(s.tax_hundredths(), hundredths(price) - 133);
        }
        let mut s = Scenario::new("s", 7.3);
        s.tax = Some(5.97);
        s.validate().unwrap();
        s.tax = Some(6.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn conditional_moments_match_precision_oracle() {
        let sigma = Matrix3::new(1.0, 0.3, 0.5, 0.3, 1.0, -0.2, 0.5, -0.2, 2.0);
        let ([ba, bc], v) = quantity_conditional_moments(&sigma).unwrap();
        let p = sigma.try_inverse().unwrap();
        assert!((v - 1.0 / p[(2, 2)]).abs() < 1e-12);
        assert!((ba + p[(2, 0)] / p[(2, 2)]).abs() < 1e-12);
        assert!((bc + p[(2, 1)] / p[(2, 2)]).abs() < 1e-12);
    }

    #[test]
    fn independent_identity_chain() {
        let chain = chain_with(vec![0.0, 0.0, 1.0], Matrix3::identity(), [1, 1, 1], 2);
        let x = [vec![1.0], vec![1.0], vec![1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = predict_individual(&x, &chain, AccessRegime::Observed, 20_000, &mut rng).unwrap();
        assert!((r.p_access.mean - 0.5).abs() < 1e-15);
        assert!((r.p_use_given_access.mean - 0.5).abs() < 1e-12);
        assert!((r.p_use.mean - 0.25).abs() < 1e-12);
        let lognormal = (1.0f64 + 0.5).exp();
        assert!((r.consumption.mean - lognormal).abs() < 4.0 * r.consumption.se, "{:?}", r.consumption);
        assert!((r.change_pp.mean - 25.0).abs() < 1e-10);
        let l = predict_individual(&x, &chain, AccessRegime::Legalized, 100, &mut rng).unwrap();
        assert_eq!(l.p_use.mean, l.p_use_given_access.mean);
        assert_eq!(l.p_access.mean, 1.0);
    }

    #[test]
    fn saturated_access_has_no_legalization_effect() {
        let chain = chain_with(vec![40.0, 0.3, 0.0], Matrix3::identity(), [1, 1, 1], 1);
        let x = [vec![1.0], vec![1.0], vec![1.0]];
        let d = legalize_delta(&x, &chain, 100, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(d.mean, 0.0);
    }

    #[test]
    fn legalization_delta_independence_algebra() {
        let chain = chain_with(vec![0.4, -0.7, 0.0], Matrix3::identity(), [1, 1, 1], 1);
        let x = [vec![1.0], vec![1.0], vec![1.0]];
        let d = legalize_delta(&x, &chain, 1000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let expect = 100.0 * (1.0 - normal_cdf(0.4)) * normal_cdf(-0.7);
        assert!((d.mean - expect).abs() < 1e-9);
    }

    #[test]
    fn correlated_use_probability_matches_bivariate_oracle() {
        // P(C=1 | A=1) = P(U_a > 0, U_c > 0) / P(U_a > 0) by rejection
        let sigma = Matrix3::new(1.0, 0.6, 0.0, 0.6, 1.0, 0.0, 0.0, 0.0, 1.0);
        let chain = chain_with(vec![0.2, -0.3, 0.0], sigma, [1, 1, 1], 1);
        let x = [vec![1.0], vec![1.0], vec![1.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = predict_individual(&x, &chain, AccessRegime::Observed, 40_000, &mut rng).unwrap();
        let (mut acc, mut both) = (0.0, 0.0);
        for _ in 0..400_000 {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let ua = 0.2 + z1;
            let uc = -0.3 + 0.6 * z1 + 0.8 * z2;
            if ua > 0.0 {
                acc += 1.0;
                if uc > 0.0 {
                    both += 1.0;
                }
            }
        }
        let p = both / acc;
        let se = (p * (1.0 - p) / acc + r.p_use_given_access.se.powi(2)).sqrt();
        assert!((r.p_use_given_access.mean - p).abs() < 3.0 * se);
    }

    #[test]
    fn profile_scenario_levers() {
        let layout = PolicyLayout {
            log_price: Some("log_price".into()),
            price_interactions: vec![("age30:log_price".into(), "age30".into())],
            risk_dummies: [(RiskLevel::Medium, "risk_medium".into()), (RiskLevel::Low, "risk_low".into())]
                .into_iter()
                .collect(),
            price_units: PriceUnits::default(),
        };
        let profile = CovariateProfile {
            name: "p".into(),
            values: [("age30", 1.0), ("risk_low", 1.0), ("risk_medium", 0.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        };
        let mut s = Scenario::new("base", 78.2);
        s.risk = Some(RiskLevel::Medium);
        let p = profile.with_scenario(&s, &layout).unwrap();
        let lp = (0.782f64 * 3274.0).ln();
        assert!((p.values["log_price"] - lp).abs() < 1e-12);
        assert_eq!(p.values["age30:log_price"], p.values["log_price"]);
        assert_eq!((p.values["risk_medium"], p.values["risk_low"]), (1.0, 0.0));
        s.risk = Some(RiskLevel::High);
        let p = profile.with_scenario(&s, &layout).unwrap();
        assert_eq!((p.values["risk_medium"], p.values["risk_low"]), (0.0, 0.0));
        let cols = EquationColumns { access: vec!["age30".into()], use_: vec!["nope".into()], quantity: vec![] };
        assert!(matches!(p.regressors(&cols), Err(Error::Schema(_))));
    }

    #[test]
    fn elasticity_examples() {
        let mut chain = chain_with(vec![0.0, 0.0, 1.0, -0.445, 0.337], Matrix3::identity(), [1, 1, 3], 3);
        chain.meta.columns.quantity = vec!["intercept".into(), "log_price".into(), "age50:log_price".into()];
        let e = elasticity(&chain, "log_price", None).unwrap();
        assert!((e.mean + 0.445).abs() < 1e-15 && e.sd == 0.0);
        let e = elasticity(&chain, "log_price", Some("age50:log_price")).unwrap();
        assert!((e.mean + 0.108).abs() < 1e-12);
        for d in &mut chain.draws {
            d.theta_identified = vec![0.0; 5];
        }
        assert_eq!(elasticity(&chain, "log_price", None).unwrap().mean, 0.0);
    }

    #[test]
    fn revenue_zero_tax_and_linearity() {
        let chain = chain_with(vec![0.0, 0.0, 1.0], Matrix3::identity(), [1, 1, 1], 2);
        let pop = vec![
            PopulationMember { x: [vec![1.0], vec![1.0], vec![1.0]], weight: 100.0 },
            PopulationMember { x: [vec![1.0], vec![1.0], vec![1.0]], weight: 50.0 },
        ];
        let mut s = Scenario::new("free", 1.33);
        let r = tax_revenue(&pop, &chain, &s, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.usd.mean, 0.0);
        s.price = 11.33;
        let a = tax_revenue(&pop, &chain, &s, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        s.price = 21.33;
        let b = tax_revenue(&pop, &chain, &s, 10, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((b.usd.mean - 2.0 * a.usd.mean).abs() < 1e-9 * a.usd.mean);
    }

    #[test]
    fn revenue_matches_closed_form_expectation() {
        // Σ = I: P(use | access) = Φ(μ_c), E[joints | use] = exp(μ_y + 1/2)
        let chain = chain_with(vec![0.3, 0.5, 1.0], Matrix3::identity(), [1, 1, 1], 1);
        let pop = vec![
            PopulationMember { x: [vec![1.0], vec![1.0], vec![1.0]], weight: 1000.0 },
            PopulationMember { x: [vec![1.0], vec![-1.0], vec![0.5]], weight: 3000.0 },
        ];
        let s = Scenario::new("t", 11.33);
        let r = tax_revenue(&pop, &chain, &s, 200_000, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let per = |mc: f64, my: f64| normal_cdf(mc) * (my + 0.5f64).exp();
        let expect = 12.0 * 0.66 * 0.10 * (1000.0 * per(0.5, 1.0) + 3000.0 * per(-0.5, 0.5));
        assert!((r.usd.mean - expect).abs() < 0.01 * expect, "{} vs {expect}", r.usd.mean);
    }

    #[test]
    fn generic_conditional_oracle_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let s = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
            let d = DVector::from_fn(3, |i, _| 1.0 / s[(i, i)].sqrt());
            let mut sig = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    sig[(i, j)] = s[(i, j)] * if i < 2 { d[i] } else { 1.0 } * if j < 2 { d[j] } else { 1.0 };
                }
            }
            let ([ba, bc], v) = quantity_conditional_moments(&sig).unwrap();
            let p = sig.try_inverse().unwrap();
            assert!((v - 1.0 / p[(2, 2)]).abs() < 1e-10 * v.max(1.0));
            assert!((ba + p[(2, 0)] / p[(2, 2)]).abs() < 1e-9);
            assert!((bc + p[(2, 1)] / p[(2, 2)]).abs() < 1e-9);
        }
    }

    #[test]
    fn tables_render() {
        let chain = chain_with(vec![0.0, 0.0, 1.0], Matrix3::identity(), [1, 1, 1], 2);
        let x = [vec![1.0], vec![1.0], vec![1.0]];
        let res = predict_individual(&x, &chain, AccessRegime::Observed, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let rows = vec![ScenarioRow {
            profile: "woman 20s".into(),
            scenario: "Baseline".into(),
            price_cents: 78.2,
            risk: Some(RiskLevel::High),
            result: res,
        }];
        let text = scenario_table_text(&rows);
        assert!(text.contains("US¢ 78.2") && text.contains("50.00%"));
        let csv = String::from_utf8(scenario_table_csv(&rows).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
}
