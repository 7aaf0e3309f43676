//! Observations, the group partition, location parameters and the
//! identified / unidentified covariance pair.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three stacked equations, in stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Equation {
    Access,
    Use,
    Quantity,
}

impl Equation {
    pub const ALL: [Equation; 3] = [Equation::Access, Equation::Use, Equation::Quantity];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Single-letter tag used in column names (`theta[a:educ]`).
    pub fn tag(self) -> &'static str {
        match self {
            Equation::Access => "a",
            Equation::Use => "c",
            Equation::Quantity => "y",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "a" | "access" => Some(Equation::Access),
            "c" | "use" => Some(Equation::Use),
            "y" | "quantity" => Some(Equation::Quantity),
            _ => None,
        }
    }
}

/// One survey respondent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub id: u64,
    pub access: bool,
    /// Present exactly when `access` is true.
    pub uses: Option<bool>,
    /// Log monthly quantity, present exactly for users.
    pub log_quantity: Option<f64>,
    pub x_access: Vec<f64>,
    pub x_use: Vec<f64>,
    pub x_quantity: Vec<f64>,
    pub weight: f64,
    pub market: String,
}

impl ObservationRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u64,
        access: bool,
        uses: Option<bool>,
        log_quantity: Option<f64>,
        x_access: Vec<f64>,
        x_use: Vec<f64>,
        x_quantity: Vec<f64>,
        weight: f64,
        market: impl Into<String>,
    ) -> Result<Self> {
        let rec = Self {
            id,
            access,
            uses,
            log_quantity,
            x_access,
            x_use,
            x_quantity,
            weight,
            market: market.into(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Error::DataIntegrity {
            message: msg.to_string(),
            rows: vec![self.id],
        };
        if self.uses.is_some() != self.access {
            return Err(bad("use indicator must be present exactly when access = 1"));
        }
        if self.log_quantity.is_some() != (self.uses == Some(true)) {
            return Err(bad("quantity must be present exactly for users"));
        }
        if let Some(y) = self.log_quantity {
            if !y.is_finite() {
                return Err(bad("non-finite log quantity"));
            }
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.x_access) && finite(&self.x_use) && finite(&self.x_quantity)) {
            return Err(bad("non-finite regressor"));
        }
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(bad("weight must be positive"));
        }
        Ok(())
    }

    pub fn group(&self) -> Group {
        match (self.access, self.uses) {
            (false, _) => Group::NoAccess,
            (true, Some(true)) => Group::User,
            (true, _) => Group::AccessOnly,
        }
    }

    pub fn regressors(&self, eq: Equation) -> &[f64] {
        match eq {
            Equation::Access => &self.x_access,
            Equation::Use => &self.x_use,
            Equation::Quantity => &self.x_quantity,
        }
    }

    pub fn regressors_mut(&mut self, eq: Equation) -> &mut Vec<f64> {
        match eq {
            Equation::Access => &mut self.x_access,
            Equation::Use => &mut self.x_use,
            Equation::Quantity => &mut self.x_quantity,
        }
    }
}

/// Which equations an observation informs: G1 (no access), G2 (access,
/// no use) or G3 (use).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    NoAccess,
    AccessOnly,
    User,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::NoAccess, Group::AccessOnly, Group::User];

    /// Number of leading stacked equations the group observes.
    pub fn dim(self) -> usize {
        match self {
            Group::NoAccess => 1,
            Group::AccessOnly => 2,
            Group::User => 3,
        }
    }

    pub fn index(self) -> usize {
        self.dim() - 1
    }

    /// Leading `dim x dim` block of a stacked 3x3 matrix.
    pub fn block(self, m: &Matrix3<f64>) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| m[(i, j)])
    }

    /// Leading entries of a stacked 3-vector.
    pub fn head(self, v: &[f64; 3]) -> &[f64] {
        &v[..self.dim()]
    }
}

/// Group membership of every observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    groups: Vec<Group>,
    counts: [usize; 3],
}

impl GroupPartition {
    pub fn from_records(records: &[ObservationRecord]) -> Self {
        let groups: Vec<Group> = records.iter().map(ObservationRecord::group).collect();
        let mut counts = [0; 3];
        for g in &groups {
            counts[g.index()] += 1;
        }
        Self { groups, counts }
    }

    pub fn group(&self, i: usize) -> Group {
        self.groups[i]
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn count(&self, g: Group) -> usize {
        self.counts[g.index()]
    }

    /// Observations with access (G2 ∪ G3).
    pub fn accessed(&self) -> usize {
        self.counts[1] + self.counts[2]
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Regressor names per equation; fixes H, K and L.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EquationColumns {
    pub access: Vec<String>,
    #[serde(rename = "use")]
    pub use_: Vec<String>,
    pub quantity: Vec<String>,
}

impl EquationColumns {
    pub fn names(&self, eq: Equation) -> &[String] {
        match eq {
            Equation::Access => &self.access,
            Equation::Use => &self.use_,
            Equation::Quantity => &self.quantity,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.access.len(), self.use_.len(), self.quantity.len()]
    }

    pub fn total(&self) -> usize {
        self.dims().iter().sum()
    }

    /// Position of the first coefficient of `eq` in the stacked vector.
    pub fn offset(&self, eq: Equation) -> usize {
        self.dims()[..eq.index()].iter().sum()
    }

    pub fn position(&self, eq: Equation, name: &str) -> Option<usize> {
        self.names(eq).iter().position(|n| n == name)
    }
}

/// Validated observations with their partition.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<ObservationRecord>,
    columns: EquationColumns,
    partition: GroupPartition,
    forced_access: usize,
}

impl Dataset {
    pub fn new(records: Vec<ObservationRecord>, columns: EquationColumns) -> Result<Self> {
        let dims = columns.dims();
        let mut seen = HashSet::with_capacity(records.len());
        let mut duplicates = Vec::new();
        let mut wrong_dims = Vec::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.id) {
                duplicates.push(r.id);
            }
            if Equation::ALL.iter().any(|&eq| r.regressors(eq).len() != dims[eq.index()]) {
                wrong_dims.push(r.id);
            }
        }
        if !duplicates.is_empty() {
            return Err(Error::DataIntegrity {
                message: "duplicate observation ids".into(),
                rows: duplicates,
            });
        }
        if !wrong_dims.is_empty() {
            return Err(Error::DataIntegrity {
                message: format!("regressor lengths differ from column layout {dims:?}"),
                rows: wrong_dims,
            });
        }
        if records.iter().any(|r| r.id >= u64::MAX - crate::rng::RESERVED_STREAMS) {
            return Err(Error::InvalidArgument("observation id out of range".into()));
        }
        let partition = GroupPartition::from_records(&records);
        Ok(Self {
            records,
            columns,
            partition,
            forced_access: 0,
        })
    }

    pub(crate) fn with_forced_access(mut self, n: usize) -> Self {
        self.forced_access = n;
        self
    }

    pub fn records(&self) -> &[ObservationRecord] {
        &self.records
    }

    pub fn columns(&self) -> &EquationColumns {
        &self.columns
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    /// Rows whose access flag was raised to 1 because they reported use.
    pub fn forced_access(&self) -> usize {
        self.forced_access
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Coefficients of the three equations.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationParams {
    pub access: DVector<f64>,
    pub use_: DVector<f64>,
    pub quantity: DVector<f64>,
}

impl LocationParams {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            access: DVector::zeros(dims[0]),
            use_: DVector::zeros(dims[1]),
            quantity: DVector::zeros(dims[2]),
        }
    }

    pub fn from_stacked(stacked: &[f64], dims: [usize; 3]) -> Result<Self> {
        if stacked.len() != dims.iter().sum::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "stacked coefficient length {} does not match {dims:?}",
                stacked.len()
            )));
        }
        let (a, rest) = stacked.split_at(dims[0]);
        let (c, y) = rest.split_at(dims[1]);
        Ok(Self {
            access: DVector::from_column_slice(a),
            use_: DVector::from_column_slice(c),
            quantity: DVector::from_column_slice(y),
        })
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.access
            .iter()
            .chain(self.use_.iter())
            .chain(self.quantity.iter())
            .copied()
            .collect()
    }

    pub fn get(&self, eq: Equation) -> &DVector<f64> {
        match eq {
            Equation::Access => &self.access,
            Equation::Use => &self.use_,
            Equation::Quantity => &self.quantity,
        }
    }

    /// Linear index `x' θ` for one equation.
    pub fn index(&self, eq: Equation, x: &[f64]) -> f64 {
        self.get(eq).iter().zip(x).map(|(b, v)| b * v).sum()
    }

    /// Coefficients expressed on the identified scale.
    pub fn rescaled(&self, rescale: [f64; 3]) -> Self {
        Self {
            access: &self.access * rescale[0],
            use_: &self.use_ * rescale[1],
            quantity: &self.quantity * rescale[2],
        }
    }
}

/// Identified covariance `D Ω D` with the coefficient rescalers `D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identified {
    pub sigma: Matrix3<f64>,
    pub rescale: [f64; 3],
}

/// Maps an unidentified covariance onto the identified scale with unit
/// variances in the two probit equations.
pub fn identify(omega: &Matrix3<f64>) -> Result<Identified> {
    if omega.cholesky().is_none() {
        return Err(Error::Decomposition(
            "covariance is not positive definite".into(),
        ));
    }
    let rescale = [1.0 / omega[(0, 0)].sqrt(), 1.0 / omega[(1, 1)].sqrt(), 1.0];
    let mut sigma = Matrix3::from_fn(|i, j| omega[(i, j)] * rescale[i] * rescale[j]);
    sigma[(0, 0)] = 1.0;
    sigma[(1, 1)] = 1.0;
    Ok(Identified { sigma, rescale })
}

/// Unidentified covariance together with its identified image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceState {
    pub omega: Matrix3<f64>,
    pub sigma: Matrix3<f64>,
}

impl CovarianceState {
    pub fn from_omega(omega: Matrix3<f64>) -> Result<Self> {
        let Identified { sigma, .. } = identify(&omega)?;
        Ok(Self { omega, sigma })
    }
}

/// Conjugate prior: `θ ~ N(θ0, Θ0)`, `Ω ~ IW(R0, r0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub theta_mean: DVector<f64>,
    pub theta_cov: DMatrix<f64>,
    pub omega_scale: Matrix3<f64>,
    pub omega_dof: f64,
}

impl PriorSpec {
    /// θ0 = 0, Θ0 = 1000·I, R0 = I3, r0 = 5.
    pub fn vague(n_coef: usize) -> Self {
        Self {
            theta_mean: DVector::zeros(n_coef),
            theta_cov: DMatrix::identity(n_coef, n_coef) * 1000.0,
            omega_scale: Matrix3::identity(),
            omega_dof: 5.0,
        }
    }

    pub fn validate(&self, n_coef: usize) -> Result<()> {
        if self.theta_mean.len() != n_coef
            || self.theta_cov.nrows() != n_coef
            || self.theta_cov.ncols() != n_coef
        {
            return Err(Error::InvalidArgument(format!(
                "prior dimensions do not match {n_coef} coefficients"
            )));
        }
        if self.theta_cov.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("prior location covariance is not SPD".into()));
        }
        if self.omega_scale.cholesky().is_none() {
            return Err(Error::InvalidArgument("prior covariance scale is not SPD".into()));
        }
        if !(self.omega_dof > 2.0) {
            return Err(Error::InvalidArgument(format!(
                "prior covariance dof must exceed 2, got {}",
                self.omega_dof
            )));
        }
        Ok(())
    }
}
