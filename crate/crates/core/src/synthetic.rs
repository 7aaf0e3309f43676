//! Forward simulation of the three-part model, for recovery tests and demos.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnSpec, RegressorSpec, Transform, INTERCEPT};
use crate::error::{Error, Result};
use crate::model::{Dataset, Equation, EquationColumns, GroupPartition, ObservationRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorLaw {
    /// An intercept followed by i.i.d. standard-normal columns.
    StandardNormal,
    /// Fixed rows, recycled if shorter than `n`; one matrix per equation,
    /// each row the full regressor vector (intercept included if wanted).
    Supplied { access: Vec<Vec<f64>>, use_: Vec<Vec<f64>>, quantity: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n: usize,
    pub theta_access: Vec<f64>,
    pub theta_use: Vec<f64>,
    pub theta_quantity: Vec<f64>,
    /// Identified covariance, row-major 3x3.
    pub sigma: [[f64; 3]; 3],
    #[serde(default = "default_law")]
    pub regressors: RegressorLaw,
    pub seed: u64,
}

fn default_law() -> RegressorLaw {
    RegressorLaw::StandardNormal
}

impl GeneratorSpec {
    /// Three regressors per equation (intercept + two normals) and the
    /// correlated design used throughout the tests.
    pub fn recovery_design(n: usize, seed: u64) -> Self {
        Self {
            n,
            theta_access: vec![0.5, 0.8, -0.5],
            theta_use: vec![0.2, -0.6, 0.4],
            theta_quantity: vec![1.0, 0.5, -0.3],
            sigma: [[1.0, 0.6, 0.4], [0.6, 1.0, 0.7], [0.4, 0.7, 1.0]],
            regressors: RegressorLaw::StandardNormal,
            seed,
        }
    }

    pub fn sigma_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.sigma[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.sigma_matrix();
        if (s - s.transpose()).abs().max() > 1e-12 {
            return Err(Error::InvalidArgument("sigma must be symmetric".into()));
        }
        if s[(0, 0)] != 1.0 || s[(1, 1)] != 1.0 {
            return Err(Error::InvalidArgument(
                "sigma must have unit access and use variances".into(),
            ));
        }
        if s.cholesky().is_none() {
            return Err(Error::InvalidArgument("sigma is not positive definite".into()));
        }
        if self.theta_access.is_empty() || self.theta_use.is_empty() || self.theta_quantity.is_empty() {
            return Err(Error::InvalidArgument("every equation needs a coefficient".into()));
        }
        if let RegressorLaw::Supplied { access, use_, quantity } = &self.regressors {
            for (rows, dim) in [
                (access, self.theta_access.len()),
                (use_, self.theta_use.len()),
                (quantity, self.theta_quantity.len()),
            ] {
                if rows.is_empty() || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::InvalidArgument(
                        "supplied regressors do not match coefficient lengths".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn columns(&self) -> EquationColumns {
        let names = |tag: &str, n: usize| -> Vec<String> {
            match self.regressors {
                RegressorLaw::StandardNormal => std::iter::once(INTERCEPT.to_string())
                    .chain((1..n).map(|k| format!("x{tag}{k}")))
                    .collect(),
                RegressorLaw::Supplied { .. } => (0..n).map(|k| format!("x{tag}{k}")).collect(),
            }
        };
        EquationColumns {
            access: names("a", self.theta_access.len()),
            use_: names("c", self.theta_use.len()),
            quantity: names("y", self.theta_quantity.len()),
        }
    }
}

/// Latent utilities and errors behind each generated record.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTruth {
    pub id: u64,
    pub u_access: f64,
    pub u_use: f64,
    /// Log quantity whether or not it is observed.
    pub y: f64,
    pub errors: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub partition: GroupPartition,
    pub truth: Vec<LatentTruth>,
}

pub fn generate(spec: &GeneratorSpec) -> Result<Synthetic> {
    spec.validate()?;
    let chol = spec.sigma_matrix().cholesky().expect("validated").l();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let columns = spec.columns();
    let dot = |x: &[f64], b: &[f64]| x.iter().zip(b).map(|(x, b)| x * b).sum::<f64>();

    let mut records = Vec::with_capacity(spec.n);
    let mut truth = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let id = i as u64 + 1;
        let mut draw_x = |dim: usize, supplied: Option<&Vec<Vec<f64>>>| match supplied {
            Some(rows) => rows[i % rows.len()].clone(),
            None => std::iter::once(1.0)
                .chain((1..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
                .collect::<Vec<f64>>(),
        };
        let (xa, xc, xy) = match &spec.regressors {
            RegressorLaw::StandardNormal => (
                draw_x(spec.theta_access.len(), None),
                draw_x(spec.theta_use.len(), None),
                draw_x(spec.theta_quantity.len(), None),
            ),
            RegressorLaw::Supplied { access, use_, quantity } => (
                draw_x(0, Some(access)),
                draw_x(0, Some(use_)),
                draw_x(0, Some(quantity)),
            ),
        };
        let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let e = chol * z;
        let ua = dot(&xa, &spec.theta_access) + e[0];
        let uc = dot(&xc, &spec.theta_use) + e[1];
        let y = dot(&xy, &spec.theta_quantity) + e[2];
        let access = ua > 0.0;
        let uses = access.then_some(uc > 0.0);
        let log_q = (uses == Some(true)).then_some(y);
        records.push(ObservationRecord::new(id, access, uses, log_q, xa, xc, xy, 1.0, "synthetic")?);
        truth.push(LatentTruth {
            id,
            u_access: ua,
            u_use: uc,
            y,
            errors: [e[0], e[1], e[2]],
        });
    }
    let partition = GroupPartition::from_records(&records);
    let dataset = Dataset::new(records, columns)?;
    Ok(Synthetic {
        dataset,
        partition,
        truth,
    })
}

impl Synthetic {
    /// CSV in the layout `build_dataset` reads, and the column spec that
    /// maps it back. Quantities are written in levels with a log transform.
    pub fn to_csv(&self) -> Result<(Vec<u8>, ColumnSpec)> {
        let columns = self.dataset.columns();
        let mut header: Vec<String> = ["id", "access", "use", "quantity", "weight"]
            .map(String::from)
            .to_vec();
        let mut regressors = Vec::new();
        let mut sources: Vec<(Equation, usize)> = Vec::new();
        let has_intercept = Equation::ALL
            .iter()
            .all(|&eq| columns.names(eq).first().map(String::as_str) == Some(INTERCEPT));
        for eq in Equation::ALL {
            for (k, name) in columns.names(eq).iter().enumerate() {
                if has_intercept && k == 0 {
                    continue;
                }
                header.push(name.clone());
                sources.push((eq, k));
                regressors.push(RegressorSpec::Numeric {
                    column: name.clone(),
                    name: None,
                    transform: Transform::None,
                    equations: vec![eq.tag().to_string()],
                });
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header)?;
        for r in self.dataset.records() {
            let flag = |b: bool| if b { "1" } else { "0" }.to_string();
            let mut row = vec![
                r.id.to_string(),
                flag(r.access),
                r.uses.map(flag).unwrap_or_default(),
                r.log_quantity.map(|y| y.exp().to_string()).unwrap_or_default(),
                r.weight.to_string(),
            ];
            row.extend(sources.iter().map(|&(eq, k)| r.regressors(eq)[k].to_string()));
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        let spec = ColumnSpec {
            id: Some("id".into()),
            access: "access".into(),
            use_: "use".into(),
            quantity: "quantity".into(),
            quantity_transform: Transform::Log,
            weight: Some("weight".into()),
            market: None,
            intercept: has_intercept,
            regressors,
        };
        Ok((bytes, spec))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, Table};
    use crate::model::Group;

    #[test]
    fn saturated_access_puts_everyone_in_g1() {
        let mut spec = GeneratorSpec::recovery_design(2000, 1);
        spec.theta_access = vec![-10.0, 0.0, 0.0];
        let s = generate(&spec).unwrap();
        assert_eq!(s.partition.count(Group::NoAccess), 2000);
    }

    #[test]
    fn independent_design_group_shares() {
        let mut spec = GeneratorSpec::recovery_design(40_000, 2);
        spec.sigma = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        spec.theta_access = vec![0.0];
        spec.theta_use = vec![0.0];
        let s = generate(&spec).unwrap();
        let n = 40_000.0;
        let accessed = s.partition.accessed() as f64 / n;
        let users = s.partition.count(Group::User) as f64 / n;
        // binomial sd is at most 0.0025
        assert!((accessed - 0.5).abs() < 0.01, "{accessed}");
        assert!((users - 0.25).abs() < 0.01, "{users}");
    }

    #[test]
    fn error_moments_match_sigma() {
        let spec = GeneratorSpec::recovery_design(50_000, 3);
        let s = generate(&spec).unwrap();
        let n = s.truth.len() as f64;
        let mut cov = Matrix3::zeros();
        for t in &s.truth {
            let e = Vector3::from(t.errors);
            cov += e * e.transpose() / n;
        }
        let diff = (cov - spec.sigma_matrix()).abs().max();
        assert!(diff < 0.03, "{cov}");
    }

    #[test]
    fn non_spd_sigma_is_rejected() {
        let mut spec = GeneratorSpec::recovery_design(10, 1);
        spec.sigma = [[1.0, 0.99, 0.0], [0.99, 1.0, 0.99], [0.0, 0.99, 1.0]];
        assert!(matches!(generate(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn csv_round_trip_rebuilds_the_dataset() {
        let s = generate(&GeneratorSpec::recovery_design(300, 4)).unwrap();
        let (bytes, spec) = s.to_csv().unwrap();
        let table = Table::from_reader(&bytes[..]).unwrap();
        let (ds, report) = build_dataset(&table, &spec).unwrap();
        assert!(report.forced_access.is_empty());
        assert_eq!(ds.columns(), s.dataset.columns());
        for (a, b) in ds.records().iter().zip(s.dataset.records()) {
            assert_eq!(a.access, b.access);
            assert_eq!(a.uses, b.uses);
            assert_eq!(a.x_access, b.x_access);
            assert_eq!(a.x_quantity, b.x_quantity);
            match (a.log_quantity, b.log_quantity) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }
}
