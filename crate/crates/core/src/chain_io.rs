//! Chain files: one CSV row per retained draw plus a JSON metadata sidecar.
//!
//! Floats are written in Rust's shortest round-trip form, so a reloaded
//! chain is bit-identical to the one written. Wall time is deliberately not
//! part of the sidecar; chain files for the same seed and config are
//! byte-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::model::{Equation, EquationColumns};
use crate::sampler::{ChainMeta, ChainStore, Draw};

/// Upper-triangle positions of a 3x3 symmetric matrix, row-major.
pub const UPPER: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

fn theta_names(prefix: &str, columns: &EquationColumns) -> Vec<String> {
    Equation::ALL
        .iter()
        .flat_map(|&eq| {
            columns
                .names(eq)
                .iter()
                .map(move |n| format!("{prefix}[{}:{n}]", eq.tag()))
        })
        .collect()
}

fn matrix_names(prefix: &str) -> Vec<String> {
    UPPER
        .iter()
        .map(|(i, j)| format!("{prefix}[{},{}]", i + 1, j + 1))
        .collect()
}

/// Identified location parameters, named `theta[a:x]` etc.
pub fn location_names(columns: &EquationColumns) -> Vec<String> {
    theta_names("theta", columns)
}

/// Free elements of the identified covariance.
pub const SIGMA_FREE: [&str; 4] = ["sigma[1,2]", "sigma[1,3]", "sigma[2,3]", "sigma[3,3]"];

/// All CSV columns after the leading `draw` index.
pub fn column_names(columns: &EquationColumns) -> Vec<String> {
    let mut names = theta_names("theta_raw", columns);
    names.extend(matrix_names("omega"));
    names.extend(matrix_names("sigma"));
    names.extend(location_names(columns));
    names
}

fn draw_values(d: &Draw) -> impl Iterator<Item = f64> + '_ {
    d.theta
        .iter()
        .copied()
        .chain(UPPER.iter().map(|&(i, j)| d.omega[(i, j)]))
        .chain(UPPER.iter().map(|&(i, j)| d.sigma[(i, j)]))
        .chain(d.theta_identified.iter().copied())
}

fn symmetric(v: &[f64]) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for (k, &(i, j)) in UPPER.iter().enumerate() {
        m[(i, j)] = v[k];
        m[(j, i)] = v[k];
    }
    m
}

impl ChainStore {
    /// Every stored quantity as a named series, in CSV column order.
    pub fn named_series(&self) -> Vec<(String, Vec<f64>)> {
        let names = column_names(&self.meta.columns);
        let mut out: Vec<(String, Vec<f64>)> = names
            .into_iter()
            .map(|n| (n, Vec::with_capacity(self.len())))
            .collect();
        for d in &self.draws {
            for (slot, v) in out.iter_mut().zip(draw_values(d)) {
                slot.1.push(v);
            }
        }
        out
    }

    pub fn series(&self, name: &str) -> Option<Vec<f64>> {
        self.named_series()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }
}

pub fn write_draws<W: Write>(store: &ChainStore, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["draw".to_string()];
    header.extend(column_names(&store.meta.columns));
    w.write_record(&header)?;
    for (k, d) in store.draws.iter().enumerate() {
        let mut row = vec![(k + 1).to_string()];
        row.extend(draw_values(d).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws<R: Read>(meta: ChainMeta, input: R) -> Result<ChainStore> {
    let dims = meta.columns.dims();
    let total = meta.columns.total();
    let expected = column_names(&meta.columns);
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("draw") || header[1..] != expected[..] {
        return Err(Error::Schema(
            "chain columns do not match the metadata column layout".into(),
        ));
    }
    let mut draws = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Schema(format!("bad number in chain file: {s:?}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != expected.len() {
            return Err(Error::Schema("ragged chain row".into()));
        }
        let (theta, rest) = vals.split_at(total);
        let (omega, rest) = rest.split_at(6);
        let (sigma, ident) = rest.split_at(6);
        draws.push(Draw {
            theta: theta.to_vec(),
            omega: symmetric(omega),
            sigma: symmetric(sigma),
            theta_identified: ident.to_vec(),
        });
    }
    debug_assert!(draws.iter().all(|d| d.theta.len() == dims.iter().sum::<usize>()));
    Ok(ChainStore {
        meta,
        draws,
        wall_time: Default::default(),
    })
}

/// Sidecar path for a chain CSV: `chain_0.csv` -> `chain_0.meta.json`.
pub fn meta_path(chain_csv: &Path) -> PathBuf {
    chain_csv.with_extension("meta.json")
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_chain(store: &ChainStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_draws(store, &mut buf)?;
    write_atomic(path, &buf)?;
    let meta = serde_json::to_vec_pretty(&store.meta)?;
    write_atomic(&meta_path(path), &meta)
}

pub fn load_chain(path: &Path) -> Result<ChainStore> {
    let meta: ChainMeta = serde_json::from_slice(&fs::read(meta_path(path))?)?;
    read_draws(meta, fs::File::open(path)?)
}

/// Concatenates the draws of chains fitted to the same regressors. The
/// first chain's metadata is kept.
pub fn pool(chains: Vec<ChainStore>) -> Result<ChainStore> {
    let mut it = chains.into_iter();
    let mut out = it
        .next()
        .ok_or_else(|| Error::InvalidArgument("no chains to pool".into()))?;
    for c in it {
        if c.meta.columns != out.meta.columns {
            return Err(Error::Schema("chains were fitted with different regressors".into()));
        }
        out.draws.extend(c.draws);
        out.meta.variance_repairs += c.meta.variance_repairs;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Step2Set;

    fn store() -> ChainStore {
        let columns = EquationColumns {
            access: vec!["intercept".into(), "x".into()],
            use_: vec!["intercept".into()],
            quantity: vec!["intercept".into(), "log_price".into()],
        };
        let omega = Matrix3::new(2.0, 0.1, 0.3, 0.1, 1.0 / 3.0, -1e-9, 0.3, -1e-9, 7.5e12);
        let draws = (0..3)
            .map(|k| Draw {
                theta: vec![0.1 * k as f64, -1.0 / 7.0, std::f64::consts::PI, 1e-300, 5.0],
                omega,
                sigma: omega * 0.5,
                theta_identified: vec![1.0, 2.0, 3.0, 4.0, f64::MIN_POSITIVE],
            })
            .collect();
        ChainStore {
            meta: ChainMeta {
                seed: 9,
                chain: 0,
                iterations: 3,
                burn_in: 0,
                thin: 1,
                step2: Step2Set::Accessed,
                columns,
                n_obs: 0,
                group_counts: [0, 0, 0],
                variance_repairs: 0,
            },
            draws,
            wall_time: Default::default(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("chain_0.csv");
        save_chain(&s, &p).unwrap();
        let back = load_chain(&p).unwrap();
        assert_eq!(back.meta, s.meta);
        for (a, b) in back.draws.iter().zip(&s.draws) {
            let x: Vec<u64> = draw_values(a).map(f64::to_bits).collect();
            let y: Vec<u64> = draw_values(b).map(f64::to_bits).collect();
            assert_eq!(x, y);
        }
        let first = fs::read(&p).unwrap();
        save_chain(&back, &p).unwrap();
        assert_eq!(first, fs::read(&p).unwrap());
    }

    #[test]
    fn names_and_series() {
        let s = store();
        let names = column_names(&s.meta.columns);
        assert_eq!(names[0], "theta_raw[a:intercept]");
        assert!(names.contains(&"omega[2,3]".to_string()));
        assert!(names.contains(&"theta[y:log_price]".to_string()));
        assert_eq!(names.len(), 5 + 6 + 6 + 5);
        assert_eq!(s.series("sigma[1,1]").unwrap(), vec![1.0; 3]);
        assert!(s.series("nope").is_none());
    }

    #[test]
    fn mismatched_header_is_rejected() {
        let s = store();
        let mut buf = Vec::new();
        write_draws(&s, &mut buf).unwrap();
        let mut meta = s.meta.clone();
        meta.columns.use_.push("extra".into());
        assert!(matches!(read_draws(meta, &buf[..]), Err(Error::Schema(_))));
    }
}
