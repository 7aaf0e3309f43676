//! Survey variable construction: THC-weighted quantities, per-variety
//! prices by nearest-neighbour matching, price imputation for non-consumers,
//! and the risk-perception index.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::Table;
use crate::error::{Error, Result};

/// THC content of the creepy variety relative to regular (corinto counts as
/// regular).
pub const CREEPY_POTENCY: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VarietyQuantities {
    pub regular: f64,
    pub corinto: f64,
    pub creepy: f64,
    pub other: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThcWeighted {
    pub quantity: f64,
    /// Consumption of an unclassifiable variety; the record is left out.
    pub excluded: bool,
}

/// Regular-equivalent quantity `regular + corinto + 4 creepy`.
pub fn thc_weight(q: &VarietyQuantities) -> Result<ThcWeighted> {
    for (name, v) in [("regular", q.regular), ("corinto", q.corinto), ("creepy", q.creepy), ("other", q.other)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::DataIntegrity {
                message: format!("{name} quantity must be finite and non-negative, got {v}"),
                rows: vec![],
            });
        }
    }
    Ok(ThcWeighted {
        quantity: q.regular + q.corinto + CREEPY_POTENCY * q.creepy,
        excluded: q.other > 0.0,
    })
}

/// Splits a total between two varieties so that the quantity-weighted mean
/// of their prices equals the reported average price.
pub fn split_varieties(avg_price: f64, total: f64, price_i: f64, price_j: f64) -> Result<(f64, f64)> {
    if price_i == price_j {
        return Err(Error::Pipeline("variety prices must differ to split quantities".into()));
    }
    let (lo, hi) = (price_i.min(price_j), price_i.max(price_j));
    if !(avg_price >= lo && avg_price <= hi) {
        return Err(Error::Pipeline(format!(
            "average price {avg_price} outside [{lo}, {hi}]; split infeasible"
        )));
    }
    if !(total >= 0.0) {
        return Err(Error::Pipeline("total quantity must be non-negative".into()));
    }
    let qi = total * (price_j - avg_price) / (price_j - price_i);
    let qi = qi.clamp(0.0, total);
    Ok((qi, total - qi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variety {
    /// Regular and corinto.
    Regular,
    Creepy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchDonor {
    pub id: u64,
    pub variety: Variety,
    pub price: f64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchTarget {
    pub id: u64,
    pub varieties: Vec<Variety>,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarietyMatch {
    pub target: u64,
    pub variety: Variety,
    /// `None` when no donor consumes this variety.
    pub donor: Option<u64>,
    pub price: Option<f64>,
}

/// Per-column mean and standard deviation over all rows given.
fn standardizer(rows: &[&[f64]]) -> Result<Vec<(f64, f64)>> {
    let dim = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Pipeline("feature vectors have different lengths".into()));
    }
    let n = rows.len() as f64;
    Ok((0..dim)
        .map(|k| {
            let m = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let sd = (rows.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / n).sqrt();
            (m, if sd > 0.0 { sd } else { 1.0 })
        })
        .collect())
}

/// Assigns each target, for each variety it consumes, the price of the
/// nearest single-variety donor in standardized feature space. Ties go to
/// the lowest donor id.
pub fn nn_match_variety_price(targets: &[MatchTarget], donors: &[MatchDonor]) -> Result<Vec<VarietyMatch>> {
    let rows: Vec<&[f64]> = targets
        .iter()
        .map(|t| t.features.as_slice())
        .chain(donors.iter().map(|d| d.features.as_slice()))
        .collect();
    let scale = standardizer(&rows)?;
    let z = |x: &[f64]| -> Vec<f64> { x.iter().zip(&scale).map(|(v, (m, s))| (v - m) / s).collect() };

    let mut pools: BTreeMap<Variety, Vec<(u64, f64, Vec<f64>)>> = BTreeMap::new();
    for d in donors {
        pools.entry(d.variety).or_default().push((d.id, d.price, z(&d.features)));
    }
    for pool in pools.values_mut() {
        pool.sort_by_key(|d| d.0);
    }

    let mut out = Vec::new();
    for t in targets {
        let zt = z(&t.features);
        for &v in &t.varieties {
            let best = pools.get(&v).and_then(|pool| {
                pool.iter()
                    .map(|(id, price, f)| {
                        let d2: f64 = f.iter().zip(&zt).map(|(a, b)| (a - b).powi(2)).sum();
                        (d2, *id, *price)
                    })
                    // strict comparison keeps the lowest id among ties
                    .fold(None, |best: Option<(f64, u64, f64)>, c| match best {
                        Some(b) if b.0 <= c.0 => Some(b),
                        _ => Some(c),
                    })
            });
            out.push(VarietyMatch {
                target: t.id,
                variety: v,
                donor: best.map(|b| b.1),
                price: best.map(|b| b.2),
            });
        }
    }
    Ok(out)
}

/// Input to price imputation: consumers carry a price, non-consumers do
/// not.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceRecord {
    pub id: u64,
    pub municipality: String,
    pub stratum: String,
    pub price: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationLevel {
    Observed = 0,
    MunicipalityStratum = 1,
    Municipality = 2,
    Stratum = 3,
    Unconditional = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputedPrice {
    pub id: u64,
    pub price: f64,
    pub level: ImputationLevel,
    /// Whether the record's own price entered the donor pool.
    pub donor: bool,
}

pub const TRIM_LOWER: f64 = 0.10;
pub const TRIM_UPPER: f64 = 0.95;

/// Nearest-rank bounds: ranks `ceil(lower n) ..= ceil(upper n)` (1-based)
/// of the sorted prices are kept.
pub fn trim_ranks(n: usize, lower: f64, upper: f64) -> (usize, usize) {
    let lo = ((lower * n as f64).ceil() as usize).max(1);
    let hi = ((upper * n as f64).ceil() as usize).min(n);
    (lo, hi)
}

/// Fills missing prices with donor means by cell, falling back from
/// (municipality, stratum) to municipality, stratum, and the overall mean.
pub fn impute_prices(records: &[PriceRecord]) -> Result<Vec<ImputedPrice>> {
    let mut priced: Vec<(f64, u64)> = records.iter().filter_map(|r| r.price.map(|p| (p, r.id))).collect();
    if priced.iter().any(|(p, _)| !(p.is_finite() && *p > 0.0)) {
        return Err(Error::Pipeline("observed prices must be positive".into()));
    }
    priced.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (lo, hi) = trim_ranks(priced.len(), TRIM_LOWER, TRIM_UPPER);
    let donors: HashMap<u64, f64> = priced
        .iter()
        .enumerate()
        .filter(|(k, _)| (lo..=hi).contains(&(k + 1)))
        .map(|(_, &(p, id))| (id, p))
        .collect();
    if donors.is_empty() {
        return Err(Error::Pipeline("empty donor pool".into()));
    }

    #[derive(Default)]
    struct Acc(f64, usize);
    let mut cell: HashMap<(&str, &str), Acc> = HashMap::new();
    let mut muni: HashMap<&str, Acc> = HashMap::new();
    let mut strat: HashMap<&str, Acc> = HashMap::new();
    let mut all = Acc::default();
    for r in records {
        if let Some(&p) = donors.get(&r.id) {
            for acc in [
                cell.entry((&r.municipality, &r.stratum)).or_default(),
                muni.entry(&r.municipality).or_default(),
                strat.entry(&r.stratum).or_default(),
                &mut all,
            ] {
                acc.0 += p;
                acc.1 += 1;
            }
        }
    }
    let mean = |a: &Acc| a.0 / a.1 as f64;

    Ok(records
        .iter()
        .map(|r| {
            let donor = donors.contains_key(&r.id);
            let (price, level) = match r.price {
                Some(p) => (p, ImputationLevel::Observed),
                None => {
                    if let Some(a) = cell.get(&(r.municipality.as_str(), r.stratum.as_str())) {
                        (mean(a), ImputationLevel::MunicipalityStratum)
                    } else if let Some(a) = muni.get(r.municipality.as_str()) {
                        (mean(a), ImputationLevel::Municipality)
                    } else if let Some(a) = strat.get(r.stratum.as_str()) {
                        (mean(a), ImputationLevel::Stratum)
                    } else {
                        (mean(&all), ImputationLevel::Unconditional)
                    }
                }
            };
            ImputedPrice { id: r.id, price, level, donor }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskLevel {
    Low,
    Medium,
    High,
}

impl RiskLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskLevel::Low => "low",
            RiskLevel::Medium => "medium",
            RiskLevel::High => "high",
        }
    }
}

/// Cutoffs on the mean of the three 1–4 risk answers: below `medium` is
/// low, below `high` is medium, the rest high.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCutoffs {
    pub medium: f64,
    pub high: f64,
}

impl Default for RiskCutoffs {
    fn default() -> Self {
        Self { medium: 2.0, high: 3.0 }
    }
}

pub fn risk_index(rarely: u8, sometimes: u8, frequently: u8) -> Result<RiskLevel> {
    risk_index_with(rarely, sometimes, frequently, RiskCutoffs::default())
}

pub fn risk_index_with(rarely: u8, sometimes: u8, frequently: u8, cut: RiskCutoffs) -> Result<RiskLevel> {
    let answers = [rarely, sometimes, frequently];
    if let Some(bad) = answers.iter().find(|a| !(1..=4).contains(*a)) {
        return Err(Error::DataIntegrity {
            message: format!("risk answers must be 1-4, got {bad}"),
            rows: vec![],
        });
    }
    let m = answers.iter().map(|&a| a as f64).sum::<f64>() / 3.0;
    Ok(if m < cut.medium {
        RiskLevel::Low
    } else if m < cut.high {
        RiskLevel::Medium
    } else {
        RiskLevel::High
    })
}

/// Column names of a raw survey extract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub id: String,
    /// Total units consumed per month (blank or 0 for non-consumers).
    pub quantity: String,
    /// 0/1 flags for the varieties consumed.
    pub regular: String,
    pub corinto: String,
    pub creepy: String,
    pub other: String,
    #[serde(default)]
    pub avg_price: Option<String>,
    #[serde(default)]
    pub expenditure: Option<String>,
    pub municipality: String,
    pub stratum: String,
    /// Observables for the nearest-neighbour distance.
    #[serde(default)]
    pub features: Vec<String>,
    /// Rarely / sometimes / frequently risk answers.
    #[serde(default)]
    pub risk: Option<[String; 3]>,
    #[serde(default)]
    pub risk_cutoffs: RiskCutoffs,
}

impl PipelineConfig {
    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }
}

/// Columns appended by [`run_pipeline`].
pub const AUDIT_COLUMNS: [&str; 12] = [
    "consumer",
    "excluded",
    "exclusion_reason",
    "price",
    "price_source",
    "imputation_level",
    "nn_donor_regular",
    "nn_donor_creepy",
    "quantity_regular",
    "quantity_creepy",
    "quantity_thc",
    "risk",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub rows: usize,
    pub consumers: usize,
    pub excluded: usize,
    pub split_infeasible: Vec<u64>,
    pub unmatchable: Vec<u64>,
    pub imputation_levels: [usize; 5],
}

struct Raw {
    id: u64,
    quantity: f64,
    flags: [bool; 4],
    price: Option<f64>,
    source: &'static str,
    features: Vec<f64>,
}

fn parse_opt(s: &str, what: &str, id: u64) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::DataIntegrity {
        message: format!("{what}: `{s}` is not a number"),
        rows: vec![id],
    })
}

/// Runs the whole construction over a raw table, returning the table with
/// [`AUDIT_COLUMNS`] appended.
pub fn run_pipeline(table: &Table, cfg: &PipelineConfig) -> Result<(Table, PipelineReport)> {
    if let Some(clash) = AUDIT_COLUMNS.iter().find(|c| table.headers.iter().any(|h| h == *c)) {
        return Err(Error::Schema(format!("input already has a `{clash}` column")));
    }
    let col = |name: &str| table.column(name);
    let id_c = col(&cfg.id)?;
    let q_c = col(&cfg.quantity)?;
    let flag_c = [col(&cfg.regular)?, col(&cfg.corinto)?, col(&cfg.creepy)?, col(&cfg.other)?];
    let price_c = cfg.avg_price.as_deref().map(col).transpose()?;
    let exp_c = cfg.expenditure.as_deref().map(col).transpose()?;
    let muni_c = col(&cfg.municipality)?;
    let strat_c = col(&cfg.stratum)?;
    let feat_c: Vec<usize> = cfg.features.iter().map(|f| col(f)).collect::<Result<_>>()?;
    let risk_c = match &cfg.risk {
        Some([a, b, c]) => Some([col(a)?, col(b)?, col(c)?]),
        None => None,
    };

    let mut raws = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let id: u64 = row[id_c].trim().parse().map_err(|_| Error::DataIntegrity {
            message: format!("non-integer id `{}`", row[id_c]),
            rows: vec![],
        })?;
        let quantity = parse_opt(&row[q_c], "quantity", id)?.unwrap_or(0.0);
        if !(quantity >= 0.0) {
            return Err(Error::DataIntegrity { message: "negative quantity".into(), rows: vec![id] });
        }
        let mut flags = [false; 4];
        for (f, &c) in flags.iter_mut().zip(&flag_c) {
            *f = parse_opt(&row[c], "variety flag", id)?.is_some_and(|v| v != 0.0);
        }
        let reported = price_c.map(|c| parse_opt(&row[c], "price", id)).transpose()?.flatten();
        let spent = exp_c.map(|c| parse_opt(&row[c], "expenditure", id)).transpose()?.flatten();
        let (price, source) = if quantity > 0.0 {
            match (reported, spent) {
                (Some(p), _) => (Some(p), "reported"),
                (None, Some(e)) => (Some(e / quantity), "expenditure"),
                (None, None) => {
                    return Err(Error::DataIntegrity {
                        message: "consumer without price or expenditure".into(),
                        rows: vec![id],
                    })
                }
            }
        } else {
            (None, "imputed")
        };
        let features = feat_c
            .iter()
            .map(|&c| parse_opt(&row[c], "feature", id)?.ok_or_else(|| Error::DataIntegrity {
                message: "missing matching feature".into(),
                rows: vec![id],
            }))
            .collect::<Result<_>>()?;
        raws.push(Raw { id, quantity, flags, price, source, features });
    }

    let mut report = PipelineReport { rows: raws.len(), ..Default::default() };
    let consumer = |r: &Raw| r.quantity > 0.0;
    let excluded = |r: &Raw| consumer(r) && r.flags[3];
    let classes = |r: &Raw| {
        let mut v = Vec::new();
        if r.flags[0] || r.flags[1] {
            v.push(Variety::Regular);
        }
        if r.flags[2] {
            v.push(Variety::Creepy);
        }
        v
    };

    // single-variety consumers price their variety directly
    let mut donors = Vec::new();
    let mut targets = Vec::new();
    for r in raws.iter().filter(|r| consumer(r) && !excluded(r)) {
        let c = classes(r);
        match c.len() {
            1 => donors.push(MatchDonor {
                id: r.id,
                variety: c[0],
                price: r.price.expect("consumers are priced"),
                features: r.features.clone(),
            }),
            2 => targets.push(MatchTarget { id: r.id, varieties: c, features: r.features.clone() }),
            _ => {}
        }
    }
    let matches = nn_match_variety_price(&targets, &donors)?;
    let mut matched: HashMap<(u64, Variety), (u64, f64)> = HashMap::new();
    for m in &matches {
        match (m.donor, m.price) {
            (Some(d), Some(p)) => {
                matched.insert((m.target, m.variety), (d, p));
            }
            _ => report.unmatchable.push(m.target),
        }
    }
    report.unmatchable.dedup();

    // prices for non-consumers; excluded consumers neither donate nor receive
    let price_input: Vec<PriceRecord> = raws
        .iter()
        .zip(&table.rows)
        .filter(|(r, _)| !excluded(r))
        .map(|(r, row)| PriceRecord {
            id: r.id,
            municipality: row[muni_c].clone(),
            stratum: row[strat_c].clone(),
            price: r.price,
        })
        .collect();
    let imputed: HashMap<u64, ImputedPrice> = impute_prices(&price_input)?.into_iter().map(|p| (p.id, p)).collect();

    let mut out = Table {
        headers: table.headers.iter().cloned().chain(AUDIT_COLUMNS.iter().map(|s| s.to_string())).collect(),
        rows: Vec::with_capacity(table.rows.len()),
    };
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (r, row) in raws.iter().zip(&table.rows) {
        let is_consumer = consumer(r);
        report.consumers += usize::from(is_consumer);
        let mut reason = String::new();
        let (mut q_reg, mut q_creepy) = (None, None);
        if excluded(r) {
            reason = "other variety".into();
        } else if is_consumer {
            let c = classes(r);
            match c.as_slice() {
                [Variety::Regular] => q_reg = Some(r.quantity),
                [Variety::Creepy] => q_creepy = Some(r.quantity),
                [_, _] => {
                    let reg = matched.get(&(r.id, Variety::Regular));
                    let cre = matched.get(&(r.id, Variety::Creepy));
                    match (reg, cre) {
                        (Some(&(_, pr)), Some(&(_, pc))) => {
                            match split_varieties(r.price.expect("priced"), r.quantity, pr, pc) {
                                Ok((a, b)) => {
                                    q_reg = Some(a);
                                    q_creepy = Some(b);
                                }
                                Err(_) => {
                                    reason = "split infeasible".into();
                                    report.split_infeasible.push(r.id);
                                }
                            }
                        }
                        _ => reason = "no variety donor".into(),
                    }
                }
                _ => reason = "variety not reported".into(),
            }
        }
        let thc = match (q_reg, q_creepy) {
            (None, None) if is_consumer => None,
            (None, None) => Some(0.0),
            (a, b) => Some(
                thc_weight(&VarietyQuantities {
                    regular: a.unwrap_or(0.0),
                    creepy: b.unwrap_or(0.0),
                    ..Default::default()
                })?
                .quantity,
            ),
        };
        let is_excluded = !reason.is_empty();
        report.excluded += usize::from(is_excluded);
        let imp = imputed.get(&r.id);
        if let Some(p) = imp {
            report.imputation_levels[p.level as usize] += 1;
        }
        let risk = match risk_c {
            Some(cols) => {
                let mut a = [0u8; 3];
                for (slot, &c) in a.iter_mut().zip(&cols) {
                    *slot = row[c].trim().parse().map_err(|_| Error::DataIntegrity {
                        message: format!("risk answer `{}` is not an integer", row[c]),
                        rows: vec![r.id],
                    })?;
                }
                risk_index_with(a[0], a[1], a[2], cfg.risk_cutoffs)
                    .map_err(|_| Error::DataIntegrity { message: "risk answer outside 1-4".into(), rows: vec![r.id] })?
                    .as_str()
                    .to_string()
            }
            None => String::new(),
        };
        let donor = |v| matched.get(&(r.id, v)).map(|d| d.0.to_string()).unwrap_or_default();
        let mut new_row = row.clone();
        new_row.extend([
            u8::from(is_consumer).to_string(),
            u8::from(is_excluded).to_string(),
            reason,
            fmt(imp.map(|p| p.price)),
            if imp.is_some() { r.source.to_string() } else { String::new() },
            imp.map(|p| (p.level as u8).to_string()).unwrap_or_default(),
            donor(Variety::Regular),
            donor(Variety::Creepy),
            fmt(q_reg),
            fmt(q_creepy),
            if is_excluded { String::new() } else { fmt(thc) },
            risk,
        ]);
        out.rows.push(new_row);
    }
    Ok((out, report))
}

impl Table {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thc_examples() {
        let w = |regular, creepy, other| {
            thc_weight(&VarietyQuantities { regular, creepy, other, corinto: 0.0 }).unwrap()
        };
        assert_eq!(w(10.0, 0.0, 0.0).quantity, 10.0);
        assert_eq!(w(0.0, 5.0, 0.0).quantity, 20.0);
        assert!(w(0.0, 0.0, 3.0).excluded);
        assert!(!w(1.0, 1.0, 0.0).excluded);
        let q = VarietyQuantities { corinto: 2.5, ..Default::default() };
        assert_eq!(thc_weight(&q).unwrap().quantity, 2.5);
        let bad = VarietyQuantities { creepy: -1.0, ..Default::default() };
        assert!(thc_weight(&bad).is_err());
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_varieties(5.0, 10.0, 5.0, 7.0).unwrap(), (10.0, 0.0));
        let (a, b) = split_varieties(6.0, 10.0, 5.0, 7.0).unwrap();
        assert!((a - 5.0).abs() < 1e-12 && (b - 5.0).abs() < 1e-12);
        let (a, b) = split_varieties(6.5, 8.0, 5.0, 7.0).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 6.0).abs() < 1e-12);
        assert!(split_varieties(8.0, 8.0, 5.0, 7.0).is_err());
        assert!(split_varieties(5.0, 8.0, 5.0, 5.0).is_err());
    }

    #[test]
    fn trim_boundaries() {
        assert_eq!(trim_ranks(100, 0.10, 0.95), (10, 95));
        assert_eq!(trim_ranks(1, 0.10, 0.95), (1, 1));
        assert_eq!(trim_ranks(7, 0.10, 0.95), (1, 7));
    }

    fn pr(id: u64, m: &str, s: &str, p: Option<f64>) -> PriceRecord {
        PriceRecord { id, municipality: m.into(), stratum: s.into(), price: p }
    }

    #[test]
    fn imputation_fallbacks() {
        let recs = vec![
            pr(1, "A", "1", Some(4.0)),
            pr(2, "A", "1", Some(6.0)),
            pr(3, "B", "2", Some(8.0)),
            pr(10, "A", "1", None),
            pr(11, "C", "2", None),
            pr(12, "A", "9", None),
            pr(13, "Z", "9", None),
        ];
        let out = impute_prices(&recs).unwrap();
        let get = |id| *out.iter().find(|p| p.id == id).unwrap();
        assert_eq!((get(10).price, get(10).level), (5.0, ImputationLevel::MunicipalityStratum));
        assert_eq!((get(11).price, get(11).level), (8.0, ImputationLevel::Stratum));
        assert_eq!((get(12).price, get(12).level), (5.0, ImputationLevel::Municipality));
        assert_eq!((get(13).price, get(13).level), (6.0, ImputationLevel::Unconditional));
        assert_eq!(get(1).level, ImputationLevel::Observed);
        assert!(impute_prices(&[pr(1, "A", "1", None)]).is_err());
    }

    #[test]
    fn trimming_excludes_extreme_ranks() {
        let mut recs: Vec<_> = (1..=100).map(|k| pr(k, "A", "1", Some(k as f64))).collect();
        recs.push(pr(1000, "A", "1", None));
        let out = impute_prices(&recs).unwrap();
        let donors: Vec<u64> = out.iter().filter(|p| p.donor).map(|p| p.id).collect();
        assert_eq!(donors, (10..=95).collect::<Vec<_>>());
        let imputed = out.last().unwrap().price;
        assert_eq!(imputed, (10..=95).sum::<u64>() as f64 / 86.0);
    }

    #[test]
    fn nearest_neighbour_rules() {
        let donor = |id, v, price, f: Vec<f64>| MatchDonor { id, variety: v, price, features: f };
        let t = MatchTarget { id: 1, varieties: vec![Variety::Regular, Variety::Creepy], features: vec![0.0, 0.0] };
        let donors = vec![
            donor(5, Variety::Regular, 100.0, vec![1.0, 0.0]),
            donor(4, Variety::Regular, 200.0, vec![-1.0, 0.0]),
            donor(7, Variety::Regular, 300.0, vec![2.0, 0.0]),
            donor(9, Variety::Creepy, 900.0, vec![50.0, 50.0]),
        ];
        let m = nn_match_variety_price(std::slice::from_ref(&t), &donors).unwrap();
        // 4 and 5 tie; lowest id wins
        assert_eq!((m[0].donor, m[0].price), (Some(4), Some(200.0)));
        // single donor regardless of distance
        assert_eq!((m[1].donor, m[1].price), (Some(9), Some(900.0)));
        let none = nn_match_variety_price(std::slice::from_ref(&t), &donors[..3]).unwrap();
        assert_eq!(none[1].donor, None);
    }

    #[test]
    fn standardization_makes_matching_scale_free() {
        let donor = |id, f: Vec<f64>| MatchDonor { id, variety: Variety::Regular, price: id as f64, features: f };
        let target = |f: Vec<f64>| MatchTarget { id: 0, varieties: vec![Variety::Regular], features: f };
        // feature 0 has a much wider raw spread than feature 1
        let donors = vec![donor(1, vec![30.0, 0.0]), donor(2, vec![0.0, 2.0]), donor(3, vec![-30.0, -2.0])];
        let t = target(vec![16.0, 2.0]);
        let base = nn_match_variety_price(std::slice::from_ref(&t), &donors).unwrap()[0].donor;

        let scale = |v: &[f64]| vec![v[0], v[1] * 10.0];
        let scaled_donors: Vec<_> = donors.iter().map(|d| donor(d.id, scale(&d.features))).collect();
        let scaled = nn_match_variety_price(&[target(scale(&t.features))], &scaled_donors).unwrap()[0].donor;
        assert_eq!(base, scaled);

        // raw Euclidean distances do change with the rescaling
        let raw_nearest = |ds: &[MatchDonor], x: &[f64]| {
            ds.iter()
                .min_by(|a, b| {
                    let d = |m: &MatchDonor| m.features.iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap()
                .id
        };
        assert_ne!(raw_nearest(&donors, &t.features), raw_nearest(&scaled_donors, &scale(&t.features)));
    }

    #[test]
    fn risk_cutoffs() {
        assert_eq!(risk_index(1, 1, 1).unwrap(), RiskLevel::Low);
        assert_eq!(risk_index(4, 4, 4).unwrap(), RiskLevel::High);
        assert_eq!(risk_index(2, 3, 3).unwrap(), RiskLevel::Medium);
        assert_eq!(risk_index(2, 2, 2).unwrap(), RiskLevel::Medium);
        assert_eq!(risk_index(1, 2, 2).unwrap(), RiskLevel::Low);
        assert_eq!(risk_index(3, 3, 3).unwrap(), RiskLevel::High);
        assert!(risk_index(0, 1, 1).is_err());
        assert!(risk_index(1, 5, 1).is_err());
    }

    #[test]
    fn pipeline_over_a_table() {
        let csv = "\
id,q,reg,cor,cre,oth,avg,spend,muni,strat,age,risk1,risk2,risk3
1,10,1,0,0,0,5,,A,1,20,1,1,1
2,4,0,0,1,0,,28,A,1,22,4,4,4
3,8,1,0,1,0,6.5,,A,1,21,2,3,3
4,,0,0,0,0,,,A,1,40,2,2,2
5,3,0,0,0,1,9,,A,1,30,1,2,1
6,0,0,0,0,0,,,B,2,50,3,3,4
";
        let table = Table::from_reader(csv.as_bytes()).unwrap();
        let cfg = PipelineConfig {
            id: "id".into(),
            quantity: "q".into(),
            regular: "reg".into(),
            corinto: "cor".into(),
            creepy: "cre".into(),
            other: "oth".into(),
            avg_price: Some("avg".into()),
            expenditure: Some("spend".into()),
            municipality: "muni".into(),
            stratum: "strat".into(),
            features: vec!["age".into()],
            risk: Some(["risk1".into(), "risk2".into(), "risk3".into()]),
            risk_cutoffs: RiskCutoffs::default(),
        };
        let (out, report) = run_pipeline(&table, &cfg).unwrap();
        let get = |row: usize, name: &str| out.rows[row][out.column(name).unwrap()].clone();
        assert_eq!(get(0, "quantity_thc"), "10");
        // price from expenditure: 28 / 4 = 7; quantity 4 creepy -> 16
        assert_eq!(get(1, "price"), "7");
        assert_eq!(get(1, "price_source"), "expenditure");
        assert_eq!(get(1, "quantity_thc"), "16");
        // mixed consumer: regular donor 1 (5), creepy donor 2 (7), avg 6.5 over 8 -> (2, 6)
        assert_eq!(get(2, "nn_donor_regular"), "1");
        assert_eq!(get(2, "nn_donor_creepy"), "2");
        assert_eq!(get(2, "quantity_regular"), "2");
        assert_eq!(get(2, "quantity_creepy"), "6");
        assert_eq!(get(2, "quantity_thc"), "26");
        assert_eq!(get(3, "imputation_level"), "1");
        assert_eq!(get(3, "quantity_thc"), "0");
        assert_eq!(get(4, "excluded"), "1");
        assert_eq!(get(4, "price"), "");
        assert_eq!(get(5, "imputation_level"), "4");
        assert_eq!(get(5, "risk"), "high");
        assert_eq!(get(3, "risk"), "medium");
        assert_eq!(report.consumers, 4);
        assert_eq!(report.excluded, 1);
        assert_eq!(report.imputation_levels, [3, 1, 0, 0, 1]);
    }
}
