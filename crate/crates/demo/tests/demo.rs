use serde_json::Value;
use threepart_demo::{histogram_json, Fit};

#[test]
fn histogram_matches_the_truncated_density() {
    let v: Value = serde_json::from_str(&histogram_json(0.0, 1.0, 0.0, f64::INFINITY, 20000, 20, 3).unwrap()).unwrap();
    let counts: Vec<f64> = v["counts"].as_array().unwrap().iter().map(|c| c.as_f64().unwrap()).collect();
    let expected: Vec<f64> = v["expected"].as_array().unwrap().iter().map(|c| c.as_f64().unwrap()).collect();
    assert_eq!(counts.iter().sum::<f64>(), 20000.0);
    let chi2: f64 = counts.iter().zip(&expected).filter(|(_, e)| **e > 5.0).map(|(o, e)| (o - e).powi(2) / e).sum();
    // 99.9% point of chi-square with 19 df is 43.8
    assert!(chi2 < 43.8, "chi2 {chi2}");
    assert!((v["exact_mean"].as_f64().unwrap() - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
}

#[test]
fn histogram_rejects_bad_intervals() {
    assert!(histogram_json(0.0, 1.0, 2.0, 1.0, 10, 5, 1).is_err());
    assert!(histogram_json(0.0, 1.0, 0.0, 1.0, 0, 5, 1).is_err());
}

#[test]
fn fit_then_curve() {
    let fit = Fit::run(800, 1200, 200, [0.5, 0.3, 0.5], 4).unwrap();
    let s: Value = serde_json::from_str(&fit.summary()).unwrap();
    let params = s["parameters"].as_array().unwrap();
    assert_eq!(params.len(), 12);
    for p in &params[..9] {
        let (t, m, sd) = (p["truth"].as_f64().unwrap(), p["mean"].as_f64().unwrap(), p["sd"].as_f64().unwrap());
        assert!((m - t).abs() < 4.0 * sd, "{p}");
    }

    let xs = [-1.0, 0.0, 1.0];
    let observed: Value = serde_json::from_str(&fit.curve(1, &xs, false, 200, 9).unwrap()).unwrap();
    let legal: Value = serde_json::from_str(&fit.curve(1, &xs, true, 200, 9).unwrap()).unwrap();
    for (o, l) in observed.as_array().unwrap().iter().zip(legal.as_array().unwrap()) {
        let p = |v: &Value, k: &str| v[k]["mean"].as_f64().unwrap();
        assert!(p(o, "p_use") <= p(o, "p_use_given_access") + 1e-12);
        assert_eq!(p(l, "p_access"), 1.0);
        assert!(p(o, "consumption") > 0.0);
    }
    assert!(fit.curve(0, &xs, false, 10, 1).is_err());
}
