//! Power-law fits of loss against dataset size.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub n: f64,
    pub loss: f64,
    pub epoch: usize,
}

/// `loss = a * n^b`, fitted in log-log space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
    pub n_points: usize,
}

/// Lowest loss per dataset size. Ties go to the earliest epoch.
pub fn select_points(traces: &[(f64, Vec<f64>)]) -> Result<Vec<ScalePoint>> {
    traces
        .iter()
        .map(|(n, trace)| {
            if !(*n > 0.0) {
                return Err(Error::Validation(format!("dataset size must be positive, got {n}")));
            }
            let (epoch, &loss) = trace
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, &f64)>, (i, l)| match best {
                    Some((_, b)) if *b <= *l => best,
                    _ => Some((i, l)),
                })
                .ok_or_else(|| Error::InsufficientData(format!("empty loss trace for n = {n}")))?;
            if !(loss > 0.0) {
                return Err(Error::Validation(format!("loss must be positive, got {loss} at n = {n}")));
            }
            Ok(ScalePoint { n: *n, loss, epoch })
        })
        .collect()
}

/// Least-squares line through `(ln n, ln loss)`. With `first_k`, only the
/// `k` smallest sizes are used.
pub fn fit_power_law(points: &[ScalePoint], first_k: Option<usize>) -> Result<PowerLawFit> {
    let mut pts = points.to_vec();
    if let Some(p) = pts.iter().find(|p| !(p.n > 0.0) || !(p.loss > 0.0)) {
        return Err(Error::Validation(format!("point n = {}, loss = {} is not positive", p.n, p.loss)));
    }
    pts.sort_by(|a, b| a.n.total_cmp(&b.n));
    if let Some(k) = first_k {
        pts.truncate(k);
    }
    if pts.len() < 2 {
        return Err(Error::InsufficientData(format!("power-law fit needs >= 2 points, got {}", pts.len())));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.n.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.loss.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all points share one dataset size".into()));
    }
    let b = sxy / sxx;
    let c = my - b * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - (c + b * x)).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok(PowerLawFit { a: c.exp(), b, r2, n_points: pts.len() })
}

pub fn predict(fit: &PowerLawFit, n: f64) -> f64 {
    fit.a * n.powf(fit.b)
}

/// `(observed - predicted) / predicted`; positive when the point sits above
/// the curve.
pub fn relative_residual(fit: &PowerLawFit, p: &ScalePoint) -> f64 {
    let pred = predict(fit, p.n);
    (p.loss - pred) / pred
}

/// Reads `size,epoch,test_loss` rows (header required) into per-size traces
/// ordered by size. Epochs within a size are sorted.
pub fn read_traces_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, Vec<f64>)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_traces_csv(&text)
}

#[derive(Deserialize)]
struct TraceRow {
    size: f64,
    epoch: usize,
    test_loss: f64,
}

pub fn parse_traces_csv(text: &str) -> Result<Vec<(f64, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Format(format!("traces CSV: {e}")))?;
    if let Some(missing) = ["size", "epoch", "test_loss"].into_iter().find(|c| !headers.iter().any(|h| h == *c)) {
        return Err(Error::Format(format!("traces CSV lacks a `{missing}` column")));
    }
    let mut by_size: BTreeMap<u64, Vec<(usize, f64)>> = BTreeMap::new();
    for row in reader.deserialize::<TraceRow>() {
        let row = row.map_err(|e| Error::Format(format!("traces CSV: {e}")))?;
        by_size.entry(row.size.to_bits()).or_default().push((row.epoch, row.test_loss));
    }
    let mut out: Vec<(f64, Vec<f64>)> = by_size
        .into_iter()
        .map(|(bits, mut rows)| {
            rows.sort_by_key(|r| r.0);
            (f64::from_bits(bits), rows.into_iter().map(|r| r.1).collect())
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(f: impl Fn(f64) -> f64, ns: &[f64]) -> Vec<ScalePoint> {
        ns.iter().map(|&n| ScalePoint { n, loss: f(n), epoch: 0 }).collect()
    }

    #[test]
    fn exact_curve_recovered() {
        let p = pts(|n| 2.0 * n.powf(-0.1), &[1e3, 1e4, 1e5, 1e6, 1e7]);
        let f = fit_power_law(&p, None).unwrap();
        assert!((f.a - 2.0).abs() < 1e-9 && (f.b + 0.1).abs() < 1e-9 && (f.r2 - 1.0).abs() < 1e-9);
        assert!((predict(&f, 1.0) - 2.0).abs() < 1e-9);
        let n1 = f.a.powf(-1.0 / f.b);
        assert!((predict(&f, n1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_points_interpolate() {
        let p = vec![ScalePoint { n: 10.0, loss: 3.0, epoch: 0 }, ScalePoint { n: 100.0, loss: 1.0, epoch: 0 }];
        let f = fit_power_law(&p, None).unwrap();
        assert_eq!(f.r2, 1.0);
        assert!((predict(&f, 100.0) - 1.0).abs() < 1e-12);
        assert!(matches!(fit_power_law(&p[..1], None), Err(Error::InsufficientData(_))));
        assert!(matches!(fit_power_law(&p, Some(1)), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn selection_rules() {
        let t = vec![(1.0, vec![3.0, 2.0, 1.0]), (2.0, vec![3.0, 1.0, 2.0]), (3.0, vec![2.0, 1.0, 1.0])];
        let p = select_points(&t).unwrap();
        assert_eq!(p.iter().map(|p| p.epoch).collect::<Vec<_>>(), [2, 1, 1]);
    }

    #[test]
    fn csv_parse() {
        let t = parse_traces_csv("size,epoch,test_loss\n100,1,0.5\n100,0,0.7\n10,0,0.9\n").unwrap();
        assert_eq!(t, vec![(10.0, vec![0.9]), (100.0, vec![0.7, 0.5])]);
        assert!(parse_traces_csv("n,loss\n").is_err());
    }

    #[test]
    fn residual_sign() {
        let f = PowerLawFit { a: 2.0, b: -0.1, r2: 1.0, n_points: 2 };
        assert!(relative_residual(&f, &ScalePoint { n: 1.0, loss: 2.2, epoch: 0 }) > 0.0);
    }
}
