//! MAE and PSNR over the covered voxels of an estimate.

use std::fmt::Write as _;

use thiserror::Error;

use crate::volume::{CoverageMask, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dims differ: estimate {estimate:?}, truth {truth:?}, mask {mask:?}")]
    DimMismatch { estimate: [usize; 3], truth: [usize; 3], mask: [usize; 3] },
    #[error("coverage mask selects no voxels")]
    EmptyMask,
    #[error("ground truth is constant over the mask, PSNR peak is zero")]
    DegenerateTruth,
    #[error("cannot aggregate an empty list of reports")]
    Empty,
    #[error("malformed report CSV, line {line}: {message}")]
    Csv { line: usize, message: String },
}

/// How the PSNR peak is defined; printed with every report.
pub const PSNR_PEAK_NOTE: &str = "PSNR peak R = max - min of the ground truth over the covered voxels";

fn masked<'a>(
    estimate: &'a Volume,
    truth: &'a Volume,
    mask: &'a CoverageMask,
) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a, MetricsError> {
    if estimate.dims() != truth.dims() || mask.dims() != truth.dims() {
        return Err(MetricsError::DimMismatch { estimate: estimate.dims(), truth: truth.dims(), mask: mask.dims() });
    }
    if mask.count() == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(estimate
        .voxels()
        .iter()
        .zip(truth.voxels())
        .zip(mask.as_slice())
        .filter(|(_, &m)| m)
        .map(|((&e, &t), _)| (e as f64, t as f64)))
}

/// Mean absolute error over covered voxels.
pub fn mae(estimate: &Volume, truth: &Volume, mask: &CoverageMask) -> Result<f64, MetricsError> {
    let it = masked(estimate, truth, mask)?;
    Ok(it.map(|(e, t)| (e - t).abs()).sum::<f64>() / mask.count() as f64)
}

pub fn mse(estimate: &Volume, truth: &Volume, mask: &CoverageMask) -> Result<f64, MetricsError> {
    let it = masked(estimate, truth, mask)?;
    Ok(it.map(|(e, t)| (e - t) * (e - t)).sum::<f64>() / mask.count() as f64)
}

/// Dynamic range of the truth over covered voxels.
pub fn peak_range(truth: &Volume, mask: &CoverageMask) -> Result<f64, MetricsError> {
    let it = masked(truth, truth, mask)?;
    let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (t, _)| (lo.min(t), hi.max(t)));
    Ok(hi - lo)
}

/// `10 log10(R² / MSE)`; `+inf` when the volumes agree on every covered voxel.
pub fn psnr(estimate: &Volume, truth: &Volume, mask: &CoverageMask) -> Result<f64, MetricsError> {
    let r = peak_range(truth, mask)?;
    if r == 0.0 {
        return Err(MetricsError::DegenerateTruth);
    }
    let m = mse(estimate, truth, mask)?;
    Ok(psnr_from(r, m))
}

pub fn psnr_from(peak: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Per-subject evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub subject: String,
    pub mae: f64,
    pub psnr: f64,
    pub covered_voxel_count: usize,
    pub peak: f64,
}

pub fn evaluate(subject: &str, estimate: &Volume, truth: &Volume, mask: &CoverageMask) -> Result<EvalRow, MetricsError> {
    let peak = peak_range(truth, mask)?;
    Ok(EvalRow {
        subject: subject.into(),
        mae: mae(estimate, truth, mask)?,
        psnr: psnr(estimate, truth, mask)?,
        covered_voxel_count: mask.count(),
        peak,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub median: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Ok(Self { mean, std, median })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mae: Stats,
    pub psnr: Stats,
}

pub fn aggregate(rows: &[EvalRow]) -> Result<Summary, MetricsError> {
    let col = |f: fn(&EvalRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(Summary { mae: Stats::of(&col(|r| r.mae))?, psnr: Stats::of(&col(|r| r.psnr))? })
}

/// Per-subject rows with their summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Summary,
}

const CSV_HEADER: &str = "subject,mae,psnr,covered_voxel_count,peak";
const SUMMARY_TAGS: [&str; 3] = ["@mean", "@std", "@median"];

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>) -> Result<Self, MetricsError> {
        let summary = aggregate(&rows)?;
        Ok(Self { rows, summary })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# {PSNR_PEAK_NOTE}\n{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.subject, r.mae, r.psnr, r.covered_voxel_count, r.peak);
        }
        let (m, p) = (self.summary.mae, self.summary.psnr);
        for (tag, (a, b)) in SUMMARY_TAGS.iter().zip([(m.mean, p.mean), (m.std, p.std), (m.median, p.median)]) {
            let _ = writeln!(s, "{tag},{a},{b},,");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let err = |line: usize, message: &str| MetricsError::Csv { line, message: message.into() };
        let mut rows = Vec::new();
        let mut summary = [[f64::NAN; 2]; 3];
        let mut seen = [false; 3];
        let mut header = false;
        for (i, line) in text.lines().enumerate() {
            let no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header {
                if line != CSV_HEADER {
                    return Err(err(no, "unexpected header"));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(no, "expected 5 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err(no, "bad number"));
            if let Some(k) = SUMMARY_TAGS.iter().position(|t| *t == f[0]) {
                summary[k] = [num(f[1])?, num(f[2])?];
                seen[k] = true;
            } else {
                rows.push(EvalRow {
                    subject: f[0].into(),
                    mae: num(f[1])?,
                    psnr: num(f[2])?,
                    covered_voxel_count: f[3].parse().map_err(|_| err(no, "bad voxel count"))?,
                    peak: num(f[4])?,
                });
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(err(0, "missing summary rows"));
        }
        let stats = |j: usize| Stats { mean: summary[0][j], std: summary[1][j], median: summary[2][j] };
        if rows.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(Self { rows, summary: Summary { mae: stats(0), psnr: stats(1) } })
    }

    /// Human-readable table in the `Mean(std.) & Med.` layout.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>12} {:>12}\n", "subject", "MAE", "PSNR");
        for r in &self.rows {
            let _ = writeln!(s, "{:<12} {:>12.4} {:>12.4}", r.subject, r.mae, r.psnr);
        }
        let cell = |st: Stats| format!("{:.2}({:.2}) & {:.2}", st.mean, st.std, st.median);
        let _ = writeln!(s, "\n{:<12} {:>24}", "", "Mean(std.) & Med.");
        let _ = writeln!(s, "{:<12} {:>24}", "MAE", cell(self.summary.mae));
        let _ = writeln!(s, "{:<12} {:>24}", "PSNR", cell(self.summary.psnr));
        let _ = writeln!(s, "\n{PSNR_PEAK_NOTE}");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(v: Vec<f32>) -> Volume {
        Volume::new([v.len(), 1, 1], [1.0; 3], v).unwrap()
    }

    #[test]
    fn identical_then_offset() {
        let t = vol(vec![0.0, 1.0, 4.0, 10.0]);
        let m = CoverageMask::full(t.dims());
        assert_eq!(mae(&t, &t, &m).unwrap(), 0.0);
        assert_eq!(psnr(&t, &t, &m).unwrap(), f64::INFINITY);
        let e = t.map(|v| v + 5.0).unwrap();
        assert_eq!(mae(&e, &t, &m).unwrap(), 5.0);
        // offset of R/2 everywhere
        let e = t.map(|v| v + 5.0).unwrap();
        assert!((psnr(&e, &t, &m).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn mask_restricts_and_errors() {
        let t = vol(vec![0.0, 2.0, 7.0]);
        let e = vol(vec![1.0, 2.0, 100.0]);
        let m = CoverageMask::new(t.dims(), vec![true, true, false]).unwrap();
        assert_eq!(mae(&e, &t, &m).unwrap(), 0.5);
        assert_eq!(peak_range(&t, &m).unwrap(), 2.0);
        let none = CoverageMask::new(t.dims(), vec![false; 3]).unwrap();
        assert_eq!(mae(&e, &t, &none), Err(MetricsError::EmptyMask));
        let flat = vol(vec![3.0; 3]);
        assert_eq!(psnr(&e, &flat, &CoverageMask::full(flat.dims())), Err(MetricsError::DegenerateTruth));
        let other = vol(vec![0.0; 4]);
        assert!(matches!(mae(&other, &t, &m), Err(MetricsError::DimMismatch { .. })));
    }

    #[test]
    fn halving_mse_adds_log2() {
        let d = psnr_from(3.0, 0.5) - psnr_from(3.0, 1.0);
        assert!((d - 10.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn stats_examples() {
        let s = Stats::of(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.std, s.median), (2.0, 1.0, 2.0));
        let s = Stats::of(&[4.5]).unwrap();
        assert_eq!((s.mean, s.std, s.median), (4.5, 0.0, 4.5));
        assert_eq!(Stats::of(&[]), Err(MetricsError::Empty));
        assert_eq!(Stats::of(&[1.0, 4.0]).unwrap().median, 2.5);
    }

    #[test]
    fn csv_round_trip_and_table() {
        let rows = vec![
            EvalRow { subject: "subj_3".into(), mae: 92.5, psnr: 27.6, covered_voxel_count: 4096, peak: 2500.0 },
            EvalRow { subject: "subj_4".into(), mae: 1.0 / 3.0, psnr: 31.25, covered_voxel_count: 8, peak: 1.5 },
        ];
        let r = EvalReport::new(rows).unwrap();
        assert_eq!(EvalReport::from_csv(&r.to_csv()).unwrap(), r);
        let t = r.table();
        assert!(t.contains("Mean(std.) & Med."));
        assert!(t.contains("PSNR peak"));
        assert!(EvalReport::from_csv("x,y\n").is_err());
    }
}
