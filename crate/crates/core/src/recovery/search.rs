use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of grid points in the coarse edge-count scan.
pub const GRID_POINTS: usize = 20;
pub const GRID_MIN_FRACTION: f64 = 0.05;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Edge counts from 5% to 100% of `total`, evenly spaced, deduplicated.
pub fn edge_grid(total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..GRID_POINTS)
        .map(|i| {
            let f = GRID_MIN_FRACTION + (1.0 - GRID_MIN_FRACTION) * i as f64 / (GRID_POINTS - 1) as f64;
            ((f * total as f64).round() as usize).clamp(1, total.max(1))
        })
        .collect();
    out.dedup();
    out
}

/// Objective value per evaluated edge count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeCurve {
    pub points: BTreeMap<usize, f64>,
}

impl EdgeCurve {
    /// Best point; ties go to the smaller count.
    pub fn argmax(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (&n, &v) in &self.points {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((n, v));
            }
        }
        best
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "M"]).map_err(csv_err)?;
        for (n, m) in &self.points {
            wr.write_record([n.to_string(), m.to_string()]).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

/// Memoizing wrapper around an objective over integer edge counts.
pub struct Memo<'a> {
    f: Box<dyn FnMut(usize) -> Result<f64> + 'a>,
    pub curve: EdgeCurve,
    pub calls: usize,
}

impl<'a> Memo<'a> {
    pub fn new(f: impl FnMut(usize) -> Result<f64> + 'a) -> Self {
        Memo {
            f: Box::new(f),
            curve: EdgeCurve::default(),
            calls: 0,
        }
    }

    pub fn eval(&mut self, n: usize) -> Result<f64> {
        if let Some(&v) = self.curve.points.get(&n) {
            return Ok(v);
        }
        let v = (self.f)(n)?;
        self.calls += 1;
        self.curve.points.insert(n, v);
        Ok(v)
    }
}

/// Integer golden-section search for the maximum on `[lo, hi]`, exhaustive
/// once the bracket is three wide or less. Returns the best point evaluated
/// anywhere through `memo` (ties to the smaller count).
pub fn golden_section(memo: &mut Memo, lo: usize, hi: usize) -> Result<(usize, f64)> {
    if lo > hi {
        return Err(Error::Input(format!("empty bracket [{lo}, {hi}]")));
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > 3 {
        let step = ((b - a) as f64 * INV_PHI).round() as usize;
        let c = (b - step).clamp(a + 1, b - 2);
        let d = (a + step).clamp(c + 1, b - 1);
        if memo.eval(c)? >= memo.eval(d)? {
            b = d;
        } else {
            a = c;
        }
    }
    for n in a..=b {
        memo.eval(n)?;
    }
    Ok(memo.curve.argmax().expect("bracket evaluated"))
}

/// Coarse grid, then golden section over the grid neighbours of the best
/// grid point.
pub fn two_stage_search(memo: &mut Memo, total: usize) -> Result<(usize, f64)> {
    if total == 0 {
        return Err(Error::Circuit("graph has no edges".into()));
    }
    let grid = edge_grid(total);
    for &n in &grid {
        memo.eval(n)?;
    }
    let (best, _) = memo.curve.argmax().expect("grid evaluated");
    let i = grid.iter().position(|&n| n == best).expect("best is a grid point");
    let lo = if i == 0 { 1 } else { grid[i - 1] };
    let hi = grid.get(i + 1).copied().unwrap_or(total);
    golden_section(memo, lo, hi)
}
