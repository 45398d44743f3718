use std::io::Write;

use crate::error::Result;
use crate::grid::ProbabilityMatrix;

/// Radial and per-axis summaries of a DC-centered probability matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityProfile {
    /// Mean probability in unit-width rings around DC; `None` for empty rings.
    pub radial: Vec<Option<f64>>,
    /// Mean over each row.
    pub rows: Vec<f64>,
    /// Mean over each column.
    pub cols: Vec<f64>,
}

pub fn export_probability_profile(p: &ProbabilityMatrix) -> ProbabilityProfile {
    let (m, n) = p.dim();
    let probs = p.probs();
    let bins = ((m as f64).hypot(n as f64) / 2.0).ceil().max(1.0) as usize;
    let (ci, cj) = ((m / 2) as f64, (n / 2) as f64);
    let mut sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for ((i, j), &v) in probs.indexed_iter() {
        let r = (i as f64 - ci).hypot(j as f64 - cj);
        let b = (r.floor() as usize).min(bins - 1);
        sum[b] += v;
        count[b] += 1;
    }
    let radial = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let rows = probs.rows().into_iter().map(|r| r.sum() / n as f64).collect();
    let cols = probs.columns().into_iter().map(|c| c.sum() / m as f64).collect();
    ProbabilityProfile { radial, rows, cols }
}

impl ProbabilityProfile {
    /// `kind,index,value` lines for kinds `radial`, `row` and `col`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "kind,index,value")?;
        for (k, v) in self.radial.iter().enumerate() {
            match v {
                Some(x) => writeln!(w, "radial,{k},{x}")?,
                None => writeln!(w, "radial,{k},")?,
            }
        }
        for (k, v) in self.rows.iter().enumerate() {
            writeln!(w, "row,{k},{v}")?;
        }
        for (k, v) in self.cols.iter().enumerate() {
            writeln!(w, "col,{k},{v}")?;
        }
        Ok(())
    }
}
