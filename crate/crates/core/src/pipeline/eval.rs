//! Evaluation of masks (and optionally trained networks) on a dataset, and
//! method-by-rate comparison tables.

use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fourier::CenterShift;
use crate::grid::{ensure_shape, SamplingMask};
use crate::recnet::{recnet_forward, RecNetParams};

use super::metrics::{format_psnr, psnr, zero_filled};

/// Mean of per-item PSNR values; any exact match makes the mean infinite.
/// Returns NaN for an empty slice.
pub fn mean_psnr(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub realized_rate: f64,
    pub psnr_u: Vec<f64>,
    pub mean_psnr_u: f64,
    pub psnr_rec: Option<Vec<f64>>,
    pub mean_psnr_rec: Option<f64>,
    pub runtime_secs: f64,
}

impl EvalReport {
    /// Per-item CSV followed by a `mean` row.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "item,psnr_u,psnr_rec")?;
        for (k, pu) in self.psnr_u.iter().enumerate() {
            let pr = self
                .psnr_rec
                .as_ref()
                .map(|v| format_psnr(v[k]))
                .unwrap_or_default();
            writeln!(w, "{k},{},{pr}", format_psnr(*pu))?;
        }
        let mr = self.mean_psnr_rec.map(format_psnr).unwrap_or_default();
        writeln!(w, "mean,{},{mr}", format_psnr(self.mean_psnr_u))?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: rate {:.4} psnr_u {}",
            self.method,
            self.realized_rate,
            format_psnr(self.mean_psnr_u)
        );
        if let Some(r) = self.mean_psnr_rec {
            let _ = write!(s, " psnr_rec {}", format_psnr(r));
        }
        s
    }
}

/// Undersampling PSNR of every item under a DC-centered mask, plus
/// reconstruction PSNR when `params` is given. Items are processed in
/// parallel; results keep dataset order.
pub fn evaluate(
    dataset: &Dataset,
    mask: &SamplingMask,
    params: Option<&RecNetParams>,
    method: &str,
) -> Result<EvalReport> {
    let start = Instant::now();
    if let Some(dim) = dataset.dim() {
        ensure_shape(dim, mask.dim())?;
    }
    let mask_u = mask.unshifted();
    let per_item: Vec<Result<(f64, Option<f64>)>> = dataset
        .items()
        .par_iter()
        .map(|item| {
            let x_u = zero_filled(&item.kspace, &mask_u)?;
            let pu = psnr(&x_u, &item.image, 1.0)?;
            let pr = match params {
                Some(p) => {
                    let (x_rec, _) = recnet_forward(&x_u, p)?;
                    Some(psnr(&x_rec, &item.image, 1.0)?)
                }
                None => None,
            };
            Ok((pu, pr))
        })
        .collect();
    let mut psnr_u = Vec::with_capacity(per_item.len());
    let mut psnr_rec = Vec::with_capacity(per_item.len());
    for r in per_item {
        let (pu, pr) = r?;
        psnr_u.push(pu);
        if let Some(v) = pr {
            psnr_rec.push(v);
        }
    }
    let psnr_rec = params.map(|_| psnr_rec);
    Ok(EvalReport {
        method: method.to_string(),
        realized_rate: mask.rate(),
        mean_psnr_u: mean_psnr(&psnr_u),
        mean_psnr_rec: psnr_rec.as_deref().map(mean_psnr),
        psnr_u,
        psnr_rec,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// [`evaluate`] on a dedicated pool of `threads` workers.
pub fn evaluate_with_threads(
    dataset: &Dataset,
    mask: &SamplingMask,
    params: Option<&RecNetParams>,
    method: &str,
    threads: usize,
) -> Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::param(format!("thread pool: {e}")))?;
    pool.install(|| evaluate(dataset, mask, params, method))
}

/// Mask and, if trained, network for one (method, rate) cell.
#[derive(Debug, Clone)]
pub struct MethodArtifact {
    pub mask: SamplingMask,
    pub params: Option<RecNetParams>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonCell {
    pub psnr_u: f64,
    pub psnr_rec: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub rate: f64,
    /// One entry per method; `None` when the artifact was missing.
    pub cells: Vec<Option<ComparisonCell>>,
}

/// Rates as rows, one `psnr_u`/`psnr_rec` column pair per method.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub methods: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::format("<comparison csv>", format!("bad number `{s}`")))
}

impl ComparisonTable {
    pub fn cell(&self, method: &str, rate: f64) -> Option<ComparisonCell> {
        let col = self.methods.iter().position(|m| m == method)?;
        let row = self.rows.iter().find(|r| r.rate == rate)?;
        row.cells[col]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rate");
        for m in &self.methods {
            let _ = write!(s, ",{m}_psnr_u,{m}_psnr_rec");
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.rate.to_string());
            for cell in &row.cells {
                let (u, r) = match cell {
                    Some(c) => (Some(c.psnr_u), c.psnr_rec),
                    None => (None, None),
                };
                let _ = write!(s, ",{},{}", fmt_cell(u), fmt_cell(r));
            }
            s.push('\n');
        }
        s
    }

    /// Parses the output of [`ComparisonTable::to_csv`]; values round-trip exactly.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::format("<comparison csv>", why.to_string());
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty file"))?.split(',').collect();
        if header.first() != Some(&"rate") || header.len() % 2 != 1 {
            return Err(bad("header must be `rate` followed by column pairs"));
        }
        let mut methods = Vec::new();
        for pair in header[1..].chunks(2) {
            let m = pair[0]
                .strip_suffix("_psnr_u")
                .ok_or_else(|| bad("expected a `_psnr_u` column"))?;
            if pair[1] != format!("{m}_psnr_rec") {
                return Err(bad("expected a matching `_psnr_rec` column"));
            }
            methods.push(m.to_string());
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(bad("row length does not match header"));
            }
            let rate = parse_cell(fields[0])?.ok_or_else(|| bad("missing rate"))?;
            let mut cells = Vec::with_capacity(methods.len());
            for pair in fields[1..].chunks(2) {
                let u = parse_cell(pair[0])?;
                let r = parse_cell(pair[1])?;
                cells.push(u.map(|psnr_u| ComparisonCell { psnr_u, psnr_rec: r }));
            }
            rows.push(ComparisonRow { rate, cells });
        }
        Ok(Self { methods, rows })
    }
}

/// Evaluates every (method, rate) pair whose artifact `lookup` provides.
/// Missing artifacts leave blank cells.
pub fn compare_methods(
    dataset: &Dataset,
    rates: &[f64],
    methods: &[String],
    mut lookup: impl FnMut(&str, f64) -> Option<MethodArtifact>,
) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mut cells = Vec::with_capacity(methods.len());
        for m in methods {
            let Some(art) = lookup(m, rate) else {
                log::warn!("no artifact for {m} at rate {rate}; leaving cell blank");
                cells.push(None);
                continue;
            };
            let report = evaluate(dataset, &art.mask, art.params.as_ref(), m)?;
            log::info!("{}", report.summary());
            cells.push(Some(ComparisonCell {
                psnr_u: report.mean_psnr_u,
                psnr_rec: report.mean_psnr_rec,
            }));
        }
        rows.push(ComparisonRow { rate, cells });
    }
    Ok(ComparisonTable {
        methods: methods.to_vec(),
        rows,
    })
}
