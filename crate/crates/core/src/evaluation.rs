//! Region-split RMSE reports, model comparison, image grids and log-trend
//! fitting of loss curves.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{encode_pgm, quantize, Image, SamplePair};
use crate::models::{AnyModel, CnnCnnBaseline, CnnLstmModel, RestorationModel};
use crate::tensor::{Scalar, TensorError};
use crate::training::LossRecord;

/// Images restored per forward pass during evaluation.
const EVAL_CHUNK: usize = 50;
pub const GRID_MAX_ROWS: usize = 64;
pub const GRID_SEPARATOR: usize = 2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    Empty,
    #[error("reports cover different corpora: {0}")]
    CorpusMismatch(String),
    #[error("column sizes differ: {0}")]
    CountMismatch(String),
    #[error("grid of {0} rows exceeds the limit of {GRID_MAX_ROWS}")]
    TooManyRows(usize),
    #[error("need at least two points with distinct iterations to fit a trend")]
    TooFewPoints,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that maps corrupted inputs to restorations.
pub trait Restorer {
    fn restore(&self, pairs: &[SamplePair]) -> Result<Vec<Image>, EvalError>;
}

/// Returns the corrupted input unchanged.
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, pairs: &[SamplePair]) -> Result<Vec<Image>, EvalError> {
        Ok(pairs.iter().map(|p| p.corrupted.clone()).collect())
    }
}

/// Returns the clean target; a perfect restorer.
pub struct OracleRestorer;

impl Restorer for OracleRestorer {
    fn restore(&self, pairs: &[SamplePair]) -> Result<Vec<Image>, EvalError> {
        Ok(pairs.iter().map(|p| p.clean.clone()).collect())
    }
}

fn restore_chunked<T: Scalar, M: RestorationModel<T>>(model: &M, pairs: &[SamplePair]) -> Result<Vec<Image>, EvalError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let inputs: Vec<Image> = chunk.iter().map(|p| p.corrupted.clone()).collect();
        out.extend(model.restore_batch(&inputs)?);
    }
    Ok(out)
}

macro_rules! model_restorer {
    ($($ty:ident),*) => {$(
        impl<T: Scalar> Restorer for $ty<T> {
            fn restore(&self, pairs: &[SamplePair]) -> Result<Vec<Image>, EvalError> {
                restore_chunked(self, pairs)
            }
        }
    )*};
}

model_restorer!(AnyModel, CnnLstmModel, CnnCnnBaseline);

/// Identity of a held-out corpus: clean pixels plus corrupted inputs.
pub fn corpus_checksum(pairs: &[SamplePair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.clean.to_bytes());
        h.update(p.corrupted.to_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub n_images: usize,
    pub seed: u64,
    pub corpus: String,
    pub rmse_full: f64,
    /// Rows above the blanked band (denoising).
    pub rmse_upper: f64,
    /// Blanked rows (inpainting).
    pub rmse_lower: f64,
    /// Per-image RMSE quartiles: 25th, 50th, 75th percentile.
    pub quartiles: [f64; 3],
    /// Mean absolute difference between neighbouring output pixels.
    pub mean_gradient: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mean_gradient(images: &[Image]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for im in images {
        let s = im.side();
        let px = im.pixels();
        for r in 0..s {
            for c in 0..s {
                if c + 1 < s {
                    total += (px[r * s + c + 1] - px[r * s + c]).abs();
                    count += 1;
                }
                if r + 1 < s {
                    total += (px[(r + 1) * s + c] - px[r * s + c]).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Scores `restorer` on `pairs`. Rows `[0, side/2)` form the upper region.
pub fn evaluate(restorer: &dyn Restorer, model: &str, pairs: &[SamplePair], seed: u64) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let outputs = restorer.restore(pairs)?;
    if outputs.len() != pairs.len() {
        return Err(EvalError::CountMismatch(format!("{} outputs for {} inputs", outputs.len(), pairs.len())));
    }
    let side = pairs[0].clean.side();
    let boundary = side / 2 * side;
    let mut upper = 0.0;
    let mut lower = 0.0;
    let mut per_image = Vec::with_capacity(pairs.len());
    for (out, pair) in outputs.iter().zip(pairs) {
        if out.side() != side || pair.clean.side() != side {
            return Err(EvalError::CountMismatch("images differ in size".into()));
        }
        let (mut u, mut l) = (0.0, 0.0);
        for (k, (&y, &t)) in out.pixels().iter().zip(pair.clean.pixels()).enumerate() {
            let e = (y - t) * (y - t);
            if k < boundary {
                u += e;
            } else {
                l += e;
            }
        }
        per_image.push(((u + l) / (side * side) as f64).sqrt());
        upper += u;
        lower += l;
    }
    let n = pairs.len() as f64;
    let upper_px = n * boundary as f64;
    let lower_px = n * (side * side - boundary) as f64;
    per_image.sort_by(f64::total_cmp);
    Ok(EvalReport {
        model: model.to_string(),
        n_images: pairs.len(),
        seed,
        corpus: corpus_checksum(pairs),
        rmse_full: ((upper + lower) / (upper_px + lower_px)).sqrt(),
        rmse_upper: (upper / upper_px).sqrt(),
        rmse_lower: (lower / lower_px).sqrt(),
        quartiles: [percentile(&per_image, 0.25), percentile(&per_image, 0.5), percentile(&per_image, 0.75)],
        mean_gradient: mean_gradient(&outputs),
    })
}

pub const REPORT_CSV_HEADER: &str = "model,n_images,seed,rmse_full,rmse_upper,rmse_lower,q1,median,q3,mean_gradient,corpus";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{REPORT_CSV_HEADER}\n{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}\n",
            self.model,
            self.n_images,
            self.seed,
            self.rmse_full,
            self.rmse_upper,
            self.rmse_lower,
            self.quartiles[0],
            self.quartiles[1],
            self.quartiles[2],
            self.mean_gradient,
            self.corpus
        )
    }

    /// Parses the output of [`EvalReport::to_csv`].
    pub fn from_csv(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        if lines.next()? != REPORT_CSV_HEADER {
            return None;
        }
        let f: Vec<&str> = lines.next()?.split(',').collect();
        if f.len() != 11 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(EvalReport {
            model: f[0].to_string(),
            n_images: f[1].parse().ok()?,
            seed: f[2].parse().ok()?,
            rmse_full: num(3)?,
            rmse_upper: num(4)?,
            rmse_lower: num(5)?,
            quartiles: [num(6)?, num(7)?, num(8)?],
            mean_gradient: num(9)?,
            corpus: f[10].to_string(),
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model       {}", self.model);
        let _ = writeln!(s, "images      {} (corruption seed {})", self.n_images, self.seed);
        let _ = writeln!(s, "rmse full   {:.6}", self.rmse_full);
        let _ = writeln!(s, "rmse upper  {:.6}", self.rmse_upper);
        let _ = writeln!(s, "rmse lower  {:.6}", self.rmse_lower);
        let _ = writeln!(
            s,
            "per-image   q1 {:.6}  median {:.6}  q3 {:.6}",
            self.quartiles[0], self.quartiles[1], self.quartiles[2]
        );
        let _ = writeln!(s, "smoothness  {:.6}", self.mean_gradient);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: &'static str,
    pub a: f64,
    pub b: f64,
    /// `b - a`; negative means B has lower error.
    pub delta: f64,
    pub winner: Winner,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub rows: Vec<MetricRow>,
}

/// Side-by-side metrics of two reports on the same corpus.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Comparison, EvalError> {
    if a.n_images != b.n_images || a.seed != b.seed || a.corpus != b.corpus {
        return Err(EvalError::CorpusMismatch(format!(
            "{} images / seed {} vs {} images / seed {}",
            a.n_images, a.seed, b.n_images, b.seed
        )));
    }
    let row = |metric, x: f64, y: f64| MetricRow {
        metric,
        a: x,
        b: y,
        delta: y - x,
        winner: if x < y {
            Winner::A
        } else if y < x {
            Winner::B
        } else {
            Winner::Tie
        },
    };
    Ok(Comparison {
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        rows: vec![
            row("rmse_full", a.rmse_full, b.rmse_full),
            row("rmse_upper", a.rmse_upper, b.rmse_upper),
            row("rmse_lower", a.rmse_lower, b.rmse_lower),
            row("median", a.quartiles[1], b.quartiles[1]),
        ],
    })
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<11} {:>12} {:>12} {:>12}  winner", "metric", self.model_a, self.model_b, "delta");
        for r in &self.rows {
            let w = match r.winner {
                Winner::A => self.model_a.as_str(),
                Winner::B => self.model_b.as_str(),
                Winner::Tie => "tie",
            };
            let _ = writeln!(s, "{:<11} {:>12.6} {:>12.6} {:>+12.6}  {w}", r.metric, r.a, r.b, r.delta);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,a,b,delta,winner\n");
        for r in &self.rows {
            let w = match r.winner {
                Winner::A => "a",
                Winner::B => "b",
                Winner::Tie => "tie",
            };
            let _ = writeln!(s, "{},{:?},{:?},{:?},{w}", r.metric, r.a, r.b, r.delta);
        }
        s
    }
}

/// Grid dimensions `(width, height)` for `rows` samples of `side` pixels.
pub fn grid_size(rows: usize, side: usize) -> (usize, usize) {
    (4 * side + 3 * GRID_SEPARATOR, rows * side + (rows - 1) * GRID_SEPARATOR)
}

/// Binary PGM with one sample per row and columns input | A | B | original,
/// separated by white bands.
pub fn export_grid(inputs: &[Image], outputs_a: &[Image], outputs_b: &[Image], originals: &[Image]) -> Result<Vec<u8>, EvalError> {
    let n = inputs.len();
    if outputs_a.len() != n || outputs_b.len() != n || originals.len() != n {
        return Err(EvalError::CountMismatch(format!(
            "{n} inputs, {} / {} outputs, {} originals",
            outputs_a.len(),
            outputs_b.len(),
            originals.len()
        )));
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    if n > GRID_MAX_ROWS {
        return Err(EvalError::TooManyRows(n));
    }
    let side = inputs[0].side();
    let columns = [inputs, outputs_a, outputs_b, originals];
    if columns.iter().flat_map(|c| c.iter()).any(|im| im.side() != side) {
        return Err(EvalError::CountMismatch("images differ in size".into()));
    }
    let (w, h) = grid_size(n, side);
    let mut px = vec![255u8; w * h];
    for row in 0..n {
        let y0 = row * (side + GRID_SEPARATOR);
        for (col, images) in columns.iter().enumerate() {
            let x0 = col * (side + GRID_SEPARATOR);
            let im = &images[row];
            for r in 0..side {
                for c in 0..side {
                    px[(y0 + r) * w + x0 + c] = quantize(im.pixels()[r * side + c]);
                }
            }
        }
    }
    Ok(encode_pgm(w, h, &px))
}

pub fn write_grid(path: &std::path::Path, bytes: &[u8]) -> Result<(), EvalError> {
    std::fs::write(path, bytes).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `loss ≈ a · ln(iteration) + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendFit {
    pub a: f64,
    pub b: f64,
    pub residual_rms: f64,
}

/// Least-squares fit of `y` against `ln(x)`; all `x` must be ≥ 1.
pub fn fit_log_trend_points(points: &[(f64, f64)]) -> Result<TrendFit, EvalError> {
    if points.len() < 2 || points.iter().any(|&(x, _)| !(x >= 1.0)) {
        return Err(EvalError::TooFewPoints);
    }
    let n = points.len() as f64;
    let mean_l = points.iter().map(|&(x, _)| x.ln()).sum::<f64>() / n;
    let mean_y = points.iter().map(|&(_, y)| y).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in points {
        let dl = x.ln() - mean_l;
        sxx += dl * dl;
        sxy += dl * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(EvalError::TooFewPoints);
    }
    let a = sxy / sxx;
    let b = mean_y - a * mean_l;
    let ss: f64 = points.iter().map(|&(x, y)| (y - (a * x.ln() + b)).powi(2)).sum();
    Ok(TrendFit {
        a,
        b,
        residual_rms: (ss / n).sqrt(),
    })
}

/// Trend of the total loss over a training log.
pub fn fit_log_trend(log: &[LossRecord]) -> Result<TrendFit, EvalError> {
    let pts: Vec<(f64, f64)> = log.iter().map(|r| (r.iteration as f64, r.total)).collect();
    fit_log_trend_points(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(side: usize, v: f64) -> Image {
        Image::new(side, vec![v; side * side]).unwrap()
    }

    #[test]
    fn percentile_interpolates() {
        let d = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&d, 0.5), 2.5);
        assert_eq!(percentile(&d, 0.0), 1.0);
        assert_eq!(percentile(&d, 1.0), 4.0);
    }

    #[test]
    fn exact_log_fit() {
        let pts: Vec<(f64, f64)> = (1..50).map(|i| (i as f64, 2.0 * (i as f64).ln() + 1.0)).collect();
        let f = fit_log_trend_points(&pts).unwrap();
        assert!((f.a - 2.0).abs() < 1e-9 && (f.b - 1.0).abs() < 1e-9);
        assert!(fit_log_trend_points(&pts[..1]).is_err());
        assert!(fit_log_trend_points(&[(3.0, 1.0), (3.0, 2.0)]).is_err());
    }

    #[test]
    fn grid_layout() {
        assert_eq!(grid_size(5, 28), (118, 5 * 28 + 4 * 2));
        let black = vec![flat(28, 0.0)];
        let pgm = export_grid(&black, &black, &black, &black).unwrap();
        let (w, h, px) = crate::data::decode_pgm(&pgm).unwrap();
        assert_eq!((w, h), (118, 28));
        for (i, &v) in px.iter().enumerate() {
            let x = i % w;
            let in_sep = (28..30).contains(&x) || (58..60).contains(&x) || (88..90).contains(&x);
            assert_eq!(v, if in_sep { 255 } else { 0 });
        }
    }

    #[test]
    fn grid_guards() {
        let one = vec![flat(4, 0.5)];
        let two = vec![flat(4, 0.5), flat(4, 0.5)];
        assert!(matches!(export_grid(&one, &two, &one, &one), Err(EvalError::CountMismatch(_))));
        let many = vec![flat(4, 0.5); 65];
        assert!(matches!(export_grid(&many, &many, &many, &many), Err(EvalError::TooManyRows(65))));
    }
}
