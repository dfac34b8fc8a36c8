//! Spectra ingestion, standard scaling + PCA, and a synthetic generator for
//! XANES-like absorption spectra.
//!
//! The CSV format is `id,label,x0,...,x{p-1}` with labels in {0, 1}. PCA is
//! computed from the eigendecomposition of the centered, scaled Gram matrix
//! (samples are fewer than spectral points) and is always fitted on training
//! rows only; the fitted model is then applied to every sample.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{sym_eig, Matrix};

/// Number of spectral points produced by the synthetic generator.
pub const SYNTHETIC_POINTS: usize = 501;

/// A labeled set of spectra; one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectraDataset {
    pub spectra: Matrix,
    pub labels: Vec<u8>,
    pub sample_ids: Vec<String>,
}

impl SpectraDataset {
    pub fn new(spectra: Matrix, labels: Vec<u8>, sample_ids: Vec<String>) -> Result<SpectraDataset> {
        if spectra.rows() != labels.len() || spectra.rows() != sample_ids.len() {
            return Err(Error::contract(format!(
                "dataset rows {} must match labels {} and ids {}",
                spectra.rows(),
                labels.len(),
                sample_ids.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::validation(format!("label {bad} is not in {{0, 1}}")));
        }
        Ok(SpectraDataset {
            spectra,
            labels,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.spectra.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_points(&self) -> usize {
        self.spectra.cols()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Loads a dataset from `id,label,x0,...,x{p-1}` CSV. Row order follows the
/// file. Malformed rows are reported with their 1-based line number.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SpectraDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<SpectraDataset> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            message: "empty file, expected a header row".to_string(),
        });
    };
    let header_fields: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if header_fields.len() < 3 || header_fields[0] != "id" || header_fields[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header id,label,x0,...; got {} fields starting with {:?}",
                header_fields.len(),
                header_fields.first()
            ),
        });
    }
    let n_points = header_fields.len() - 2;
    for (i, name) in header_fields[2..].iter().enumerate() {
        let expected = format!("x{i}");
        if *name != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!("feature column {i} is named {name:?}, expected {expected:?}"),
            });
        }
    }

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_points + 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "expected {} fields, found {}",
                    n_points + 2,
                    fields.len()
                ),
            });
        }
        ids.push(fields[0].to_string());
        match fields[1] {
            "0" => labels.push(0),
            "1" => labels.push(1),
            other => {
                return Err(Error::validation(format!(
                    "line {line_no}: label {other:?} is not 0 or 1"
                )))
            }
        }
        for (j, field) in fields[2..].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("column x{j}: cannot parse {field:?} as a number"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let spectra = Matrix::from_vec(rows, n_points, values)?;
    SpectraDataset::new(spectra, labels, ids)
}

/// Serializes a dataset in the same CSV dialect `load_csv` reads. Float
/// formatting is the shortest round-trip representation, so write/read is
/// lossless.
pub fn to_csv(dataset: &SpectraDataset) -> String {
    let mut out = String::new();
    out.push_str("id,label");
    for i in 0..dataset.n_points() {
        let _ = write!(out, ",x{i}");
    }
    out.push('\n');
    for i in 0..dataset.len() {
        let _ = write!(out, "{},{}", dataset.sample_ids[i], dataset.labels[i]);
        for v in dataset.spectra.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Standard scaler plus PCA basis fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `n_points x k`, orthonormal columns; each column's
    /// largest-magnitude entry is positive.
    pub components: Matrix,
    pub explained_variance_ratio: Vec<f64>,
}

const SCALE_FLOOR: f64 = 1e-12;

/// Fits per-feature standardization (mean 0, population std 1) and a
/// `k`-component PCA via the Gram-matrix eigendecomposition.
pub fn fit_scaler_pca(train: &Matrix, k: usize) -> Result<PcaModel> {
    let (n, p) = train.shape();
    if n < 2 {
        return Err(Error::contract(format!(
            "PCA needs at least 2 training rows, got {n}"
        )));
    }
    if k == 0 || k > (n - 1).min(p) {
        return Err(Error::contract(format!(
            "k = {k} out of range; need 1 <= k <= min(rows - 1, cols) = {}",
            (n - 1).min(p)
        )));
    }

    let mut mean = vec![0.0; p];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += train.get(i, j);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut scale = vec![0.0; p];
    for i in 0..n {
        for (j, s) in scale.iter_mut().enumerate() {
            let d = train.get(i, j) - mean[j];
            *s += d * d;
        }
    }
    for s in &mut scale {
        *s = (*s / n as f64).sqrt().max(SCALE_FLOOR);
    }

    let standardized = Matrix::from_fn(n, p, |i, j| (train.get(i, j) - mean[j]) / scale[j]);
    let gram = standardized.matmul(&standardized.transpose())?;
    let (eigenvalues, vectors) = sym_eig(&gram)?;
    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let top = eigenvalues.last().copied().unwrap_or(0.0);

    let mut components = Matrix::zeros(p, k);
    let mut explained = Vec::with_capacity(k);
    for c in 0..k {
        // Eigenvalues come back ascending; take from the top.
        let src = n - 1 - c;
        let lambda = eigenvalues[src];
        if lambda <= 1e-10 * top.max(1.0) {
            return Err(Error::numeric(format!(
                "training data has rank below the requested {k} components"
            )));
        }
        let inv_sigma = 1.0 / lambda.sqrt();
        for j in 0..p {
            let mut acc = 0.0;
            for i in 0..n {
                acc += standardized.get(i, j) * vectors.get(i, src);
            }
            components.set(j, c, acc * inv_sigma);
        }
        // Sign convention: flip so the largest-magnitude entry is positive.
        let mut arg_max = 0;
        for j in 1..p {
            if components.get(j, c).abs() > components.get(arg_max, c).abs() {
                arg_max = j;
            }
        }
        if components.get(arg_max, c) < 0.0 {
            for j in 0..p {
                let v = components.get(j, c);
                components.set(j, c, -v);
            }
        }
        explained.push(if total > 0.0 { lambda / total } else { 0.0 });
    }

    Ok(PcaModel {
        mean,
        scale,
        components,
        explained_variance_ratio: explained,
    })
}

impl PcaModel {
    pub fn n_points(&self) -> usize {
        self.components.rows()
    }

    pub fn n_components(&self) -> usize {
        self.components.cols()
    }

    /// Projects rows of `x` into the PCA basis: `((x - mean) / scale) V`.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_points() {
            return Err(Error::Shape {
                op: "pca_transform",
                lhs_rows: x.rows(),
                lhs_cols: x.cols(),
                rhs_rows: self.n_points(),
                rhs_cols: self.n_components(),
            });
        }
        let standardized = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.mean[j]) / self.scale[j]
        });
        standardized.matmul(&self.components)
    }

    /// Maps scores back to the standardized feature space (orthonormal
    /// basis, so this is the adjoint).
    pub fn inverse_transform_standardized(&self, scores: &Matrix) -> Result<Matrix> {
        scores.matmul(&self.components.transpose())
    }
}

/// Difficulty presets for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticPreset {
    /// Strong class separation: between-class mean distance is an order of
    /// magnitude above the within-class spread.
    Separable,
    /// Weak class shift with heavy correlated noise; classes overlap.
    NoisyOverlapping,
}

struct PresetParams {
    class_shift: f64,
    jitter: f64,
    smooth_noise: f64,
    white_noise: f64,
}

impl SyntheticPreset {
    fn params(self) -> PresetParams {
        match self {
            SyntheticPreset::Separable => PresetParams {
                class_shift: 1.5,
                jitter: 0.03,
                smooth_noise: 0.008,
                white_noise: 0.001,
            },
            SyntheticPreset::NoisyOverlapping => PresetParams {
                class_shift: 0.3,
                jitter: 0.3,
                smooth_noise: 0.08,
                white_noise: 0.01,
            },
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 is kept away from zero.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates `n` synthetic 501-point absorption spectra with a sigmoid
/// absorption edge plus class-dependent Gaussian peaks and per-sample
/// correlated noise. Exactly `round(n * tumor_fraction)` samples are
/// labeled 1 (listed first); output is bitwise deterministic per seed.
pub fn generate_synthetic(
    n: usize,
    tumor_fraction: f64,
    seed: u64,
    preset: SyntheticPreset,
) -> Result<SpectraDataset> {
    if n == 0 {
        return Err(Error::contract("need at least one sample".to_string()));
    }
    if !(0.0..=1.0).contains(&tumor_fraction) || tumor_fraction <= 0.0 || tumor_fraction >= 1.0 {
        return Err(Error::contract(format!(
            "tumor_fraction must be strictly between 0 and 1, got {tumor_fraction}"
        )));
    }
    let params = preset.params();
    let n_pos = (n as f64 * tumor_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let p = SYNTHETIC_POINTS;
    let grid: Vec<f64> = (0..p).map(|i| i as f64 / (p - 1) as f64).collect();

    // Base peak parameters (position, width, amplitude) and per-class
    // offsets scaled by the preset's class shift.
    let base_peaks = [(0.42, 0.030, 0.55), (0.55, 0.050, 0.30), (0.72, 0.060, 0.18)];
    let pos_delta = [0.012, -0.015, 0.010];
    let amp_delta = [-0.18, 0.22, -0.08];

    let mut spectra = Matrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for s in 0..n {
        let label = if s < n_pos { 1u8 } else { 0u8 };
        labels.push(label);
        ids.push(format!("s{s:04}"));
        let class = label as f64;

        let mut peaks = [(0.0, 0.0, 0.0); 3];
        for (k, &(pos, width, amp)) in base_peaks.iter().enumerate() {
            let pos_c = pos + class * params.class_shift * pos_delta[k];
            let amp_c = amp + class * params.class_shift * amp_delta[k];
            let pos_s = pos_c + 0.01 * params.jitter * standard_normal(&mut rng);
            let amp_s = amp_c * (1.0 + params.jitter * standard_normal(&mut rng));
            let width_s =
                (width * (1.0 + 0.5 * params.jitter * standard_normal(&mut rng))).max(0.005);
            peaks[k] = (pos_s, width_s, amp_s);
        }
        let mut bumps = [(0.0, 0.0); 6];
        for bump in &mut bumps {
            let center = rng.gen_range(0.05..0.95);
            let coeff = params.smooth_noise * standard_normal(&mut rng);
            *bump = (center, coeff);
        }

        for (i, &t) in grid.iter().enumerate() {
            let mut v = 1.0 / (1.0 + (-(t - 0.30) / 0.015).exp());
            for &(pos, width, amp) in &peaks {
                let z = (t - pos) / width;
                v += amp * (-0.5 * z * z).exp();
            }
            for &(center, coeff) in &bumps {
                let z = (t - center) / 0.08;
                v += coeff * (-0.5 * z * z).exp();
            }
            v += params.white_noise * standard_normal(&mut rng);
            spectra.set(s, i, v);
        }
    }

    SpectraDataset::new(spectra, labels, ids)
}
