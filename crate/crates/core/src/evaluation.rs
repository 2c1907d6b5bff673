//! Reconstruction metrics and evaluation reports.
//!
//! NMSE is reported in decibels, `10·log10(E[‖H_in − H_out‖²_F / ‖H_in‖²_F])`.
//! The cosine similarity ρ averages `|h_outᴴ h_in| / (‖h_out‖ ‖h_in‖)` over
//! the 32 columns of each complex `32 × 32` image and then over samples.
//!
//! Headline metrics are computed on the normalized `[0, 1]` images the
//! network sees. Those images carry a large constant offset (the normalized
//! level of a zero channel entry), so every report also carries the same
//! metrics after subtracting that offset. By scale invariance of NMSE the
//! offset-removed figures equal NMSE on de-normalized channels.

use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView4, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DatasetBundle};
use crate::error::{Error, Result};
use crate::model::{count_parameters, Autoencoder, ParameterAudit, Scalar};

/// Sentinel used in JSON for a perfect reconstruction (NMSE = −∞ dB).
pub const PERFECT_NMSE_DB: f64 = f64::NEG_INFINITY;

fn check_same_shape<F: Scalar>(a: &ArrayView4<'_, F>, b: &ArrayView4<'_, F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    if a.dim().0 == 0 {
        return Err(Error::Domain("empty sample set".into()));
    }
    Ok(())
}

/// Per-sample squared-error ratios `‖H_in − H_out‖² / ‖H_in‖²`.
pub fn nmse_ratios<F: Scalar>(h_in: ArrayView4<'_, F>, h_out: ArrayView4<'_, F>) -> Result<Vec<f64>> {
    check_same_shape(&h_in, &h_out)?;
    h_in.outer_iter()
        .zip(h_out.outer_iter())
        .enumerate()
        .map(|(i, (a, b))| {
            let mut energy = 0.0;
            let mut err = 0.0;
            for (&x, &y) in a.iter().zip(b.iter()) {
                let (x, y) = (x.as_f64(), y.as_f64());
                energy += x * x;
                err += (x - y) * (x - y);
            }
            if energy == 0.0 {
                return Err(Error::Domain(format!("sample {i} has zero reference energy")));
            }
            Ok(err / energy)
        })
        .collect()
}

pub fn ratio_to_db(ratio: f64) -> f64 {
    if ratio == 0.0 {
        PERFECT_NMSE_DB
    } else {
        10.0 * ratio.log10()
    }
}

/// NMSE in dB over a set of images; returns [`PERFECT_NMSE_DB`] for exact reconstruction.
pub fn nmse<F: Scalar>(h_in: ArrayView4<'_, F>, h_out: ArrayView4<'_, F>) -> Result<f64> {
    let ratios = nmse_ratios(h_in, h_out)?;
    Ok(ratio_to_db(ratios.iter().sum::<f64>() / ratios.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub rho: f64,
    /// Per-sample values averaged into `rho`.
    pub samples: usize,
    /// Columns skipped because either side had zero norm.
    pub excluded_columns: usize,
}

/// Mean column-wise cosine similarity of one complex matrix pair.
/// Returns `(sum over valid columns, valid columns, excluded columns)`.
fn column_similarity(a: &Array2<Complex64>, b: &Array2<Complex64>) -> (f64, usize, usize) {
    let mut sum = 0.0;
    let (mut valid, mut excluded) = (0, 0);
    for (col_in, col_out) in a.axis_iter(Axis(1)).zip(b.axis_iter(Axis(1))) {
        let inner: Complex64 = col_out.iter().zip(col_in.iter()).map(|(o, i)| o.conj() * i).sum();
        let n_in = col_in.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let n_out = col_out.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if n_in == 0.0 || n_out == 0.0 {
            excluded += 1;
            continue;
        }
        sum += (inner.norm() / (n_in * n_out)).min(1.0);
        valid += 1;
    }
    (sum, valid, excluded)
}

/// Per-sample ρ values (samples whose columns are all zero are skipped).
pub fn similarity_per_sample<F: Scalar>(
    h_in: ArrayView4<'_, F>,
    h_out: ArrayView4<'_, F>,
) -> Result<(Vec<f64>, usize)> {
    check_same_shape(&h_in, &h_out)?;
    if h_in.dim().1 != 2 {
        return Err(Error::Layout("cosine similarity needs two-plane images".into()));
    }
    let to_grid = |img: ndarray::ArrayView3<'_, F>| {
        let (_, rows, cols) = img.dim();
        Array2::from_shape_fn((rows, cols), |(i, j)| Complex64::new(img[[0, i, j]].as_f64(), img[[1, i, j]].as_f64()))
    };
    let mut values = Vec::with_capacity(h_in.dim().0);
    let mut excluded = 0;
    for (a, b) in h_in.outer_iter().zip(h_out.outer_iter()) {
        let (sum, valid, skipped) = column_similarity(&to_grid(a), &to_grid(b));
        excluded += skipped;
        if valid > 0 {
            values.push(sum / valid as f64);
        }
    }
    Ok((values, excluded))
}

pub fn cosine_similarity<F: Scalar>(h_in: ArrayView4<'_, F>, h_out: ArrayView4<'_, F>) -> Result<Similarity> {
    let (values, excluded_columns) = similarity_per_sample(h_in, h_out)?;
    if values.is_empty() {
        return Err(Error::Domain("every column has zero norm".into()));
    }
    Ok(Similarity {
        rho: values.iter().sum::<f64>() / values.len() as f64,
        samples: values.len(),
        excluded_columns,
    })
}

/// Fraction of the perfect-CSI matched-filter gain kept when the BS precodes
/// with `v = h_recᴴ / ‖h_rec‖` for a single-antenna user: `|h_true v|² / ‖h_true‖²`.
pub fn precoding_snr_probe(h_true: &Array2<Complex64>, h_recovered: &Array2<Complex64>) -> Result<f64> {
    if h_true.nrows() != 1 || h_true.dim() != h_recovered.dim() {
        return Err(Error::Domain(format!(
            "precoding probe needs matching 1×N1 channels, got {:?} and {:?}",
            h_true.dim(),
            h_recovered.dim()
        )));
    }
    let energy_true: f64 = h_true.iter().map(|v| v.norm_sqr()).sum();
    let energy_rec: f64 = h_recovered.iter().map(|v| v.norm_sqr()).sum();
    if energy_true == 0.0 || energy_rec == 0.0 {
        return Err(Error::Domain("zero channel in precoding probe".into()));
    }
    let gain: Complex64 = h_true.iter().zip(h_recovered.iter()).map(|(t, r)| t * r.conj()).sum();
    Ok((gain.norm_sqr() / (energy_true * energy_rec)).min(1.0))
}

/// Received SNR `|h v|² / σ²` of the same matched-filter precoder.
pub fn precoded_snr(h_true: &Array2<Complex64>, h_recovered: &Array2<Complex64>, noise_power: f64) -> Result<f64> {
    if !(noise_power > 0.0) {
        return Err(Error::Domain("noise power must be positive".into()));
    }
    let retained = precoding_snr_probe(h_true, h_recovered)?;
    let energy_true: f64 = h_true.iter().map(|v| v.norm_sqr()).sum();
    Ok(retained * energy_true / noise_power)
}

/// Metrics in one representation of the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub nmse_db: f64,
    pub rho: f64,
    pub excluded_columns: usize,
}

/// One point of a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub epoch: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub metric: String,
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub architecture: String,
    pub cr: usize,
    pub split: String,
    pub samples: usize,
    /// Normalized `[0, 1]` image space (the training objective's space).
    pub nmse_db: f64,
    pub rho: f64,
    /// Same metrics after removing the normalized zero level (≡ de-normalized channels).
    pub centered: MetricSet,
    /// NMSE of a predictor that outputs the zero level everywhere, in normalized space.
    pub reference_constant_nmse_db: f64,
    /// Mean fraction of matched-filter gain kept with the recovered channel
    /// (single-antenna users only).
    pub precoding_gain: Option<f64>,
    pub parameters: ParameterAudit,
    pub per_sample_nmse_db: Vec<f64>,
    pub checkpoint: Option<String>,
    pub dataset_seed: u64,
    pub dataset_normalization: dataset::Normalization,
    pub series: Vec<PlotSeries>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        // Infinite NMSE has no JSON literal; encode it as a string sentinel.
        let mut value = serde_json::to_value(self.clone().with_finite_sentinels())?;
        if self.nmse_db == PERFECT_NMSE_DB {
            value["nmse_db"] = serde_json::Value::String("-inf".into());
        }
        if self.centered.nmse_db == PERFECT_NMSE_DB {
            value["centered"]["nmse_db"] = serde_json::Value::String("-inf".into());
        }
        Ok(serde_json::to_string_pretty(&value)?)
    }

    fn with_finite_sentinels(mut self) -> Self {
        let fix = |v: &mut f64| {
            if v.is_infinite() {
                *v = f64::MIN
            }
        };
        fix(&mut self.nmse_db);
        fix(&mut self.centered.nmse_db);
        self.per_sample_nmse_db.iter_mut().for_each(fix);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        for ptr in ["/nmse_db", "/centered/nmse_db"] {
            if let Some(v) = value.pointer_mut(ptr) {
                if v.as_str() == Some("-inf") {
                    *v = serde_json::json!(f64::MIN);
                }
            }
        }
        let mut report: EvalReport = serde_json::from_value(value)?;
        let unfix = |v: &mut f64| {
            if *v == f64::MIN {
                *v = PERFECT_NMSE_DB
            }
        };
        unfix(&mut report.nmse_db);
        unfix(&mut report.centered.nmse_db);
        report.per_sample_nmse_db.iter_mut().for_each(unfix);
        Ok(report)
    }
}

/// Anything that maps a batch of normalized images to reconstructions.
pub trait Reconstructor {
    fn reconstruct_batch(&self, x: &Array4<f32>) -> Result<Array4<f32>>;
}

impl<F: Scalar> Reconstructor for Autoencoder<F> {
    fn reconstruct_batch(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let xf = x.mapv(|v| F::of(v as f64));
        Ok(self.reconstruct(&xf)?.mapv(|v| v.as_f64() as f32))
    }
}

/// Runs `model` over `images` in fixed-size chunks.
pub fn reconstruct_all<M: Reconstructor + ?Sized>(model: &M, images: &Array4<f32>, chunk: usize) -> Result<Array4<f32>> {
    let n = images.dim().0;
    let mut out = Array4::zeros(images.dim());
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let part = model.reconstruct_batch(&images.slice(s![start..end, .., .., ..]).to_owned())?;
        out.slice_mut(s![start..end, .., .., ..]).assign(&part);
        start = end;
    }
    Ok(out)
}

/// [`cosine_similarity`], scoring ρ = 0 when every column is excluded.
fn similarity_or_zero<F: Scalar>(h_in: ArrayView4<'_, F>, h_out: ArrayView4<'_, F>) -> Result<Similarity> {
    let (values, excluded_columns) = similarity_per_sample(h_in, h_out)?;
    let rho = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 };
    Ok(Similarity { rho, samples: values.len(), excluded_columns })
}

/// Normalized-space and centered metrics of a reconstruction.
pub fn metric_pair(
    h_in: &Array4<f32>,
    h_out: &Array4<f32>,
    zero_level: f64,
) -> Result<(MetricSet, MetricSet, Vec<f64>)> {
    let ratios = nmse_ratios(h_in.view(), h_out.view())?;
    let sim = similarity_or_zero(h_in.view(), h_out.view())?;
    let raw = MetricSet {
        nmse_db: ratio_to_db(ratios.iter().sum::<f64>() / ratios.len() as f64),
        rho: sim.rho,
        excluded_columns: sim.excluded_columns,
    };
    let c_in = h_in.mapv(|v| v as f64 - zero_level);
    let c_out = h_out.mapv(|v| v as f64 - zero_level);
    let c_sim = similarity_or_zero(c_in.view(), c_out.view())?;
    let centered = MetricSet {
        nmse_db: nmse(c_in.view(), c_out.view())?,
        rho: c_sim.rho,
        excluded_columns: c_sim.excluded_columns,
    };
    Ok((raw, centered, ratios.into_iter().map(ratio_to_db).collect()))
}

pub struct EvalInput<'a> {
    pub bundle: &'a DatasetBundle,
    pub images: &'a Array4<f32>,
    pub split: &'a str,
    pub checkpoint: Option<String>,
}

/// Evaluates an autoencoder on one split of a bundle.
pub fn evaluate<F: Scalar>(model: &Autoencoder<F>, input: EvalInput<'_>) -> Result<EvalReport> {
    let (planes, h, w) = input.bundle.image_shape();
    if (planes, h, w) != model.image_dims() {
        return Err(Error::Config(format!(
            "model expects images {:?}, dataset holds {:?}",
            model.image_dims(),
            (planes, h, w)
        )));
    }
    let audit = count_parameters(model);
    let mut report = evaluate_reconstructor(model, input)?;
    report.architecture = model.config.architecture.name().to_string();
    report.cr = model.config.compression_ratio;
    report.parameters = audit;
    Ok(report)
}

/// Evaluation for any reconstructor (used for reference fixtures as well as models).
pub fn evaluate_reconstructor<M: Reconstructor + ?Sized>(model: &M, input: EvalInput<'_>) -> Result<EvalReport> {
    let norm = input.bundle.normalization;
    let zero = norm.zero_level();
    let recon = reconstruct_all(model, input.images, 250)?;
    let (raw, centered, per_sample) = metric_pair(input.images, &recon, zero)?;
    let constant = input.images.mapv(|_| zero as f32);
    let reference = nmse(input.images.view(), constant.view())?;

    let mut gains = Vec::with_capacity(input.images.dim().0);
    let (n2, n1) = (input.bundle.manifest.template.n_user_antennas, input.bundle.manifest.template.n_bs_antennas);
    if n2 == 1 {
        for (a, b) in input.images.outer_iter().zip(recon.outer_iter()) {
            let h_true = dataset::merge_complex(a.mapv(|v| norm.invert(v as f64) as f32).view(), n2, n1)?;
            let h_rec = dataset::merge_complex(b.mapv(|v| norm.invert(v as f64) as f32).view(), n2, n1)?;
            gains.push(precoding_snr_probe(&h_true, &h_rec).unwrap_or(0.0));
        }
    }
    let precoding_gain = (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64);
    Ok(EvalReport {
        architecture: String::new(),
        cr: 0,
        split: input.split.to_string(),
        samples: input.images.dim().0,
        nmse_db: raw.nmse_db,
        rho: raw.rho,
        centered,
        reference_constant_nmse_db: reference,
        precoding_gain,
        parameters: ParameterAudit { total: 0, fc_params: 0, non_fc_params: 0, layers: Vec::new() },
        per_sample_nmse_db: per_sample,
        checkpoint: input.checkpoint,
        dataset_seed: input.bundle.manifest.seed,
        dataset_normalization: norm,
        series: Vec::new(),
        notes: vec![
            "nmse_db/rho: normalized [0,1] image space".into(),
            "centered: zero level removed, equal to de-normalized channel metrics".into(),
            "rho columns: columns of the complex 32x32 reshape (N_c = 32)".into(),
        ],
    })
}

/// Comparison table with one row per architecture and one column per CR.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut crs: Vec<usize> = reports.iter().map(|r| r.cr).collect();
    crs.sort_unstable();
    crs.dedup();
    let mut archs: Vec<&str> = Vec::new();
    for r in reports {
        if !archs.contains(&r.architecture.as_str()) {
            archs.push(&r.architecture);
        }
    }
    let find = |a: &str, cr: usize| reports.iter().find(|r| r.architecture == a && r.cr == cr);
    let mut out = String::new();
    let header: String = crs.iter().map(|cr| format!("{cr:>12}")).collect();
    for (title, pick) in [
        ("NMSE (dB)", (|r: &EvalReport| r.nmse_db) as fn(&EvalReport) -> f64),
        ("rho", |r: &EvalReport| r.rho),
        ("NMSE centered (dB)", |r: &EvalReport| r.centered.nmse_db),
        ("rho centered", |r: &EvalReport| r.centered.rho),
    ] {
        out.push_str(&format!("{title:<20}{header}\n"));
        for a in &archs {
            let cells: String = crs
                .iter()
                .map(|&cr| find(a, cr).map_or(format!("{:>12}", "-"), |r| format!("{:>12.4}", pick(r))))
                .collect();
            out.push_str(&format!("  {a:<18}{cells}\n"));
        }
    }
    out
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, report.to_json()?)?;
    Ok(())
}
