//! Synthetic near-field CSI datasets: geometry sampling, the complex ↔ image
//! split, bundle-wide min-max normalization and the on-disk bundle format.
//!
//! Bundle file layout (all integers and floats little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `NFCS`                           |
//! | 4      | 2    | format version (u16, currently 1)      |
//! | 6      | 24   | train / val / test counts (3 × u64)    |
//! | 30     | 12   | planes, height, width (3 × u32)        |
//! | 42     | 16   | norm_min, norm_max (2 × f64)           |
//! | 58     | ...  | f32 payload: train, then val, then test, each row-major `[n, planes, height, width]` |
//! | end-4  | 4    | CRC32 (IEEE) of every preceding byte   |
//!
//! A JSON manifest with the generation parameters is written next to the
//! bundle as `<stem>.manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelMatrix, SystemGeometry, DEFAULT_WAVELENGTH};
use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 32;
pub const PLANES: usize = 2;
pub const MAGIC: &[u8; 4] = b"NFCS";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 58;

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi {
            return Err(Error::Config(format!("{name} range [{}, {}] is empty or invalid", self.lo, self.hi)));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }
}

/// The fixed part of a [`SystemGeometry`]; placement is drawn per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayTemplate {
    pub n_bs_antennas: usize,
    pub n_user_antennas: usize,
    pub antenna_spacing: f64,
    pub wavelength: f64,
}

impl Default for ArrayTemplate {
    fn default() -> Self {
        ArrayTemplate {
            n_bs_antennas: 1024,
            n_user_antennas: 1,
            antenna_spacing: DEFAULT_WAVELENGTH / 2.0,
            wavelength: DEFAULT_WAVELENGTH,
        }
    }
}

impl ArrayTemplate {
    pub fn place(&self, range: f64, transmit_angle: f64, relative_angle: f64) -> SystemGeometry {
        SystemGeometry {
            n_bs_antennas: self.n_bs_antennas,
            n_user_antennas: self.n_user_antennas,
            antenna_spacing: self.antenna_spacing,
            wavelength: self.wavelength,
            range,
            transmit_angle,
            relative_angle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub r_range: Interval,
    pub theta_range: Interval,
    pub phi_range: Interval,
    pub template: ArrayTemplate,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        use std::f64::consts::PI;
        SamplingConfig {
            seed: 2024,
            n_train: 25_000,
            n_val: 5_000,
            n_test: 5_000,
            r_range: Interval::new(5.2, 300.0),
            theta_range: Interval::new(-PI / 3.0, PI / 3.0),
            phi_range: Interval::new(-PI / 6.0, PI / 6.0),
            template: ArrayTemplate::default(),
        }
    }
}

impl SamplingConfig {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split counts must all be positive".into()));
        }
        self.r_range.validate("r")?;
        self.theta_range.validate("theta")?;
        self.phi_range.validate("phi")?;
        let nearest = self.template.place(self.r_range.lo, 0.0, 0.0);
        nearest.validate()?;
        let rayleigh = channel::rayleigh_distance(&nearest)?;
        if self.r_range.hi >= rayleigh {
            return Err(Error::Config(format!(
                "r range upper bound {} is not inside the near field (Rayleigh distance {rayleigh:.3} m)",
                self.r_range.hi
            )));
        }
        Ok(())
    }

    /// Deterministic generator for sample `index`: one ChaCha stream per index.
    pub fn sample_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Draws `(r, θ, φ)` independently and uniformly over the configured ranges.
pub fn sample_geometry<R: Rng + ?Sized>(config: &SamplingConfig, rng: &mut R) -> Result<SystemGeometry> {
    config.validate()?;
    let geometry = draw(config, rng);
    geometry.validate()?;
    Ok(geometry)
}

fn draw<R: Rng + ?Sized>(config: &SamplingConfig, rng: &mut R) -> SystemGeometry {
    let r = config.r_range.sample(rng);
    let theta = config.theta_range.sample(rng);
    let phi = config.phi_range.sample(rng);
    config.template.place(r, theta, phi)
}

/// Two-plane real image of one channel; plane 0 holds real parts, plane 1 imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiImage {
    pub values: Array3<f32>,
    pub normalized: bool,
}

/// Splits a complex channel into a `2 × 32 × 32` image, row-major over the
/// flattened `N2·N1` entries.
pub fn split_complex(h: &ChannelMatrix) -> Result<CsiImage> {
    let values = split_entries(&h.entries, IMAGE_SIDE, IMAGE_SIDE)?;
    Ok(CsiImage {
        values: values.mapv(|v| v as f32),
        normalized: false,
    })
}

/// f64 split with an arbitrary image side; `rows · cols` must equal `N2 · N1`.
pub fn split_entries(entries: &Array2<Complex64>, rows: usize, cols: usize) -> Result<Array3<f64>> {
    let count = entries.len();
    if count != rows * cols {
        return Err(Error::Layout(format!(
            "channel of shape {:?} has {count} entries, image layout needs {}",
            entries.dim(),
            rows * cols
        )));
    }
    let mut out = Array3::zeros((PLANES, rows, cols));
    for (k, v) in entries.iter().enumerate() {
        let (i, j) = (k / cols, k % cols);
        out[[0, i, j]] = v.re;
        out[[1, i, j]] = v.im;
    }
    Ok(out)
}

/// Inverse of [`split_complex`]: rebuilds a `n2 × n1` complex matrix.
pub fn merge_complex(img: ArrayView3<'_, f32>, n2: usize, n1: usize) -> Result<Array2<Complex64>> {
    let (planes, rows, cols) = img.dim();
    if planes != PLANES || rows * cols != n2 * n1 {
        return Err(Error::Layout(format!(
            "image of shape {:?} cannot be merged into a {n2}×{n1} channel",
            img.dim()
        )));
    }
    let mut out = Array2::zeros((n2, n1));
    for (k, v) in out.iter_mut().enumerate() {
        let (i, j) = (k / cols, k % cols);
        *v = Complex64::new(img[[0, i, j]] as f64, img[[1, i, j]] as f64);
    }
    Ok(out)
}

/// Complex `rows × cols` matrix formed from the two planes of an image.
pub fn image_to_complex_grid(img: ArrayView3<'_, f32>) -> Array2<Complex64> {
    let (_, rows, cols) = img.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        Complex64::new(img[[0, i, j]] as f64, img[[1, i, j]] as f64)
    })
}

/// Bundle-wide affine map onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f64,
    pub max: f64,
}

impl Normalization {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut seen = false;
        for &v in values {
            if !v.is_finite() {
                return Err(Error::Normalization(format!("non-finite value {v}")));
            }
            min = min.min(v);
            max = max.max(v);
            seen = true;
        }
        if !seen {
            return Err(Error::Normalization("empty bundle".into()));
        }
        if !(max > min) {
            return Err(Error::Normalization(format!("constant-valued bundle ({min})")));
        }
        Ok(Normalization { min, max })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.min) / (self.max - self.min)
    }

    pub fn invert(&self, y: f64) -> f64 {
        self.min + y * (self.max - self.min)
    }

    /// Normalized level of a zero-valued channel entry.
    pub fn zero_level(&self) -> f64 {
        self.apply(0.0)
    }
}

/// Normalizes a set of unnormalized images with constants fitted over all of them.
pub fn normalize_bundle(images: &[Array3<f64>]) -> Result<(Vec<CsiImage>, Normalization)> {
    let norm = Normalization::fit(images.iter().flat_map(|img| img.iter()))?;
    let out = images
        .iter()
        .map(|img| CsiImage {
            values: img.mapv(|v| norm.apply(v) as f32),
            normalized: true,
        })
        .collect();
    Ok((out, norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub template: ArrayTemplate,
    pub r_range: Interval,
    pub theta_range: Interval,
    pub phi_range: Interval,
    pub wavelength: f64,
    pub antenna_spacing: f64,
    pub rayleigh_distance: f64,
    pub normalization: Normalization,
    /// Array layout of each split's payload.
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Array4<f32>,
    pub val: Array4<f32>,
    pub test: Array4<f32>,
    pub normalization: Normalization,
    pub manifest: Manifest,
}

impl DatasetBundle {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let (_, p, h, w) = self.train.dim();
        (p, h, w)
    }

    pub fn denormalize(&self, images: &Array4<f32>) -> Array4<f64> {
        images.mapv(|v| self.normalization.invert(v as f64))
    }
}

/// Generates, normalizes and splits a dataset; a pure function of `config`.
pub fn build_dataset(config: &SamplingConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let total = config.total();
    let side = IMAGE_SIDE;
    let mut raw = Array4::<f64>::zeros((total, PLANES, side, side));
    for (index, mut slot) in raw.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = config.sample_rng(index as u64);
        let geometry = draw(config, &mut rng);
        let h = channel::channel_matrix(&geometry)?;
        slot.assign(&split_entries(&h.entries, side, side)?);
    }
    let norm = Normalization::fit(raw.iter())?;
    let images = raw.mapv(|v| norm.apply(v) as f32);

    let (a, b) = (config.n_train, config.n_train + config.n_val);
    let rayleigh = channel::rayleigh_distance(&config.template.place(config.r_range.lo, 0.0, 0.0))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        n_train: config.n_train,
        n_val: config.n_val,
        n_test: config.n_test,
        template: config.template,
        r_range: config.r_range,
        theta_range: config.theta_range,
        phi_range: config.phi_range,
        wavelength: config.template.wavelength,
        antenna_spacing: config.template.antenna_spacing,
        rayleigh_distance: rayleigh,
        normalization: norm,
        layout: format!("[n, {PLANES}, {side}, {side}] f32 little-endian, row-major; plane 0 = real, plane 1 = imaginary"),
    };
    Ok(DatasetBundle {
        train: images.slice(s![..a, .., .., ..]).to_owned(),
        val: images.slice(s![a..b, .., .., ..]).to_owned(),
        test: images.slice(s![b.., .., .., ..]).to_owned(),
        normalization: norm,
        manifest,
    })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    path.with_file_name(format!("{stem}.manifest.json"))
}

/// Serializes the bundle into the binary layout described in the module docs.
pub fn encode_bundle(bundle: &DatasetBundle) -> Vec<u8> {
    let (planes, height, width) = bundle.image_shape();
    let payload_len = (bundle.train.len() + bundle.val.len() + bundle.test.len()) * 4;
    let mut buf = Vec::with_capacity(HEADER_LEN + payload_len + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for split in [&bundle.train, &bundle.val, &bundle.test] {
        buf.extend_from_slice(&(split.dim().0 as u64).to_le_bytes());
    }
    for dim in [planes, height, width] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&bundle.normalization.min.to_le_bytes());
    buf.extend_from_slice(&bundle.normalization.max.to_le_bytes());
    for split in [&bundle.train, &bundle.val, &bundle.test] {
        for v in split.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&encode_bundle(bundle))?;
    file.sync_all()?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&bundle.manifest)?)?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

fn read_f64(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

/// Header fields of a bundle file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleHeader {
    pub version: u16,
    pub counts: [usize; 3],
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub normalization: Normalization,
}

impl BundleHeader {
    /// Byte offset of element `[index, plane, row, col]` of split `split` (0 = train, 1 = val, 2 = test).
    pub fn element_offset(&self, split: usize, index: usize, plane: usize, row: usize, col: usize) -> usize {
        let image = self.planes * self.height * self.width;
        let before: usize = self.counts[..split].iter().sum();
        let flat = (before + index) * image + (plane * self.height + row) * self.width + col;
        HEADER_LEN + 4 * flat
    }
}

pub fn decode_header(bytes: &[u8], path: &Path) -> Result<BundleHeader> {
    let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN + 4 {
        return Err(corrupt(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let counts = [read_u64(bytes, 6), read_u64(bytes, 14), read_u64(bytes, 22)].map(|c| c as usize);
    let (planes, height, width) = (
        read_u32(bytes, 30) as usize,
        read_u32(bytes, 34) as usize,
        read_u32(bytes, 38) as usize,
    );
    let normalization = Normalization {
        min: read_f64(bytes, 42),
        max: read_f64(bytes, 50),
    };
    Ok(BundleHeader { version, counts, planes, height, width, normalization })
}

pub fn decode_bundle(bytes: &[u8], manifest: Manifest, path: &Path) -> Result<DatasetBundle> {
    let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
    let header = decode_header(bytes, path)?;
    let image = header.planes * header.height * header.width;
    let total: usize = header.counts.iter().sum();
    let expected = HEADER_LEN + total * image * 4 + 4;
    if bytes.len() != expected {
        return Err(corrupt(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let body = &bytes[..expected - 4];
    let stored = read_u32(bytes, expected - 4);
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut offset = HEADER_LEN;
    let mut splits = Vec::with_capacity(3);
    for &count in &header.counts {
        let n = count * image;
        let data: Vec<f32> = body[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        offset += 4 * n;
        let arr = Array4::from_shape_vec((count, header.planes, header.height, header.width), data)
            .map_err(|e| corrupt(e.to_string()))?;
        splits.push(arr);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(DatasetBundle {
        train,
        val,
        test,
        normalization: header.normalization,
        manifest,
    })
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    let bytes = fs::read(path)?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    let bundle = decode_bundle(&bytes, manifest, path)?;
    if bundle.manifest.normalization != bundle.normalization {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "manifest normalization disagrees with file header".into(),
        });
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn toy_config(seed: u64) -> SamplingConfig {
        SamplingConfig {
            seed,
            n_train: 10,
            n_val: 2,
            n_test: 2,
            ..SamplingConfig::default()
        }
    }

    #[test]
    fn degenerate_ranges_are_constant() {
        let mut cfg = toy_config(1);
        cfg.r_range = Interval::new(42.0, 42.0);
        cfg.theta_range = Interval::new(0.25, 0.25);
        cfg.phi_range = Interval::new(-0.1, -0.1);
        let mut rng = cfg.sample_rng(0);
        for _ in 0..20 {
            let g = sample_geometry(&cfg, &mut rng).unwrap();
            assert_eq!((g.range, g.transmit_angle, g.relative_angle), (42.0, 0.25, -0.1));
        }
    }

    #[test]
    fn same_seed_same_geometries() {
        let cfg = toy_config(7);
        let seq = |cfg: &SamplingConfig| {
            let mut rng = cfg.sample_rng(3);
            (0..16).map(|_| sample_geometry(cfg, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(seq(&cfg), seq(&cfg));
        assert_ne!(seq(&cfg), seq(&toy_config(8)));
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let mut cfg = toy_config(1);
        cfg.theta_range = Interval::new(1.0, -1.0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = toy_config(1);
        cfg.r_range = Interval::new(1.0, 10.0);
        assert!(cfg.validate().is_err(), "r below the validity guard");
        let mut cfg = toy_config(1);
        cfg.r_range = Interval::new(10.0, 6000.0);
        assert!(cfg.validate().is_err(), "r beyond the Rayleigh distance");
        let mut cfg = toy_config(1);
        cfg.n_val = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_of_zero_channel_is_zero() {
        let g = SystemGeometry::xl_mimo(10.0, 0.0, 0.0);
        let h = ChannelMatrix { entries: Array2::zeros((1, 1024)), geometry: g };
        let img = split_complex(&h).unwrap();
        assert_eq!(img.values.dim(), (2, 32, 32));
        assert!(img.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_places_indicator_row_major() {
        let g = SystemGeometry::xl_mimo(10.0, 0.0, 0.0);
        let k = 77; // 1-based column index
        let mut entries = Array2::zeros((1, 1024));
        entries[[0, k - 1]] = Complex64::new(1.0, 2.0);
        let img = split_complex(&ChannelMatrix { entries: entries.clone(), geometry: g }).unwrap();
        let flat0: Vec<f32> = img.values.index_axis(Axis(0), 0).iter().copied().collect();
        let flat1: Vec<f32> = img.values.index_axis(Axis(0), 1).iter().copied().collect();
        for idx in 0..1024 {
            let (e0, e1) = if idx == k - 1 { (1.0, 2.0) } else { (0.0, 0.0) };
            assert_eq!((flat0[idx], flat1[idx]), (e0, e1));
        }
        assert_eq!(merge_complex(img.values.view(), 1, 1024).unwrap(), entries);
    }

    #[test]
    fn layout_errors() {
        let g = SystemGeometry { n_bs_antennas: 100, ..SystemGeometry::xl_mimo(10.0, 0.0, 0.0) };
        let h = channel::channel_matrix(&g).unwrap();
        assert!(matches!(split_complex(&h), Err(Error::Layout(_))));
        let img = Array3::<f32>::zeros((2, 32, 32));
        assert!(matches!(merge_complex(img.view(), 2, 1024), Err(Error::Layout(_))));
        let img = Array3::<f32>::zeros((3, 32, 32));
        assert!(merge_complex(img.view(), 1, 1024).is_err());
    }

    #[test]
    fn normalization_cases() {
        let unit = Array3::from_shape_fn((2, 2, 2), |(p, i, _)| ((p + i) % 2) as f64);
        let (out, norm) = normalize_bundle(std::slice::from_ref(&unit)).unwrap();
        assert_eq!((norm.min, norm.max), (0.0, 1.0));
        assert_eq!(out[0].values, unit.mapv(|v| v as f32));

        let img = Array3::from_shape_vec((2, 1, 3), vec![-2.0, 0.0, 2.0, 1.0, -1.0, 2.0]).unwrap();
        let (out, norm) = normalize_bundle(&[img]).unwrap();
        assert_eq!((norm.min, norm.max), (-2.0, 2.0));
        assert_eq!(out[0].values.iter().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0, 0.75, 0.25, 1.0]);
        assert!(out[0].normalized);

        let flat = Array3::from_elem((2, 2, 2), 3.0);
        assert!(matches!(normalize_bundle(&[flat]), Err(Error::Normalization(_))));
        assert!(normalize_bundle(&[]).is_err());
    }

    #[test]
    fn toy_bundle_is_deterministic_and_in_unit_range() {
        let a = build_dataset(&toy_config(5)).unwrap();
        let b = build_dataset(&toy_config(5)).unwrap();
        assert_eq!(encode_bundle(&a), encode_bundle(&b));
        assert_eq!((a.train.dim().0, a.val.dim().0, a.test.dim().0), (10, 2, 2));
        for split in [&a.train, &a.val, &a.test] {
            assert!(split.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
        assert!(a.normalization.min < a.normalization.max);
        assert!(a.manifest.rayleigh_distance > a.manifest.r_range.hi);
        assert!((a.manifest.theta_range.hi - PI / 3.0).abs() < 1e-15);
    }

    #[test]
    fn truncated_and_tampered_files_are_corrupt() {
        let bundle = build_dataset(&toy_config(9)).unwrap();
        let bytes = encode_bundle(&bundle);
        let path = Path::new("mem.nfcs");
        assert!(decode_bundle(&bytes, bundle.manifest.clone(), path).is_ok());
        let err = decode_bundle(&bytes[..bytes.len() - 10], bundle.manifest.clone(), path).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }));
        let err = decode_bundle(&bytes[..20], bundle.manifest.clone(), path).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }));
        let mut tampered = bytes.clone();
        tampered[HEADER_LEN + 17] ^= 0x01;
        let err = decode_bundle(&tampered, bundle.manifest.clone(), path).unwrap_err();
        assert!(err.to_string().contains("checksum"));
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(decode_bundle(&bad_magic, bundle.manifest, path).is_err());
    }
}
