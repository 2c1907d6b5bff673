//! WebAssembly bindings for the static page in `www/`.
//!
//! Every export takes plain numbers and returns numbers or flat `f32`
//! buffers (row-major), so the page needs no framework.

use ndarray::{s, Array4};
use nfcsi::channel::{self, SystemGeometry};
use nfcsi::dataset::{split_complex, Normalization, IMAGE_SIDE};
use nfcsi::evaluation::precoding_snr_probe;
use nfcsi::model::NonLocalBlock;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Side of the downsampled grid the Non-Local block attends over.
pub const ATTENTION_SIDE: usize = IMAGE_SIDE / 2;

fn single_user(n_bs: usize, wavelength: f64, range: f64, angle: f64, relative_angle: f64) -> SystemGeometry {
    SystemGeometry {
        n_bs_antennas: n_bs,
        n_user_antennas: 1,
        antenna_spacing: wavelength / 2.0,
        wavelength,
        range,
        transmit_angle: angle,
        relative_angle,
    }
}

fn text<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Near-field boundary `2D²/λ` of a half-wavelength ULA with `n_bs` antennas.
#[wasm_bindgen]
pub fn rayleigh_distance(n_bs: usize, wavelength: f64) -> Result<f64, String> {
    let probe = single_user(n_bs, wavelength, 0.0, 0.0, 0.0);
    channel::rayleigh_distance(&SystemGeometry { range: 2.0 * probe.min_range(), ..probe }).map_err(text)
}

/// Smallest range the channel model accepts, `(N1 + 1)·d`.
#[wasm_bindgen]
pub fn min_range(n_bs: usize, wavelength: f64) -> f64 {
    single_user(n_bs, wavelength, 1.0, 0.0, 0.0).min_range()
}

/// Normalized gain `|hᴴa|² / (‖h‖²‖a‖²)` of a matched filter `a` focused at
/// `(focus_range, focus_angle)`, sampled on `rows` log-spaced ranges in
/// `[r_min, r_max]` by `cols` angles in `[-span, span]`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn focusing_field(
    n_bs: usize,
    wavelength: f64,
    focus_range: f64,
    focus_angle: f64,
    r_min: f64,
    r_max: f64,
    span: f64,
    rows: usize,
    cols: usize,
) -> Result<Vec<f32>, String> {
    if rows < 2 || cols < 2 || !(r_min > 0.0 && r_max > r_min) {
        return Err("need at least a 2×2 grid and 0 < r_min < r_max".into());
    }
    let focus = channel::channel_matrix(&single_user(n_bs, wavelength, focus_range, focus_angle, 0.0)).map_err(text)?;
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let r = r_min * (r_max / r_min).powf(i as f64 / (rows - 1) as f64);
        for j in 0..cols {
            let angle = -span + 2.0 * span * j as f64 / (cols - 1) as f64;
            let h = channel::channel_matrix(&single_user(n_bs, wavelength, r, angle, 0.0)).map_err(text)?;
            out.push(precoding_snr_probe(&h.entries, &focus.entries).map_err(text)? as f32);
        }
    }
    Ok(out)
}

fn csi_input(range: f64, angle: f64, relative_angle: f64) -> Result<Array4<f32>, String> {
    let geometry = SystemGeometry::xl_mimo(range, angle, relative_angle);
    let image = split_complex(&channel::channel_matrix(&geometry).map_err(text)?).map_err(text)?;
    let values: Vec<f64> = image.values.iter().map(|&v| v as f64).collect();
    let norm = Normalization::fit(values.iter()).map_err(text)?;
    let normalized = image.values.mapv(|v| norm.apply(v as f64) as f32);
    Ok(normalized.insert_axis(ndarray::Axis(0)))
}

/// Real-part plane of one normalized 32×32 CSI image (1024-antenna BS, single user).
#[wasm_bindgen]
pub fn csi_real_plane(range: f64, angle: f64, relative_angle: f64) -> Result<Vec<f32>, String> {
    let x = csi_input(range, angle, relative_angle)?;
    Ok(x.slice(s![0, 0, .., ..]).iter().copied().collect())
}

/// Attention weights of query position `query` over the 16×16 downsampled
/// grid, from a Non-Local block initialized with `seed` applied to the CSI image.
#[wasm_bindgen]
pub fn attention_row(range: f64, angle: f64, relative_angle: f64, seed: u32, query: usize) -> Result<Vec<f32>, String> {
    let positions = ATTENTION_SIDE * ATTENTION_SIDE;
    if query >= positions {
        return Err(format!("query {query} outside the {positions} attention positions"));
    }
    let x = csi_input(range, angle, relative_angle)?;
    let block = NonLocalBlock::<f32>::new(2, 16, 8, &mut ChaCha8Rng::seed_from_u64(seed as u64));
    let attention = block.attention_map(&x);
    Ok(attention.slice(s![0, query, ..]).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rayleigh_distance_of_default_array() {
        assert!((rayleigh_distance(1024, 0.01).unwrap() - 5232.645).abs() < 1e-6);
        assert!((min_range(1024, 0.01) - 5.125).abs() < 1e-12);
        assert!(rayleigh_distance(0, 0.01).is_err());
    }

    #[test]
    fn focusing_field_peaks_at_the_focus() {
        let (rows, cols) = (9, 11);
        let field = focusing_field(64, 0.01, 1.0, 0.0, 0.5, 2.0, 0.6, rows, cols).unwrap();
        assert_eq!(field.len(), rows * cols);
        assert!(field.iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
        // Row 4 of 9 log-spaced rows over [0.5, 2] is r = 1; column 5 of 11 is angle 0.
        let peak = field[4 * cols + 5];
        assert!((peak - 1.0).abs() < 1e-5, "peak {peak}");
        assert!(field.iter().all(|&v| v <= peak + 1e-6));
        assert!(focusing_field(64, 0.01, 1.0, 0.0, 2.0, 1.0, 0.6, 4, 4).is_err());
    }

    #[test]
    fn csi_plane_is_normalized() {
        let plane = csi_real_plane(20.0, 0.3, 0.1).unwrap();
        assert_eq!(plane.len(), IMAGE_SIDE * IMAGE_SIDE);
        assert!(plane.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let row = attention_row(20.0, 0.3, 0.1, 7, 37).unwrap();
        assert_eq!(row.len(), ATTENTION_SIDE * ATTENTION_SIDE);
        let total: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert_eq!(row, attention_row(20.0, 0.3, 0.1, 7, 37).unwrap());
        assert!(attention_row(20.0, 0.3, 0.1, 7, 256).is_err());
        assert!(attention_row(1.0, 0.3, 0.1, 7, 0).is_err());
    }
}
