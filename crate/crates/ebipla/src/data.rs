//! Synthetic dataset generation (rotated Swiss roll) and dataset persistence.
//!
//! The Swiss roll is sampled uniformly in arc length along the spiral
//! `x(t) = (1/8) [t cos t, t sin t]`, jittered with `N(0, noise_std^2 I)`, and
//! mapped to the ambient space by a fixed matrix with orthonormal rows.
//!
//! On-disk format: a flat little-endian f64 binary file plus a JSON sidecar
//! header at `<path>.json` (schema-versioned). A CSV export exists for
//! inspection.

use crate::error::{Error, Result};
use crate::rng::{NoiseKey, NoiseRole, NoiseStream};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Provenance carried alongside the sample matrix.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub params: serde_json::Value,
}

impl DatasetMeta {
    pub fn manual() -> Self {
        Self {
            generator: "manual".into(),
            seed: 0,
            params: serde_json::Value::Null,
        }
    }
}

/// `M x d_y` observation matrix with optional ground-truth latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    m: usize,
    d_y: usize,
    latents: Option<(Vec<f64>, usize)>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(y: Vec<f64>, m: usize, d_y: usize, meta: DatasetMeta) -> Result<Self> {
        if m == 0 || d_y == 0 || y.len() != m * d_y {
            return Err(Error::Config(format!(
                "dataset shape mismatch: {} values for {m} x {d_y}",
                y.len()
            )));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "dataset".into(),
            });
        }
        Ok(Self {
            y,
            m,
            d_y,
            latents: None,
            meta,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        let d_y = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut y = Vec::with_capacity(m * d_y);
        for r in &rows {
            if r.len() != d_y {
                return Err(Error::Config("ragged dataset rows".into()));
            }
            y.extend_from_slice(r);
        }
        Self::new(y, m, d_y, DatasetMeta::manual())
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn dim(&self) -> usize {
        self.d_y
    }

    #[inline(always)]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.y[i * self.d_y..(i + 1) * self.d_y]
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn latents(&self) -> Option<(&[f64], usize)> {
        self.latents.as_ref().map(|(v, d)| (v.as_slice(), *d))
    }

    pub fn with_latents(mut self, latents: Vec<f64>, d: usize) -> Result<Self> {
        if latents.len() != self.m * d {
            return Err(Error::Config("latent shape mismatch".into()));
        }
        self.latents = Some((latents, d));
        Ok(self)
    }

    /// Per-coordinate mean of the observations.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.d_y];
        for i in 0..self.m {
            for (mu, v) in mean.iter_mut().zip(self.row(i)) {
                *mu += v / self.m as f64;
            }
        }
        mean
    }
}

/// Generator settings for the rotated Swiss roll.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SwissRollSpec {
    pub m: usize,
    pub t_min: f64,
    pub t_max: f64,
    /// Latent jitter standard deviation (the variance 0.01 case is 0.1).
    pub noise_std: f64,
    /// 2x2 map to the ambient space; rows must be orthonormal to 1e-12.
    pub rotation: [[f64; 2]; 2],
    pub seed: u64,
}

impl SwissRollSpec {
    /// Rotation by `angle` radians.
    pub fn rotation_matrix(angle: f64) -> [[f64; 2]; 2] {
        let (s, c) = angle.sin_cos();
        [[c, -s], [s, c]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("swiss roll: m must be >= 1".into()));
        }
        if !(self.t_max > self.t_min) || !self.t_min.is_finite() || !self.t_max.is_finite() {
            return Err(Error::Config(format!(
                "swiss roll: degenerate t range [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("swiss roll: noise_std must be >= 0".into()));
        }
        let r = &self.rotation;
        let dots = [
            r[0][0] * r[0][0] + r[0][1] * r[0][1] - 1.0,
            r[1][0] * r[1][0] + r[1][1] * r[1][1] - 1.0,
            r[0][0] * r[1][0] + r[0][1] * r[1][1],
        ];
        if dots.iter().any(|d| d.abs() > 1e-12) {
            return Err(Error::Config(
                "swiss roll: rotation rows are not orthonormal to 1e-12".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SwissRollSpec {
    fn default() -> Self {
        Self {
            m: 10_000,
            t_min: 1.5 * std::f64::consts::PI,
            t_max: 4.5 * std::f64::consts::PI,
            noise_std: 0.1,
            rotation: Self::rotation_matrix(std::f64::consts::FRAC_PI_4),
            seed: 0,
        }
    }
}

/// Arc length of the spiral `(1/8)(t cos t, t sin t)` from 0 to `t`:
/// `s(t) = (1/8) \int_0^t sqrt(1 + u^2) du = (t sqrt(1+t^2) + asinh t) / 16`.
pub fn spiral_arc_length(t: f64) -> f64 {
    (t * (1.0 + t * t).sqrt() + t.asinh()) / 16.0
}

/// Invert `spiral_arc_length` on `[t_lo, t_hi]` by bisection to 1e-12.
fn invert_arc_length(s: f64, mut lo: f64, mut hi: f64) -> f64 {
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if spiral_arc_length(mid) < s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Point on the unrotated spiral at parameter `t`.
pub fn spiral_point(t: f64) -> [f64; 2] {
    [t * t.cos() / 8.0, t * t.sin() / 8.0]
}

/// Draw the rotated Swiss roll dataset. Deterministic per seed; latents are
/// stored for diagnostics.
pub fn sample_swiss_roll(spec: &SwissRollSpec) -> Result<Dataset> {
    spec.validate()?;
    let stream = NoiseStream::new(spec.seed);
    let s_lo = spiral_arc_length(spec.t_min);
    let s_hi = spiral_arc_length(spec.t_max);
    let mut y = Vec::with_capacity(spec.m * 2);
    let mut latents = Vec::with_capacity(spec.m * 2);
    let mut eps = [0.0f64; 2];
    for i in 0..spec.m {
        let u = stream.uniform(NoiseKey::new(0, NoiseRole::DataArcLength, i as u64, 0), 0);
        let t = invert_arc_length(s_lo + u * (s_hi - s_lo), spec.t_min, spec.t_max);
        let p = spiral_point(t);
        stream.fill_gaussian(NoiseKey::new(0, NoiseRole::DataNoise, i as u64, 0), &mut eps);
        let lat = [
            p[0] + spec.noise_std * eps[0],
            p[1] + spec.noise_std * eps[1],
        ];
        latents.extend_from_slice(&lat);
        let r = &spec.rotation;
        y.push(r[0][0] * lat[0] + r[0][1] * lat[1]);
        y.push(r[1][0] * lat[0] + r[1][1] * lat[1]);
    }
    let meta = DatasetMeta {
        generator: "swiss_roll".into(),
        seed: spec.seed,
        params: serde_json::to_value(spec)?,
    };
    Dataset::new(y, spec.m, 2, meta)?.with_latents(latents, 2)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema_version: u32,
    kind: String,
    m: usize,
    d_y: usize,
    d_latent: Option<usize>,
    meta: DatasetMeta,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

pub(crate) fn write_f64_le(path: &Path, chunks: &[&[f64]]) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::with_capacity(chunks.iter().map(|c| c.len() * 8).sum());
    for chunk in chunks {
        for v in *chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub(crate) fn read_f64_le(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::schema(
            path.display().to_string(),
            format!(
                "expected {} bytes ({} f64 values), found {}",
                expected * 8,
                expected,
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write the binary matrix to `path` and the JSON header to `path.json`.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        kind: "dataset".into(),
        m: ds.m,
        d_y: ds.d_y,
        d_latent: ds.latents.as_ref().map(|(_, d)| *d),
        meta: ds.meta.clone(),
    };
    let mut chunks: Vec<&[f64]> = vec![&ds.y];
    if let Some((lat, _)) = &ds.latents {
        chunks.push(lat);
    }
    write_f64_le(path, &chunks)?;
    let sidecar = sidecar_path(path);
    std::fs::write(&sidecar, serde_json::to_string_pretty(&header)?)
        .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`]; truncated or mismatched files
/// produce schema errors, never panics.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar)
        .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    let header: DatasetHeader = serde_json::from_str(&text)
        .map_err(|e| Error::schema(sidecar.display().to_string(), e.to_string()))?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::schema(
            sidecar.display().to_string(),
            format!(
                "schema version {} unsupported (expected {DATASET_SCHEMA_VERSION})",
                header.schema_version
            ),
        ));
    }
    if header.kind != "dataset" {
        return Err(Error::schema(
            sidecar.display().to_string(),
            format!("kind `{}` is not a dataset", header.kind),
        ));
    }
    let lat_len = header.d_latent.map(|d| header.m * d).unwrap_or(0);
    let values = read_f64_le(path, header.m * header.d_y + lat_len)?;
    let (y, lat) = values.split_at(header.m * header.d_y);
    let ds = Dataset::new(y.to_vec(), header.m, header.d_y, header.meta)?;
    match header.d_latent {
        Some(d) => ds.with_latents(lat.to_vec(), d),
        None => Ok(ds),
    }
}

/// Human-readable export: one row per observation, `y0,...,yk` columns.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for c in 0..ds.d_y {
        if c > 0 {
            out.push(',');
        }
        out.push_str(&format!("y{c}"));
    }
    out.push('\n');
    for i in 0..ds.m {
        let row = ds.row(i);
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(m: usize, noise: f64, seed: u64) -> SwissRollSpec {
        SwissRollSpec {
            m,
            noise_std: noise,
            seed,
            ..SwissRollSpec::default()
        }
    }

    #[test]
    fn spiral_point_examples() {
        // t = pi: (1/8)(pi cos pi, pi sin pi) = (-pi/8, ~0).
        let p = spiral_point(std::f64::consts::PI);
        assert!((p[0] + std::f64::consts::PI / 8.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);
        let origin = spiral_point(0.0);
        assert_eq!(origin, [0.0, 0.0]);
    }

    #[test]
    fn arc_length_positions_are_uniform() {
        // KS statistic of s(t) against the uniform law on [s_lo, s_hi].
        let spec = small_spec(100_000, 0.0, 7);
        let ds = sample_swiss_roll(&spec).unwrap();
        let (lat, d) = ds.latents().unwrap();
        assert_eq!(d, 2);
        let s_lo = spiral_arc_length(spec.t_min);
        let s_hi = spiral_arc_length(spec.t_max);
        let mut us: Vec<f64> = (0..spec.m)
            .map(|i| {
                let (x, y) = (lat[2 * i], lat[2 * i + 1]);
                let t = (64.0 * (x * x + y * y)).sqrt(); // radius = t/8 exactly at zero noise
                (spiral_arc_length(t) - s_lo) / (s_hi - s_lo)
            })
            .collect();
        us.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = us.len() as f64;
        let ks = us
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let hi = ((i + 1) as f64 / n - u).abs();
                let lo = (u - i as f64 / n).abs();
                hi.max(lo)
            })
            .fold(0.0f64, f64::max);
        assert!(ks < 0.01, "KS = {ks}");
    }

    #[test]
    fn rotation_preserves_norms() {
        let spec = small_spec(500, 0.1, 3);
        let ds = sample_swiss_roll(&spec).unwrap();
        let (lat, _) = ds.latents().unwrap();
        for i in 0..spec.m {
            let ny = ds.row(i).iter().map(|v| v * v).sum::<f64>();
            let nl = lat[2 * i] * lat[2 * i] + lat[2 * i + 1] * lat[2 * i + 1];
            assert!((ny - nl).abs() < 1e-10, "row {i}: {ny} vs {nl}");
        }
    }

    #[test]
    fn zero_noise_points_lie_on_spiral() {
        let spec = small_spec(300, 0.0, 5);
        let ds = sample_swiss_roll(&spec).unwrap();
        // Undo the rotation, seed on a dense t-grid, then refine the nearest
        // spiral point locally (a pure grid cannot reach 1e-9).
        let r = spec.rotation;
        let dist_sq = |t: f64, lx: f64, ly: f64| {
            let p = spiral_point(t);
            (p[0] - lx) * (p[0] - lx) + (p[1] - ly) * (p[1] - ly)
        };
        for i in 0..spec.m {
            let y = ds.row(i);
            let lx = r[0][0] * y[0] + r[1][0] * y[1];
            let ly = r[0][1] * y[0] + r[1][1] * y[1];
            let grid = 20_000;
            let width = (spec.t_max - spec.t_min) / grid as f64;
            let mut best = (f64::INFINITY, spec.t_min);
            for g in 0..=grid {
                let t = spec.t_min + width * g as f64;
                let dd = dist_sq(t, lx, ly);
                if dd < best.0 {
                    best = (dd, t);
                }
            }
            let (mut lo, mut hi) = (best.1 - width, best.1 + width);
            for _ in 0..200 {
                let m1 = lo + (hi - lo) / 3.0;
                let m2 = hi - (hi - lo) / 3.0;
                if dist_sq(m1, lx, ly) < dist_sq(m2, lx, ly) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let residual = dist_sq(0.5 * (lo + hi), lx, ly).sqrt();
            assert!(residual < 1e-9, "row {i}: residual {residual}");
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = sample_swiss_roll(&small_spec(50, 0.1, 11)).unwrap();
        let b = sample_swiss_roll(&small_spec(50, 0.1, 11)).unwrap();
        assert_eq!(a.values(), b.values());
        let c = sample_swiss_roll(&small_spec(50, 0.1, 12)).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn degenerate_range_and_bad_rotation_rejected() {
        let mut spec = small_spec(10, 0.1, 0);
        spec.t_max = spec.t_min;
        assert!(sample_swiss_roll(&spec).is_err());
        let mut spec2 = small_spec(10, 0.1, 0);
        spec2.rotation = [[1.0, 0.0], [0.5, 1.0]];
        assert!(spec2.validate().is_err());
    }

    #[test]
    fn save_load_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roll.bin");
        let ds = sample_swiss_roll(&small_spec(64, 0.1, 2)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds.values(), loaded.values());
        assert_eq!(ds.latents(), loaded.latents());
        assert_eq!(ds.meta, loaded.meta);
    }

    #[test]
    fn truncated_file_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roll.bin");
        let ds = sample_swiss_roll(&small_spec(16, 0.1, 2)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match load_dataset(&path) {
            Err(Error::Schema { .. }) => {}
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn csv_export_runs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roll.csv");
        let ds = sample_swiss_roll(&small_spec(8, 0.1, 2)).unwrap();
        export_csv(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("y0,y1\n"));
        assert_eq!(text.lines().count(), 9);
    }
}
