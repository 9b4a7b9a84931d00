//! Similarity-weighted activation heatmaps.
//!
//! Inputs arrive precomputed in a bundle directory: N activation grids, N
//! mask-conditioned content features, and one behavioral vector. Each grid
//! is weighted by the cosine similarity between its mask feature (projected
//! into the behavioral space when dimensions differ) and the behavioral
//! vector, then the grids are summed. Negative weights are kept; rendering
//! min-max normalizes.
//!
//! Bundle directory layout: `meta.json` (N, H, W, d_m, d), `activations.bin`
//! (N x H x W little-endian f32), `mask_features.bin` (N x d_m f32),
//! `behavioral.bin` (d f32).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numkit::{bilinear_upsample, matvec, DenseMatrix, DenseVector};
use crate::{Error, Result};

/// Per-mask activations and features plus the behavioral anchor.
#[derive(Debug, Clone)]
pub struct AttributionBundle {
    pub activations: Vec<DenseMatrix>,
    pub mask_features: Vec<DenseVector>,
    pub behavioral: DenseVector,
}

impl AttributionBundle {
    pub fn new(
        activations: Vec<DenseMatrix>,
        mask_features: Vec<DenseVector>,
        behavioral: DenseVector,
    ) -> Result<Self> {
        if activations.is_empty() || activations.len() != mask_features.len() {
            return Err(Error::InvalidArgument(format!(
                "bundle needs N >= 1 with matching activations ({}) and features ({})",
                activations.len(),
                mask_features.len()
            )));
        }
        let (h, w) = (activations[0].rows(), activations[0].cols());
        if activations.iter().any(|a| a.rows() != h || a.cols() != w) {
            return Err(Error::InvalidArgument(
                "activation grids must share one H x W".into(),
            ));
        }
        let dm = mask_features[0].len();
        if mask_features.iter().any(|f| f.len() != dm) {
            return Err(Error::InvalidArgument(
                "mask features must share one dimension".into(),
            ));
        }
        Ok(Self {
            activations,
            mask_features,
            behavioral,
        })
    }

    pub fn n_masks(&self) -> usize {
        self.activations.len()
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.activations[0].rows(), self.activations[0].cols())
    }

    pub fn feature_dim(&self) -> usize {
        self.mask_features[0].len()
    }
}

/// A weighted activation sum, optionally upsampled for export.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: DenseMatrix,
}

impl Heatmap {
    /// Min-max normalization into [0,1]; constant grids map to all zeros.
    pub fn normalized(&self) -> DenseMatrix {
        let lo = self.grid.min_entry();
        let hi = self.grid.max_entry();
        let mut out = DenseMatrix::zeros(self.grid.rows(), self.grid.cols());
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            for (dst, &src) in out.as_mut_slice().iter_mut().zip(self.grid.as_slice()) {
                *dst = (src - lo) * scale;
            }
        }
        out
    }
}

/// Cosine similarity; rejects zero-norm inputs, for which the value is
/// undefined.
///
/// The denominator is `sqrt(|x|^2 |h|^2)`, which makes the self-similarity
/// exactly 1.0 (sqrt of a rounded square returns the root exactly).
pub fn cosine_similarity(x: &DenseVector, h: &DenseVector) -> Result<f64> {
    if x.len() != h.len() {
        return Err(Error::dim(
            "cosine_similarity",
            format!("lengths {} and {}", x.len(), h.len()),
        ));
    }
    let nx = x.norm_sq();
    let nh = h.norm_sq();
    if nx == 0.0 || nh == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    Ok(x.dot(h) / (nx * nh).sqrt())
}

/// Weight every activation grid by the cosine between its (projected) mask
/// feature and the behavioral vector, and sum. `projector` (`d x d_m`) is
/// required when the feature and behavioral dimensions differ.
pub fn compute_heatmap(
    bundle: &AttributionBundle,
    projector: Option<&DenseMatrix>,
) -> Result<Heatmap> {
    let d = bundle.behavioral.len();
    let dm = bundle.feature_dim();
    if dm != d && projector.is_none() {
        return Err(Error::dim(
            "compute_heatmap",
            format!("features have dim {dm}, behavioral {d}: a projector is required"),
        ));
    }
    if let Some(p) = projector {
        if p.rows() != d || p.cols() != dm {
            return Err(Error::dim(
                "compute_heatmap",
                format!("projector is {}x{}, need {d}x{dm}", p.rows(), p.cols()),
            ));
        }
    }
    let (h, w) = bundle.grid_size();
    let mut grid = DenseMatrix::zeros(h, w);
    for (a, x) in bundle.activations.iter().zip(&bundle.mask_features) {
        let weight = match projector {
            Some(p) => cosine_similarity(&matvec(p, x)?, &bundle.behavioral)?,
            None => cosine_similarity(x, &bundle.behavioral)?,
        };
        for (dst, &src) in grid.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *dst += weight * src;
        }
    }
    Ok(Heatmap { grid })
}

/// Output encoding for [`export_heatmap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    /// Binary 8-bit PGM of the min-max normalized grid.
    Pgm,
    /// Raw values, one row per line.
    Csv,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(HeatmapFormat::Pgm),
            "csv" => Ok(HeatmapFormat::Csv),
            other => Err(Error::InvalidArgument(format!(
                "unknown heatmap format `{other}` (expected pgm or csv)"
            ))),
        }
    }
}

/// Write a heatmap, optionally bilinearly upsampled to `export_size`.
pub fn export_heatmap(
    heatmap: &Heatmap,
    path: impl AsRef<Path>,
    format: HeatmapFormat,
    export_size: Option<(usize, usize)>,
) -> Result<()> {
    let path = path.as_ref();
    let grid = match export_size {
        Some((h, w)) => bilinear_upsample(&heatmap.grid, h, w)?,
        None => heatmap.grid.clone(),
    };
    let scaled = Heatmap { grid };
    match format {
        HeatmapFormat::Pgm => {
            let norm = scaled.normalized();
            let mut bytes = format!("P5\n{} {}\n255\n", norm.cols(), norm.rows()).into_bytes();
            bytes.extend(
                norm.as_slice()
                    .iter()
                    .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
            );
            fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
        }
        HeatmapFormat::Csv => {
            let mut out = String::new();
            for r in 0..scaled.grid.rows() {
                let row: Vec<String> =
                    scaled.grid.row(r).iter().map(|v| format!("{v}")).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
            fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
        }
    }
}

/// Read back a CSV heatmap (round-trip support for exported grids).
pub fn load_heatmap_csv(path: impl AsRef<Path>) -> Result<Heatmap> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(p.clone(), e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| Error::Parse {
            path: p.clone(),
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(Heatmap {
        grid: DenseMatrix::from_rows(&rows)?,
    })
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    n: usize,
    h: usize,
    w: usize,
    d_m: usize,
    d: usize,
}

/// Load `meta.json` + the three `.bin` files from a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<AttributionBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: BundleMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?,
    )
    .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?;

    let read_f32 = |name: &str, expect: usize| -> Result<Vec<f64>> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() != expect * 4 {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "expected {} f32 values, file holds {}",
                    expect,
                    bytes.len() / 4
                ),
            ));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };

    let act = read_f32("activations.bin", meta.n * meta.h * meta.w)?;
    let feats = read_f32("mask_features.bin", meta.n * meta.d_m)?;
    let beh = read_f32("behavioral.bin", meta.d)?;

    let activations = (0..meta.n)
        .map(|l| {
            DenseMatrix::from_data(
                meta.h,
                meta.w,
                act[l * meta.h * meta.w..(l + 1) * meta.h * meta.w].to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mask_features = (0..meta.n)
        .map(|l| DenseVector::from_vec(feats[l * meta.d_m..(l + 1) * meta.d_m].to_vec()))
        .collect();
    AttributionBundle::new(activations, mask_features, DenseVector::from_vec(beh))
}

/// Write a bundle directory (used by the synthetic pipeline and tests).
pub fn save_bundle(bundle: &AttributionBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (h, w) = bundle.grid_size();
    let meta = BundleMeta {
        n: bundle.n_masks(),
        h,
        w,
        d_m: bundle.feature_dim(),
        d: bundle.behavioral.len(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::format(meta_path.display().to_string(), e.to_string()))?,
    )
    .map_err(|e| Error::io(meta_path.display().to_string(), e))?;

    let write_f32 = |name: &str, values: Vec<f64>| -> Result<()> {
        let path = dir.join(name);
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write_f32(
        "activations.bin",
        bundle
            .activations
            .iter()
            .flat_map(|a| a.as_slice().iter().copied())
            .collect(),
    )?;
    write_f32(
        "mask_features.bin",
        bundle
            .mask_features
            .iter()
            .flat_map(|f| f.as_slice().iter().copied())
            .collect(),
    )?;
    write_f32("behavioral.bin", bundle.behavioral.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::SeededRng;

    #[test]
    fn cosine_fixed_cases() {
        let a = DenseVector::from_vec(vec![1.0, 1.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);

        let x = DenseVector::from_vec(vec![1.0, 0.0]);
        let y = DenseVector::from_vec(vec![0.0, 2.0]);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);

        let want = std::f64::consts::FRAC_1_SQRT_2;
        assert!((cosine_similarity(&a, &x).unwrap() - want).abs() < 1e-12);

        assert!(cosine_similarity(&x, &DenseVector::zeros(2)).is_err());
    }

    #[test]
    fn single_mask_identity() {
        let a = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let x = DenseVector::from_vec(vec![0.4, -0.3]);
        let bundle =
            AttributionBundle::new(vec![a.clone()], vec![x.clone()], x.clone()).unwrap();
        let m = compute_heatmap(&bundle, None).unwrap();
        for (got, want) in m.grid.as_slice().iter().zip(a.as_slice()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn worked_two_mask_example() {
        // Weights +0.5 and -0.5 on disjoint single-cell grids.
        let a1 = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let a2 = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
        // cos(x1, h) = 0.5 and cos(x2, h) = -0.5 with h = (1, 0).
        let x1 = DenseVector::from_vec(vec![0.5, 0.75f64.sqrt()]);
        let x2 = DenseVector::from_vec(vec![-0.5, 0.75f64.sqrt()]);
        let h = DenseVector::from_vec(vec![1.0, 0.0]);
        let bundle = AttributionBundle::new(vec![a1, a2], vec![x1, x2], h).unwrap();
        let m = compute_heatmap(&bundle, None).unwrap();
        let want = [0.5, 0.0, 0.0, -0.5];
        for (got, want) in m.grid.as_slice().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn permutation_and_scale_invariance() {
        let mut rng = SeededRng::new(8);
        let grids: Vec<DenseMatrix> = (0..4)
            .map(|_| {
                DenseMatrix::from_rows(&[
                    vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                    vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)],
                ])
                .unwrap()
            })
            .collect();
        let feats: Vec<DenseVector> = (0..4)
            .map(|_| {
                DenseVector::from_vec(vec![
                    rng.uniform(0.1, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                ])
            })
            .collect();
        let h = DenseVector::from_vec(vec![0.3, -0.7, 0.2]);

        let base = compute_heatmap(
            &AttributionBundle::new(grids.clone(), feats.clone(), h.clone()).unwrap(),
            None,
        )
        .unwrap();

        // Reversed mask order.
        let rev = compute_heatmap(
            &AttributionBundle::new(
                grids.iter().rev().cloned().collect(),
                feats.iter().rev().cloned().collect(),
                h.clone(),
            )
            .unwrap(),
            None,
        )
        .unwrap();
        for (a, b) in base.grid.as_slice().iter().zip(rev.grid.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Positive rescaling of features and behavioral vector.
        let scaled_feats: Vec<DenseVector> = feats
            .iter()
            .map(|f| {
                let mut s = f.clone();
                s.scale(7.3);
                s
            })
            .collect();
        let mut scaled_h = h.clone();
        scaled_h.scale(0.2);
        let scaled = compute_heatmap(
            &AttributionBundle::new(grids, scaled_feats, scaled_h).unwrap(),
            None,
        )
        .unwrap();
        for (a, b) in base.grid.as_slice().iter().zip(scaled.grid.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projector_required_when_dims_differ() {
        let a = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        let x = DenseVector::from_vec(vec![1.0, 2.0, 3.0]);
        let h = DenseVector::from_vec(vec![1.0, 0.0]);
        let bundle = AttributionBundle::new(vec![a], vec![x], h).unwrap();
        assert!(compute_heatmap(&bundle, None).is_err());

        let proj =
            DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert!(compute_heatmap(&bundle, Some(&proj)).is_ok());
    }

    #[test]
    fn pgm_export_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let m = Heatmap {
            grid: DenseMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        };
        let path = dir.path().join("m.pgm");
        export_heatmap(&m, &path, HeatmapFormat::Pgm, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0u8, 255u8]);

        // Constant grids map to zero.
        let c = Heatmap {
            grid: DenseMatrix::from_rows(&[vec![4.2, 4.2]]).unwrap(),
        };
        export_heatmap(&c, &path, HeatmapFormat::Pgm, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 2..], &[0u8, 0u8]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(77);
        let grid = DenseMatrix::from_rows(&[
            vec![rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)],
            vec![rng.uniform(-2.0, 2.0), 1.0 / 3.0],
        ])
        .unwrap();
        let m = Heatmap { grid };
        let path = dir.path().join("m.csv");
        export_heatmap(&m, &path, HeatmapFormat::Csv, None).unwrap();
        let back = load_heatmap_csv(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bundle_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(5);
        let grids = vec![
            DenseMatrix::from_rows(&[vec![0.25, -1.5], vec![2.0, 0.0]]).unwrap(),
            DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.5, -0.5]]).unwrap(),
        ];
        let feats = vec![
            DenseVector::from_vec((0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
            DenseVector::from_vec((0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()),
        ];
        let h = DenseVector::from_vec(vec![0.5, 0.25]);
        let bundle = AttributionBundle::new(grids, feats, h).unwrap();
        save_bundle(&bundle, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.n_masks(), 2);
        assert_eq!(loaded.grid_size(), (2, 2));
        assert_eq!(loaded.feature_dim(), 3);
        assert_eq!(loaded.behavioral, bundle.behavioral);
    }
}
