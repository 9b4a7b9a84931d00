//! Per-modality content feature matrices and their on-disk formats.
//!
//! Binary layout: magic `BEFA`, u8 version (1), u8 dtype (0 = f32),
//! u32 LE item count, u32 LE feature dim, item-major f32 LE payload, then one
//! external item id per line as a UTF-8 trailer. CSV alternative has header
//! `item,f0,...,f{d-1}`. Loaders align rows to the internal item indices of
//! an [`IndexSpace`]; ids present in the file but absent from the space are
//! ignored, so feature files may cover a superset (e.g. pre-filter exports).

use std::fs;
use std::path::Path;

use crate::numkit::{DenseMatrix, DenseVector};
use crate::{Error, Result};

use super::IndexSpace;

const MAGIC: &[u8; 4] = b"BEFA";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;

/// Content features: one `dim`-length row per internal item index.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    modality: String,
    data: DenseMatrix,
}

impl FeatureMatrix {
    pub fn new(modality: impl Into<String>, data: DenseMatrix) -> Result<Self> {
        if !data.all_finite() {
            return Err(Error::InvalidArgument(
                "feature matrix contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            modality: modality.into(),
            data,
        })
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn n_items(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, item: u32) -> &[f64] {
        self.data.row(item as usize)
    }

    pub fn row_vector(&self, item: u32) -> DenseVector {
        self.data.row_vector(item as usize)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.data
    }

    pub fn matrix_mut(&mut self) -> &mut DenseMatrix {
        &mut self.data
    }
}

/// Write the binary feature format, rows in internal index order.
pub fn save_features_binary(
    features: &FeatureMatrix,
    space: &IndexSpace,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if features.n_items() != space.n_items() {
        return Err(Error::dim(
            "save_features_binary",
            format!(
                "{} feature rows for {} items",
                features.n_items(),
                space.n_items()
            ),
        ));
    }
    let n = features.n_items() as u32;
    let d = features.dim() as u32;
    let mut bytes = Vec::with_capacity(14 + features.n_items() * features.dim() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.push(DTYPE_F32);
    bytes.extend_from_slice(&n.to_le_bytes());
    bytes.extend_from_slice(&d.to_le_bytes());
    for &v in features.data.as_slice() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for id in space.item_ids() {
        bytes.extend_from_slice(id.as_bytes());
        bytes.push(b'\n');
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the CSV alternative (`item,f0,...`), rows in internal index order.
pub fn save_features_csv(
    features: &FeatureMatrix,
    space: &IndexSpace,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if features.n_items() != space.n_items() {
        return Err(Error::dim(
            "save_features_csv",
            format!(
                "{} feature rows for {} items",
                features.n_items(),
                space.n_items()
            ),
        ));
    }
    let mut out = String::from("item");
    for j in 0..features.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (idx, id) in space.item_ids().iter().enumerate() {
        out.push_str(id);
        for &v in features.row(idx as u32) {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read only the feature dimension from a file header.
pub fn peek_feature_dim(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.starts_with(MAGIC) {
        if bytes.len() < 14 {
            return Err(Error::format(path.display().to_string(), "truncated header"));
        }
        Ok(u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::format(path.display().to_string(), "not UTF-8"))?;
        let header = text
            .lines()
            .next()
            .ok_or_else(|| Error::format(path.display().to_string(), "empty file"))?;
        Ok(header.split(',').count().saturating_sub(1))
    }
}

/// Load features for every item in `space`, from either format (sniffed by
/// magic). Rows come back in internal index order as f64.
pub fn load_features(
    path: impl AsRef<Path>,
    modality: impl Into<String>,
    expected_dim: usize,
    space: &IndexSpace,
) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (ids, dim, rows) = if bytes.starts_with(MAGIC) {
        parse_binary(&bytes, path)?
    } else {
        parse_csv(&bytes, path)?
    };
    if dim != expected_dim {
        return Err(Error::format(
            path.display().to_string(),
            format!("feature dim {dim} but expected {expected_dim}"),
        ));
    }

    let mut by_id = std::collections::HashMap::with_capacity(ids.len());
    for (idx, id) in ids.iter().enumerate() {
        by_id.insert(id.as_str(), idx);
    }

    let mut data = DenseMatrix::zeros(space.n_items(), dim);
    for (internal, id) in space.item_ids().iter().enumerate() {
        let Some(&src) = by_id.get(id.as_str()) else {
            return Err(Error::format(
                path.display().to_string(),
                format!("missing feature row for item `{id}`"),
            ));
        };
        let row = &rows[src * dim..(src + 1) * dim];
        if let Some(bad) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                path.display().to_string(),
                format!("non-finite value in row for item `{id}` (column {bad})"),
            ));
        }
        data.row_mut(internal).copy_from_slice(row);
    }
    FeatureMatrix::new(modality, data)
}

type ParsedRows = (Vec<String>, usize, Vec<f64>);

fn parse_binary(bytes: &[u8], path: &Path) -> Result<ParsedRows> {
    let p = path.display().to_string();
    if bytes.len() < 14 {
        return Err(Error::format(p, "truncated header"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(p, format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::format(p, format!("unsupported dtype {}", bytes[5])));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let payload = 14 + n * dim * 4;
    if bytes.len() < payload {
        return Err(Error::format(p, "truncated payload"));
    }
    let mut rows = Vec::with_capacity(n * dim);
    for chunk in bytes[14..payload].chunks_exact(4) {
        rows.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let trailer = std::str::from_utf8(&bytes[payload..])
        .map_err(|_| Error::format(p.clone(), "item-id trailer is not UTF-8"))?;
    let ids: Vec<String> = trailer
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if ids.len() != n {
        return Err(Error::format(
            p,
            format!("trailer lists {} ids for {} rows", ids.len(), n),
        ));
    }
    Ok((ids, dim, rows))
}

fn parse_csv(bytes: &[u8], path: &Path) -> Result<ParsedRows> {
    let p = path.display().to_string();
    let text =
        std::str::from_utf8(bytes).map_err(|_| Error::format(p.clone(), "not UTF-8"))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(p.clone(), "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"item") || cols.len() < 2 {
        return Err(Error::format(p, "header must be `item,f0,...`"));
    }
    let dim = cols.len() - 1;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or("");
        if id.is_empty() {
            return Err(Error::Parse {
                path: p,
                line: lineno + 1,
                msg: "empty item id".into(),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for f in fields {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                path: p.clone(),
                line: lineno + 1,
                msg: format!("bad float `{f}`"),
            })?;
            row.push(v);
        }
        if row.len() != dim {
            return Err(Error::Parse {
                path: p,
                line: lineno + 1,
                msg: format!("expected {dim} values, found {}", row.len()),
            });
        }
        ids.push(id.to_string());
        rows.extend_from_slice(&row);
    }
    Ok((ids, dim, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::InteractionSet;

    fn space_of(items: &[&str]) -> IndexSpace {
        let pairs: Vec<(String, String)> = items
            .iter()
            .map(|i| ("u".to_string(), i.to_string()))
            .collect();
        InteractionSet::from_pairs(&pairs).unwrap().space().clone()
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let space = space_of(&["x", "y"]);
        let data = DenseMatrix::from_rows(&[
            vec![1.0, -2.5, 0.25, 3.0],
            vec![0.0, 7.5, -0.125, 1.5],
        ])
        .unwrap();
        let fm = FeatureMatrix::new("visual", data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        save_features_binary(&fm, &space, &path).unwrap();
        let loaded = load_features(&path, "visual", 4, &space).unwrap();
        // Values chosen exactly representable in f32, so the f64 round trip
        // is exact.
        assert_eq!(loaded.matrix(), fm.matrix());

        save_features_binary(&loaded, &space, dir.path().join("f2.bin")).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(dir.path().join("f2.bin")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let space = space_of(&["x"]);
        let fm = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        save_features_binary(&fm, &space, &path).unwrap();
        assert!(load_features(&path, "visual", 3, &space).is_err());
    }

    #[test]
    fn missing_item_named_in_error() {
        let write_space = space_of(&["x"]);
        let fm = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        save_features_binary(&fm, &write_space, &path).unwrap();

        let read_space = space_of(&["x", "zzz"]);
        let err = load_features(&path, "visual", 2, &read_space).unwrap_err();
        assert!(err.to_string().contains("zzz"), "{err}");
    }

    #[test]
    fn nan_entry_named_in_error() {
        let space = space_of(&["x", "y"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(&path, "item,f0,f1\nx,1.0,2.0\ny,NaN,0.5\n").unwrap();
        let err = load_features(&path, "visual", 2, &space).unwrap_err();
        assert!(err.to_string().contains('y'), "{err}");
    }

    #[test]
    fn csv_round_trip_and_superset() {
        let space = space_of(&["x", "y"]);
        let data =
            DenseMatrix::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.25, 0.0, -7.5]]).unwrap();
        let fm = FeatureMatrix::new("textual", data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        save_features_csv(&fm, &space, &path).unwrap();
        assert_eq!(peek_feature_dim(&path).unwrap(), 3);

        // A reader whose space covers only one of the items ignores the rest.
        let sub = space_of(&["y"]);
        let loaded = load_features(&path, "textual", 3, &sub).unwrap();
        assert_eq!(loaded.row(0), fm.row(1));
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let space = space_of(&["x"]);
        let path = dir.path().join("trunc.bin");
        let fm = FeatureMatrix::new(
            "visual",
            DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        save_features_binary(&fm, &space, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..16]).unwrap();
        assert!(load_features(&path, "visual", 2, &space).is_err());
    }
}
