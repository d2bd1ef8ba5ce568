//! On-disk formats.
//!
//! * Volume bundle: a TOML header (`dims`, `voxel_order = "x-fastest"`,
//!   `dtype = "float32 little-endian"`, `count`, `mask`, `payload`), a mask
//!   file with one byte per grid cell, and a payload of `count x cells`
//!   float32 values in C order. Cells outside the mask hold NaN.
//! * Matrix bundle: a TOML header listing named row-major float64 matrices
//!   (with element offsets into one payload file) plus a free-form `meta`
//!   table.
//! * Covariate table: CSV with header `id,site,x_*...,z_*...`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{encode_sites, Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::lattice::{MaskSpec, VoxelLattice};

const VOLUME_FORMAT: &str = "lasir-volume";
const MATRIX_FORMAT: &str = "lasir-matrix";
const VOXEL_ORDER: &str = "x-fastest";
const F32_LE: &str = "float32 little-endian";
const F64_LE: &str = "float64 little-endian";

fn sibling(header: &Path, file: &str) -> PathBuf {
    header
        .parent()
        .map(|p| p.join(file))
        .unwrap_or_else(|| PathBuf::from(file))
}

fn file_name_with_ext(header: &Path, ext: &str) -> String {
    header
        .with_extension(ext)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("data.{ext}"))
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Volume bundles

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    format: String,
    dims: [usize; 3],
    voxel_order: String,
    dtype: String,
    count: usize,
    mask: String,
    payload: String,
}

/// Writes `values` (`k x d`, one map per row) as a volume bundle.
pub fn write_volume(path: &Path, lattice: &VoxelLattice, values: &DMatrix<f64>) -> Result<()> {
    if values.ncols() != lattice.d() {
        return Err(Error::DimensionMismatch(format!(
            "map has {} values, lattice has {} voxels",
            values.ncols(),
            lattice.d()
        )));
    }
    let mask_name = file_name_with_ext(path, "mask");
    let payload_name = file_name_with_ext(path, "raw");
    let header = VolumeHeader {
        format: VOLUME_FORMAT.into(),
        dims: lattice.dims(),
        voxel_order: VOXEL_ORDER.into(),
        dtype: F32_LE.into(),
        count: values.nrows(),
        mask: mask_name.clone(),
        payload: payload_name.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| malformed(path, e.to_string()))?;
    write_bytes(path, text.as_bytes())?;

    let mask: Vec<u8> = lattice.mask().iter().map(|&b| b as u8).collect();
    write_bytes(&sibling(path, &mask_name), &mask)?;

    let cells = lattice.n_cells();
    let mut payload = Vec::with_capacity(values.nrows() * cells * 4);
    for r in 0..values.nrows() {
        let mut grid = vec![f32::NAN; cells];
        for (m, &cell) in lattice.cells().iter().enumerate() {
            grid[cell] = values[(r, m)] as f32;
        }
        for v in grid {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(&sibling(path, &payload_name), &payload)
}

/// Writes a single map.
pub fn save_volume_map(values: &[f64], lattice: &VoxelLattice, path: &Path) -> Result<()> {
    let m = DMatrix::from_row_slice(1, values.len(), values);
    write_volume(path, lattice, &m)
}

/// Reads a volume bundle: the lattice it was written on and its masked values.
pub fn read_volume(path: &Path) -> Result<(VoxelLattice, DMatrix<f64>)> {
    let text = read_text(path)?;
    let header: VolumeHeader = toml::from_str(&text).map_err(|e| malformed(path, e.to_string()))?;
    if header.format != VOLUME_FORMAT {
        return Err(malformed(path, format!("unexpected format {:?}", header.format)));
    }
    if header.voxel_order != VOXEL_ORDER {
        return Err(malformed(path, format!("unsupported voxel order {:?}", header.voxel_order)));
    }
    if header.dtype != F32_LE {
        return Err(malformed(path, format!("unsupported dtype {:?}", header.dtype)));
    }
    let cells: usize = header.dims.iter().product();
    let mask_path = sibling(path, &header.mask);
    let mask_bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
    if mask_bytes.len() != cells {
        return Err(malformed(
            path,
            format!("mask has {} bytes, dims imply {cells}", mask_bytes.len()),
        ));
    }
    let mut mask = Vec::with_capacity(cells);
    for (c, &b) in mask_bytes.iter().enumerate() {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            _ => return Err(Error::MalformedRecord(format!("mask cell {c} has value {b}"))),
        }
    }
    let lattice = VoxelLattice::new(header.dims, MaskSpec::Explicit(mask))?;

    let payload_path = sibling(path, &header.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if bytes.len() != header.count * cells * 4 {
        return Err(malformed(
            path,
            format!(
                "payload has {} bytes, expected {} individuals x {cells} cells x 4",
                bytes.len(),
                header.count
            ),
        ));
    }
    let d = lattice.d();
    let mut values = DMatrix::zeros(header.count, d);
    for r in 0..header.count {
        let row = &bytes[r * cells * 4..(r + 1) * cells * 4];
        for (m, &cell) in lattice.cells().iter().enumerate() {
            let b = &row[cell * 4..cell * 4 + 4];
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    record: format!("{}: individual {r}, cell {cell}", path.display()),
                });
            }
            values[(r, m)] = v as f64;
        }
    }
    Ok((lattice, values))
}

// ---------------------------------------------------------------------------
// Matrix bundles

#[derive(Debug, Serialize, Deserialize)]
struct MatrixEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    format: String,
    dtype: String,
    layout: String,
    payload: String,
    #[serde(default)]
    meta: toml::Table,
    #[serde(default)]
    matrix: Vec<MatrixEntry>,
}

/// Named matrices plus structured metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatrixBundle {
    pub matrices: Vec<(String, DMatrix<f64>)>,
    pub meta: toml::Table,
}

impl MatrixBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, m: DMatrix<f64>) {
        self.matrices.push((name.to_string(), m));
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.matrices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::MalformedRecord(format!("matrix bundle lacks {name:?}")))
    }

    pub fn meta_int(&self, key: &str) -> Result<i64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_integer())
            .ok_or_else(|| Error::MalformedRecord(format!("bundle meta lacks integer {key:?}")))
    }

    pub fn meta_float(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
            .ok_or_else(|| Error::MalformedRecord(format!("bundle meta lacks number {key:?}")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::MalformedRecord(format!("bundle meta lacks string {key:?}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let payload_name = file_name_with_ext(path, "bin");
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (name, m) in &self.matrices {
            entries.push(MatrixEntry {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
                offset,
            });
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    payload.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
            offset += m.len();
        }
        let header = MatrixHeader {
            format: MATRIX_FORMAT.into(),
            dtype: F64_LE.into(),
            layout: "row-major".into(),
            payload: payload_name.clone(),
            meta: self.meta.clone(),
            matrix: entries,
        };
        let text = toml::to_string(&header).map_err(|e| malformed(path, e.to_string()))?;
        write_bytes(path, text.as_bytes())?;
        write_bytes(&sibling(path, &payload_name), &payload)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let header: MatrixHeader =
            toml::from_str(&text).map_err(|e| malformed(path, e.to_string()))?;
        if header.format != MATRIX_FORMAT || header.dtype != F64_LE || header.layout != "row-major" {
            return Err(malformed(path, "unsupported matrix bundle format"));
        }
        let payload_path = sibling(path, &header.payload);
        let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        let mut matrices = Vec::new();
        for e in header.matrix {
            let len = e.rows * e.cols;
            let end = (e.offset + len) * 8;
            if end > bytes.len() {
                return Err(malformed(path, format!("matrix {:?} runs past payload", e.name)));
            }
            let vals: Vec<f64> = bytes[e.offset * 8..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            matrices.push((e.name, DMatrix::from_row_slice(e.rows, e.cols, &vals)));
        }
        Ok(Self {
            matrices,
            meta: header.meta,
        })
    }
}

// ---------------------------------------------------------------------------
// Covariate tables and datasets

/// Parsed covariate table, rows in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub ids: Vec<String>,
    pub sites: Vec<String>,
    pub exposure_names: Vec<String>,
    pub exposures: Vec<Vec<f64>>,
    pub control_names: Vec<String>,
    pub controls: Vec<Vec<f64>>,
}

pub fn read_covariates(path: &Path) -> Result<CovariateTable> {
    let mut rdr = csv::Reader::from_reader(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("id").ok_or_else(|| malformed(path, "missing column \"id\""))?;
    let site_col = col("site").ok_or_else(|| malformed(path, "missing column \"site\""))?;
    let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| headers[c].starts_with("x_")).collect();
    let z_cols: Vec<usize> = (0..headers.len()).filter(|&c| headers[c].starts_with("z_")).collect();
    let mut table = CovariateTable {
        ids: Vec::new(),
        sites: Vec::new(),
        exposure_names: x_cols.iter().map(|&c| headers[c].to_string()).collect(),
        exposures: Vec::new(),
        control_names: z_cols.iter().map(|&c| headers[c].to_string()).collect(),
        controls: Vec::new(),
    };
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            let field = rec.get(c).unwrap_or("");
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::MalformedRecord(format!(
                    "{}: row {row}, column {:?}: cannot parse {field:?}",
                    path.display(),
                    &headers[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    record: format!("{}: row {row}, column {:?}", path.display(), &headers[c]),
                });
            }
            Ok(v)
        };
        table.ids.push(rec.get(id_col).unwrap_or("").to_string());
        table.sites.push(rec.get(site_col).unwrap_or("").trim().to_string());
        table.exposures.push(x_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?);
        table.controls.push(z_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?);
    }
    Ok(table)
}

pub fn write_covariates(path: &Path, ds: &Dataset) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut w = csv::Writer::from_writer(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut header = vec!["id".to_string(), "site".to_string()];
    header.extend(ds.exposure_names.iter().cloned());
    header.extend(ds.control_names.iter().cloned());
    w.write_record(&header)?;
    let site_idx = ds.site_index();
    for i in 0..ds.n() {
        let mut rec = vec![ds.ids[i].clone(), ds.site_codes[site_idx[i]].clone()];
        // `{}` on f64 prints the shortest string that parses back exactly.
        rec.extend((1..ds.exposures.ncols()).map(|j| format!("{}", ds.exposures[(i, j)])));
        rec.extend((0..ds.q()).map(|j| format!("{}", ds.controls[(i, j)])));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes images as a volume bundle and covariates as CSV.
///
/// Images are stored as float32, so a round trip is exact for values that
/// are float32-representable (in particular for any dataset read from disk).
pub fn save_dataset(
    ds: &Dataset,
    lattice: &VoxelLattice,
    volume_path: &Path,
    covariate_path: &Path,
) -> Result<()> {
    ds.check_lattice(lattice)?;
    write_volume(volume_path, lattice, &ds.images)?;
    write_covariates(covariate_path, ds)
}

pub fn load_dataset(
    volume_path: &Path,
    covariate_path: &Path,
    lattice: &VoxelLattice,
) -> Result<Dataset> {
    let (file_lattice, images) = read_volume(volume_path)?;
    if file_lattice.dims() != lattice.dims() || file_lattice.mask() != lattice.mask() {
        return Err(Error::DimensionMismatch(format!(
            "{} was written on a different lattice",
            volume_path.display()
        )));
    }
    let cov = read_covariates(covariate_path)?;
    let n = images.nrows();
    if cov.ids.len() != n {
        return Err(Error::RowCountMismatch(format!(
            "covariate file has {} rows, volume has {n} individuals",
            cov.ids.len()
        )));
    }
    let p = cov.exposure_names.len();
    let q = cov.control_names.len();
    let exposures = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { cov.exposures[i][j - 1] });
    let controls = DMatrix::from_fn(n, q, |i, j| cov.controls[i][j]);
    let (sites, site_codes) = encode_sites(&cov.sites);
    Dataset::new(
        cov.ids,
        images,
        exposures,
        cov.exposure_names,
        controls,
        cov.control_names,
        sites,
        site_codes,
    )
}

/// Ground truth as a matrix bundle (maps in masked-voxel order).
pub fn save_ground_truth(truth: &GroundTruth, path: &Path) -> Result<()> {
    let mut b = MatrixBundle::new();
    b.set_meta("k", truth.k() as i64);
    b.set_meta("label_base", 0i64);
    let labels = DMatrix::from_iterator(1, truth.labels.len(), truth.labels.iter().map(|&l| l as f64));
    b.push("labels", labels);
    for (k, a) in truth.alpha.iter().enumerate() {
        b.push(&format!("alpha_{k}"), a.clone());
    }
    b.push("gamma", truth.gamma.clone());
    b.push("eta", truth.eta.clone());
    b.push("gating", truth.gating.clone());
    b.write(path)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let b = MatrixBundle::read(path)?;
    let k = b.meta_int("k")? as usize;
    let labels = b.get("labels")?.iter().map(|&v| v as usize).collect();
    let alpha = (0..k)
        .map(|g| b.get(&format!("alpha_{g}")).cloned())
        .collect::<Result<_>>()?;
    Ok(GroundTruth {
        labels,
        alpha,
        gamma: b.get("gamma")?.clone(),
        eta: b.get("eta")?.clone(),
        gating: b.get("gating")?.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn dataset(lat: &VoxelLattice, n: usize) -> Dataset {
        let d = lat.d();
        let codes: Vec<String> = (0..n).map(|i| ["1", "3", "7"][i % 3].to_string()).collect();
        let (sites, site_codes) = encode_sites(&codes);
        Dataset::new(
            (0..n).map(|i| format!("id{i}")).collect(),
            DMatrix::from_fn(n, d, |i, m| ((i * 7 + m) as f32 * 0.37).sin() as f64),
            DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { 0.1 * i as f64 - 0.3 }),
            vec!["x_g".into()],
            DMatrix::from_fn(n, 2, |i, j| (i as f64 + 0.5).ln() * (j as f64 + 1.0) / 3.0),
            vec!["z_age".into(), "z_inc".into()],
            sites,
            site_codes,
        )
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let mut mask = vec![true; 24];
        mask[5] = false;
        let lat = VoxelLattice::new([2, 3, 4], MaskSpec::Explicit(mask)).unwrap();
        let ds = dataset(&lat, 5);
        let vol = dir.path().join("img.hdr");
        let cov = dir.path().join("cov.csv");
        save_dataset(&ds, &lat, &vol, &cov).unwrap();
        let back = load_dataset(&vol, &cov, &lat).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.site_codes, vec!["1", "3", "7"]);
    }

    #[test]
    fn row_count_mismatch() {
        let dir = tempdir().unwrap();
        let lat = VoxelLattice::cube(2).unwrap();
        let ds = dataset(&lat, 3);
        let vol = dir.path().join("img.hdr");
        let cov = dir.path().join("cov.csv");
        save_dataset(&ds, &lat, &vol, &cov).unwrap();
        write_covariates(&cov, &ds.select_rows(&[0, 1])).unwrap();
        let err = load_dataset(&vol, &cov, &lat).unwrap_err();
        assert!(err.to_string().contains("row count mismatch"), "{err}");
    }

    #[test]
    fn malformed_header_and_non_finite() {
        let dir = tempdir().unwrap();
        let lat = VoxelLattice::cube(2).unwrap();
        let vol = dir.path().join("v.hdr");
        fs::write(&vol, "format = \"lasir-volume\"\ndims = [2, 2]\n").unwrap();
        assert!(matches!(read_volume(&vol), Err(Error::MalformedHeader { .. })));

        let mut m = DMatrix::zeros(2, 8);
        m[(1, 3)] = f64::INFINITY;
        write_volume(&vol, &lat, &m).unwrap();
        let err = read_volume(&vol).unwrap_err();
        assert!(err.to_string().contains("individual 1, cell 3"), "{err}");

        let cov = dir.path().join("c.csv");
        fs::write(&cov, "id,site,x_a\n1,1,0.5\n2,1,nan\n").unwrap();
        let err = read_covariates(&cov).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
        fs::write(&cov, "id,x_a\n1,0.5\n").unwrap();
        assert!(matches!(read_covariates(&cov), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn volume_map_masks_with_nan() {
        let dir = tempdir().unwrap();
        let mut mask = vec![true; 8];
        mask[0] = false;
        let lat = VoxelLattice::new([2, 2, 2], MaskSpec::Explicit(mask)).unwrap();
        let path = dir.path().join("map.hdr");
        let vals: Vec<f64> = (0..7).map(|i| i as f64 * 0.25).collect();
        save_volume_map(&vals, &lat, &path).unwrap();
        let raw = fs::read(dir.path().join("map.raw")).unwrap();
        assert!(f32::from_le_bytes(raw[0..4].try_into().unwrap()).is_nan());
        let (lat2, back) = read_volume(&path).unwrap();
        assert_eq!(lat2, lat);
        assert_eq!(back.row(0).iter().copied().collect::<Vec<_>>(), vals);

        assert!(save_volume_map(&vals[..6], &lat, &path).is_err());

        save_volume_map(&[0.0; 7], &lat, &path).unwrap();
        let (_, z) = read_volume(&path).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matrix_bundle_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.hdr");
        let mut b = MatrixBundle::new();
        b.push("a", DMatrix::from_fn(3, 2, |i, j| i as f64 / 3.0 + j as f64));
        b.push("empty", DMatrix::zeros(0, 4));
        b.push("v", DMatrix::from_row_slice(1, 2, &[f64::MIN_POSITIVE, -1e300]));
        b.set_meta("k", 3i64);
        b.set_meta("method", "lasir");
        b.write(&path).unwrap();
        let back = MatrixBundle::read(&path).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.meta_int("k").unwrap(), 3);
        assert_eq!(back.meta_str("method").unwrap(), "lasir");
        assert!(back.get("missing").is_err());
    }
}
