//! On-disk formats.
//!
//! Binary container (`.srom`), all little-endian:
//!
//! ```text
//! "SROM" | u16 version | u32 rows | u32 cols | f64 dt | f64 t0 | rows·cols f64 (row-major)
//! ```
//!
//! A basis file is the container holding the `N_x × r` modes (`dt = t0 = 0`)
//! followed by a descriptor record:
//!
//! ```text
//! "PODB" | u32 r | u32 M | u8 inner-product tag | u32 n | n f64 eigenvalues
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closure::ClosureParameters;
use crate::error::{Result, SromError};
use crate::fem::SnapshotMatrix;
use crate::galerkin::GalerkinOperators;
use crate::pod::{CoefficientTrajectory, InnerProduct, PodBasis};
use crate::srom::{Provenance, SromModel};

const MAGIC: &[u8; 4] = b"SROM";
const BASIS_MAGIC: &[u8; 4] = b"PODB";
const CONTAINER_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 8 + 8;
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn snapshot_file_name(m: usize) -> String {
    format!("traj_{m:05}.srom")
}

pub fn coefficient_file_name(m: usize) -> String {
    format!("coef_{m:05}.srom")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SromError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| SromError::io(path, e))?;
    file.write_all(bytes).map_err(|e| SromError::io(path, e))
}

fn encode_matrix(values: &DMatrix<f64>, dt: f64, t0: f64) -> Vec<u8> {
    let (rows, cols) = values.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * rows * cols);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&dt.to_le_bytes());
    out.extend_from_slice(&t0.to_le_bytes());
    for i in 0..rows {
        for j in 0..cols {
            out.extend_from_slice(&values[(i, j)].to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SromError::format(self.path, "truncated file"))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_matrix<'a>(cur: &mut Cursor<'a>) -> Result<(DMatrix<f64>, f64, f64)> {
    if cur.take(4)? != MAGIC {
        return Err(SromError::format(cur.path, "bad magic"));
    }
    let version = cur.u16()?;
    if version != CONTAINER_VERSION {
        return Err(SromError::format(cur.path, format!("unsupported version {version}")));
    }
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let dt = cur.f64()?;
    let t0 = cur.f64()?;
    let mut values = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            values[(i, j)] = cur.f64()?;
        }
    }
    Ok((values, dt, t0))
}

/// Raw container read: `(values, dt, t0)`.
pub fn read_matrix(path: &Path) -> Result<(DMatrix<f64>, f64, f64)> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    let out = decode_matrix(&mut cur)?;
    if cur.pos != bytes.len() {
        return Err(SromError::format(path, "trailing bytes"));
    }
    Ok(out)
}

pub fn write_matrix(path: &Path, values: &DMatrix<f64>, dt: f64, t0: f64) -> Result<()> {
    write_bytes(path, &encode_matrix(values, dt, t0))
}

pub fn write_snapshot(path: &Path, y: &SnapshotMatrix) -> Result<()> {
    write_matrix(path, &y.values, y.dt, y.t0)
}

pub fn read_snapshot(path: &Path) -> Result<SnapshotMatrix> {
    let (values, dt, t0) = read_matrix(path)?;
    if !(dt > 0.0) {
        return Err(SromError::format(path, "snapshot time step must be positive"));
    }
    Ok(SnapshotMatrix { values, dt, t0 })
}

pub fn write_coefficients(path: &Path, traj: &CoefficientTrajectory) -> Result<()> {
    write_matrix(path, &traj.values, traj.delta, traj.t0)
}

pub fn read_coefficients(path: &Path, gap: usize) -> Result<CoefficientTrajectory> {
    let (values, delta, t0) = read_matrix(path)?;
    if !(delta > 0.0) {
        return Err(SromError::format(path, "time step must be positive"));
    }
    Ok(CoefficientTrajectory { values, delta, gap, t0 })
}

pub fn write_basis(path: &Path, basis: &PodBasis) -> Result<()> {
    let mut bytes = encode_matrix(&basis.modes, 0.0, 0.0);
    bytes.extend_from_slice(BASIS_MAGIC);
    bytes.extend_from_slice(&(basis.r() as u32).to_le_bytes());
    bytes.extend_from_slice(&(basis.n_trajectories as u32).to_le_bytes());
    bytes.push(basis.inner_product.tag());
    bytes.extend_from_slice(&(basis.eigenvalues.len() as u32).to_le_bytes());
    for v in &basis.eigenvalues {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

pub fn read_basis(path: &Path) -> Result<PodBasis> {
    let bytes = read_bytes(path)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    let (modes, _, _) = decode_matrix(&mut cur)?;
    if cur.take(4)? != BASIS_MAGIC {
        return Err(SromError::format(path, "missing basis descriptor"));
    }
    let r = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let tag = cur.u8()?;
    let inner_product =
        InnerProduct::from_tag(tag).ok_or_else(|| SromError::format(path, format!("unknown inner product {tag}")))?;
    let n = cur.u32()? as usize;
    let eigenvalues = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
    if cur.pos != bytes.len() {
        return Err(SromError::format(path, "trailing bytes"));
    }
    if r != modes.ncols() {
        return Err(SromError::format(path, "descriptor r disagrees with the mode matrix"));
    }
    Ok(PodBasis {
        modes,
        eigenvalues,
        n_trajectories: m,
        inner_product,
    })
}

/// Model JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub r: usize,
    pub delta: f64,
    pub nu: f64,
    /// Row-major `r × r`.
    pub a: Vec<f64>,
    pub a_tilde: Vec<f64>,
    /// `r` slices `B[:, :, k]`, each row-major.
    pub b: Vec<Vec<f64>>,
    pub b_tilde: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub basis_fingerprint: String,
    pub provenance: Provenance,
    pub lambda_used: f64,
    pub fit_loss: f64,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(r: usize, v: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if v.len() != r * r {
        return Err(SromError::DimensionMismatch(format!(
            "{what} has {} entries, expected {}",
            v.len(),
            r * r
        )));
    }
    Ok(DMatrix::from_row_slice(r, r, v))
}

impl ModelFile {
    pub fn from_model(model: &SromModel) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            r: model.r,
            delta: model.delta,
            nu: model.galerkin.nu,
            a: row_major(&model.galerkin.a),
            a_tilde: row_major(&model.closure.a_tilde),
            b: model.galerkin.b.iter().map(row_major).collect(),
            b_tilde: model.closure.b_tilde.iter().map(row_major).collect(),
            sigma: model.closure.sigma.clone(),
            basis_fingerprint: model.basis_fingerprint.clone(),
            provenance: model.provenance.clone(),
            lambda_used: model.closure.lambda_used,
            fit_loss: model.closure.fit_loss,
        }
    }

    pub fn into_model(self) -> Result<SromModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(SromError::Incompatible(format!(
                "model format version {}",
                self.format_version
            )));
        }
        let r = self.r;
        let slices = |v: &[Vec<f64>], what: &str| -> Result<Vec<DMatrix<f64>>> {
            if v.len() != r {
                return Err(SromError::DimensionMismatch(format!("{what} has {} slices", v.len())));
            }
            v.iter().map(|s| from_row_major(r, s, what)).collect()
        };
        let galerkin = GalerkinOperators {
            a: from_row_major(r, &self.a, "A")?,
            b: slices(&self.b, "B")?,
            r,
            nu: self.nu,
        };
        let closure = ClosureParameters {
            a_tilde: from_row_major(r, &self.a_tilde, "Ã")?,
            b_tilde: slices(&self.b_tilde, "B̃")?,
            sigma: self.sigma,
            lambda_used: self.lambda_used,
            fit_loss: self.fit_loss,
        };
        SromModel::new(self.delta, galerkin, closure, self.basis_fingerprint, self.provenance)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| SromError::format(path, e.to_string()))
}

pub fn write_model(path: &Path, model: &SromModel) -> Result<()> {
    write_json(path, &ModelFile::from_model(model))
}

pub fn read_model(path: &Path) -> Result<SromModel> {
    read_json::<ModelFile>(path)?.into_model()
}

/// CSV with header `t,a_1,…,a_r`; one row per time level.
pub fn write_trajectory_csv(path: &Path, values: &DMatrix<f64>, delta: f64, t0: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => SromError::io(path, io),
        other => SromError::format(path, format!("{other:?}")),
    })?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=values.nrows()).map(|i| format!("a_{i}")));
    w.write_record(&header)?;
    for l in 0..values.ncols() {
        let mut row = vec![(t0 + l as f64 * delta).to_string()];
        row.extend(values.column(l).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| SromError::io(path, e))
}

/// Reads a trajectory CSV back as `(times, values r × n)`.
pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let mut rd = csv::Reader::from_path(path)?;
    let r = rd.headers()?.len().saturating_sub(1);
    let mut times = Vec::new();
    let mut cols = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| SromError::format(path, e.to_string()));
        times.push(parse(&rec[0])?);
        for i in 1..=r {
            cols.push(parse(&rec[i])?);
        }
    }
    let n = times.len();
    Ok((times, DMatrix::from_column_slice(r, n, &cols)))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_bytes(path)?)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub index: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// `dataset` or `coefficients`.
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    /// Named sub-seed domains used to produce the files.
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<ManifestEntry>,
    /// Fingerprint of the basis used for projection, for coefficient sets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<usize>,
}

impl Manifest {
    pub fn new(kind: &str, config_hash: String, seed: u64) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            kind: kind.to_string(),
            config_hash,
            seed,
            seeds: BTreeMap::new(),
            files: Vec::new(),
            basis_fingerprint: None,
            gap: None,
        }
    }

    /// Records `file` (already written inside `dir`) with its checksum.
    pub fn add_file(&mut self, dir: &Path, file: String, index: usize) -> Result<()> {
        let sha256 = sha256_file(&dir.join(&file))?;
        self.files.push(ManifestEntry { file, index, sha256 });
        Ok(())
    }

    pub fn paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.files.iter().map(|e| dir.join(&e.file)).collect()
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

/// Loads the manifest of `dir`, verifying every checksum and, when given, the
/// expected kind and configuration hash.
pub fn verify_manifest(dir: &Path, kind: &str, expected_hash: Option<&str>) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(SromError::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let manifest: Manifest = read_json(&path)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(SromError::Incompatible(format!(
            "manifest version {}",
            manifest.format_version
        )));
    }
    if manifest.kind != kind {
        return Err(SromError::Incompatible(format!(
            "{} holds {} files, expected {kind}",
            dir.display(),
            manifest.kind
        )));
    }
    if let Some(expected) = expected_hash {
        if manifest.config_hash != expected {
            return Err(SromError::Incompatible(format!(
                "{} was produced with a different physics configuration",
                dir.display()
            )));
        }
    }
    for entry in &manifest.files {
        let file = dir.join(&entry.file);
        if sha256_file(&file)? != entry.sha256 {
            return Err(SromError::Checksum(file));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::srom::Provenance;

    fn sample_matrix() -> DMatrix<f64> {
        DMatrix::from_fn(3, 4, |i, j| (i as f64 + 1.0) * 0.1 - j as f64 * std::f64::consts::PI)
    }

    #[test]
    fn container_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.srom");
        let y = SnapshotMatrix {
            values: sample_matrix(),
            dt: 0.005,
            t0: 1.5,
        };
        write_snapshot(&path, &y).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SROM");
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 12);
        // row-major: second stored value is (0, 1)
        let second = f64::from_le_bytes(bytes[HEADER_LEN + 8..HEADER_LEN + 16].try_into().unwrap());
        assert_eq!(second, y.values[(0, 1)]);
        assert_eq!(read_snapshot(&path).unwrap(), y);

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_snapshot(&path), Err(SromError::Format { .. })));
    }

    #[test]
    fn basis_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.srom");
        let basis = PodBasis {
            modes: sample_matrix(),
            eigenvalues: vec![3.0, 2.0, 1.0],
            n_trajectories: 17,
            inner_product: InnerProduct::Euclidean,
        };
        write_basis(&path, &basis).unwrap();
        assert_eq!(read_basis(&path).unwrap(), basis);
    }

    fn model() -> SromModel {
        let mut g = GalerkinOperators::zeros(2, 0.002);
        g.a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.25, 0.25, -2.0]);
        g.b[1] = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.0]);
        let mut c = ClosureParameters::zeros(2);
        c.a_tilde = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        c.sigma = vec![0.01, 0.02];
        c.lambda_used = 1e-3;
        c.fit_loss = 0.5;
        let prov = Provenance {
            nu: 0.002,
            n_trajectories: 4,
            gap: 5,
            seed: 7,
            t_start: 0.0,
            t_end: 2.0,
        };
        SromModel::new(0.025, g, c, "abc".into(), prov).unwrap()
    }

    #[test]
    fn model_json_roundtrip_is_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        write_model(&path, &m).unwrap();
        let file: ModelFile = read_json(&path).unwrap();
        assert_eq!(file.a_tilde, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(read_model(&path).unwrap(), m);
    }

    #[test]
    fn trajectory_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let values = sample_matrix();
        write_trajectory_csv(&path, &values, 0.025, 0.0).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,a_1,a_2,a_3\n"));
        let (times, back) = read_trajectory_csv(&path).unwrap();
        assert_eq!(back, values);
        assert_eq!(times[2], 0.05);
    }

    #[test]
    fn manifest_detects_corruption_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::new("dataset", "h1".into(), 7);
        for m in 0..2 {
            let name = snapshot_file_name(m);
            let y = SnapshotMatrix {
                values: sample_matrix() * (m as f64 + 1.0),
                dt: 0.1,
                t0: 0.0,
            };
            write_snapshot(&dir.path().join(&name), &y).unwrap();
            manifest.add_file(dir.path(), name, m).unwrap();
        }
        write_manifest(dir.path(), &manifest).unwrap();
        assert_eq!(verify_manifest(dir.path(), "dataset", Some("h1")).unwrap(), manifest);
        assert!(matches!(
            verify_manifest(dir.path(), "dataset", Some("h2")),
            Err(SromError::Incompatible(_))
        ));
        assert!(verify_manifest(dir.path(), "coefficients", None).is_err());

        let target = dir.path().join(snapshot_file_name(1));
        let mut bytes = fs::read(&target).unwrap();
        bytes[HEADER_LEN + 5] ^= 0x01;
        fs::write(&target, bytes).unwrap();
        match verify_manifest(dir.path(), "dataset", Some("h1")) {
            Err(SromError::Checksum(p)) => assert_eq!(p, target),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }
}
