//! File formats: raw little-endian float64 matrices (row-major) described by
//! JSON manifests, JSON documents, and the human-facing CSVs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::DomainBox;
use crate::dynamics::{InputLabel, SnapshotSet, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write `m` into `dir/<name>.bin` and return its manifest entry.
pub fn write_matrix(dir: &Path, name: &str, m: &DMatrix<f64>) -> Result<MatrixEntry> {
    let file = format!("{name}.bin");
    let mut bytes = Vec::with_capacity(m.len() * 8);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    write_bytes(&dir.join(&file), &bytes)?;
    Ok(MatrixEntry {
        name: name.to_string(),
        file,
        rows: m.nrows(),
        cols: m.ncols(),
    })
}

pub fn write_vector(dir: &Path, name: &str, v: &DVector<f64>) -> Result<MatrixEntry> {
    write_matrix(
        dir,
        name,
        &DMatrix::from_column_slice(v.len(), 1, v.as_slice()),
    )
}

pub fn read_matrix(dir: &Path, entry: &MatrixEntry) -> Result<DMatrix<f64>> {
    let path = dir.join(&entry.file);
    let bytes = read_bytes(&path)?;
    let expected = entry.rows * entry.cols * 8;
    if bytes.len() != expected {
        return Err(Error::dimension(
            format!("bytes in {}", path.display()),
            expected,
            bytes.len(),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of eight bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(entry.rows, entry.cols, &values))
}

pub fn read_vector(dir: &Path, entry: &MatrixEntry) -> Result<DVector<f64>> {
    let m = read_matrix(dir, entry)?;
    if m.ncols() != 1 {
        return Err(Error::dimension(
            format!("columns of {}", entry.name),
            1,
            m.ncols(),
        ));
    }
    Ok(m.column(0).into_owned())
}

pub fn find_entry<'a>(entries: &'a [MatrixEntry], name: &str) -> Result<&'a MatrixEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::invalid("manifest", format!("no matrix named `{name}`")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Shortest representation that round-trips exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub dim: usize,
    pub dt: f64,
    pub input_label: InputLabel,
    pub domain_box: DomainBox,
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn sidecar(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// CSV `x1..xn,y1..yn` (plus a trailing `u` column for mixed-input sets) and a
/// JSON sidecar with the same stem.
pub fn write_snapshots(path: &Path, set: &SnapshotSet, config_hash: Option<&str>) -> Result<()> {
    let n = set.dim();
    let mixed = set.input_label == InputLabel::Mixed;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.extend((1..=n).map(|i| format!("y{i}")));
    if mixed {
        header.push("u".into());
    }
    wtr.write_record(&header)?;
    for i in 0..set.len() {
        let mut rec: Vec<String> = set.x_points[i].iter().map(|v| fmt_f64(*v)).collect();
        rec.extend(set.y_points[i].iter().map(|v| fmt_f64(*v)));
        if mixed {
            rec.push(fmt_f64(set.inputs[i]));
        }
        wtr.write_record(&rec)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_bytes(path, &bytes)?;
    let meta = SnapshotMeta {
        dim: n,
        dt: set.dt,
        input_label: set.input_label,
        domain_box: set.domain_box.clone(),
        seed: set.seed,
        m: set.len(),
        config_hash: config_hash.map(str::to_string),
    };
    write_json(&sidecar(path), &meta)
}

pub fn read_snapshots(path: &Path) -> Result<(SnapshotSet, SnapshotMeta)> {
    let meta: SnapshotMeta = read_json(&sidecar(path))?;
    let n = meta.dim;
    let mixed = meta.input_label == InputLabel::Mixed;
    let width = 2 * n + usize::from(mixed);
    let bytes = read_bytes(path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let mut x_points = Vec::with_capacity(meta.m);
    let mut y_points = Vec::with_capacity(meta.m);
    let mut inputs = Vec::with_capacity(meta.m);
    let constant = meta.input_label.constant_input();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != width {
            return Err(Error::dimension(
                format!("columns in {}", path.display()),
                width,
                rec.len(),
            ));
        }
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(path.display().to_string(), e.to_string()))
            })
            .collect::<Result<_>>()?;
        x_points.push(DVector::from_column_slice(&vals[..n]));
        y_points.push(DVector::from_column_slice(&vals[n..2 * n]));
        inputs.push(constant.unwrap_or_else(|| vals[2 * n]));
    }
    if x_points.len() != meta.m {
        return Err(Error::dimension(
            format!("rows in {}", path.display()),
            meta.m,
            x_points.len(),
        ));
    }
    let set = SnapshotSet {
        x_points,
        y_points,
        inputs,
        dt: meta.dt,
        input_label: meta.input_label,
        domain_box: meta.domain_box.clone(),
        seed: meta.seed,
    };
    set.validate()?;
    Ok((set, meta))
}

/// CSV `t,x1..xn,u`.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let n = traj.states.first().map_or(0, |x| x.len());
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.push("u".into());
    wtr.write_record(&header)?;
    for k in 0..traj.len() {
        let mut rec = vec![fmt_f64(traj.times[k])];
        rec.extend(traj.states[k].iter().map(|v| fmt_f64(*v)));
        rec.push(fmt_f64(traj.inputs[k]));
        wtr.write_record(&rec)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_bytes(path, &bytes)
}

/// Serde adapter writing a `DVector` as a plain JSON array.
pub mod dvec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        v: &DVector<f64>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Serde adapter writing a `DMatrix` as an array of rows.
pub mod dmat {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &DMatrix<f64>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<f64>>()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.concat();
        Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_local_snapshots, generate_snapshots, ControlAffineSystem};

    #[test]
    fn matrix_round_trip_is_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -0.1]);
        let entry = write_matrix(dir.path(), "m", &m).unwrap();
        let bytes = fs::read(dir.path().join("m.bin")).unwrap();
        assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2.0);
        assert_eq!(read_matrix(dir.path(), &entry).unwrap(), m);
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sys = ControlAffineSystem::duffing();
        let bx = DomainBox::symmetric(2, 1.0).unwrap();
        let set = generate_snapshots(&sys, &bx, 17, 0.01, InputLabel::Step, 9).unwrap();
        let path = dir.path().join("step.csv");
        write_snapshots(&path, &set, Some("abc")).unwrap();
        let (back, meta) = read_snapshots(&path).unwrap();
        assert_eq!(back, set);
        assert_eq!(meta.config_hash.as_deref(), Some("abc"));

        let local = generate_local_snapshots(&sys, 0.1, 10, 4, 0.01, 1).unwrap();
        let path = dir.path().join("local.csv");
        write_snapshots(&path, &local, None).unwrap();
        assert_eq!(read_snapshots(&path).unwrap().0.inputs, local.inputs);
    }
}
