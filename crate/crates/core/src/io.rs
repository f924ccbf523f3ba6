//! Dataset ingestion and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DatasetManifest, SourceFormat};
use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "idx",
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses an unsigned-byte IDX file into its extents and payload.
fn read_idx(path: &Path, expect_rank: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(idx_err(path, "bad magic"));
    }
    if bytes[2] != 0x08 {
        return Err(idx_err(path, format!("element type 0x{:02x} is not unsigned byte", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank != expect_rank {
        return Err(idx_err(path, format!("rank {rank}, expected {expect_rank}")));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(idx_err(path, "truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n {
        return Err(idx_err(
            path,
            format!("payload has {} bytes, extents {dims:?} need {n}", payload.len()),
        ));
    }
    Ok((dims, payload.to_vec()))
}

/// Reads an IDX image/label pair. Pixels are scaled by 1/255.
pub fn ingest_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<(Dataset, DatasetManifest)> {
    let (dims, pix) = read_idx(images, 3)?;
    let (ldims, lab) = read_idx(labels, 1)?;
    if dims[0] != ldims[0] {
        return Err(idx_err(
            labels,
            format!("{} labels for {} images", ldims[0], dims[0]),
        ));
    }
    let pixels = pix.iter().map(|&b| b as f64 / 255.0).collect();
    let labels_v = lab.iter().map(|&b| b as usize).collect();
    let data = Dataset::new([dims[1], dims[2], 1], num_classes, pixels, labels_v)?;
    let name = images
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = DatasetManifest::describe(&name, &data, SourceFormat::Idx, 1.0 / 255.0);
    Ok((data, manifest))
}

/// Reads `label,p0,p1,...` rows. Pixel values are divided by 255 when any
/// exceeds 1, otherwise kept as is.
pub fn ingest_csv(path: &Path, shape: [usize; 3], num_classes: usize) -> Result<(Dataset, DatasetManifest)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, reason: String| Error::Format {
        kind: "csv",
        path: path.to_path_buf(),
        reason: format!("line {}: {reason}", line + 1),
    };
    let d: usize = shape.iter().product();
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != d + 1 {
            return Err(err(ln, format!("{} cells, expected {}", cells.len(), d + 1)));
        }
        let label: usize = cells[0]
            .parse()
            .map_err(|_| err(ln, format!("label {:?} is not a non-negative integer", cells[0])))?;
        if label >= num_classes {
            return Err(err(ln, format!("label {label} outside [0, {num_classes})")));
        }
        labels.push(label);
        for c in &cells[1..] {
            let v: f64 = c.parse().map_err(|_| err(ln, format!("cell {c:?} is not numeric")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(err(ln, format!("pixel {v} is negative or non-finite")));
            }
            pixels.push(v);
        }
    }
    let max = pixels.iter().copied().fold(0.0, f64::max);
    let scale = if max > 1.0 {
        if max > 255.0 {
            return Err(Error::InvalidArgument(format!("{}: pixel {max} exceeds 255", path.display())));
        }
        1.0 / 255.0
    } else {
        1.0
    };
    if scale != 1.0 {
        for p in &mut pixels {
            *p /= 255.0;
        }
    }
    let data = Dataset::new(shape, num_classes, pixels, labels)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest = DatasetManifest::describe(&name, &data, SourceFormat::Csv, scale);
    Ok((data, manifest))
}

/// Writes a dataset in the format read by [`ingest_csv`], with values
/// printed in shortest round-trip form.
pub fn export_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..data.len() {
        out.push_str(&data.label(i).to_string());
        for v in data.pixels(i) {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, idx_bytes(&[2, 2, 2], &[0, 255, 51, 102, 0, 0, 0, 255])).unwrap();
        fs::write(&lab, idx_bytes(&[2], &[3, 7])).unwrap();
        let (d, m) = ingest_idx(&img, &lab, 10).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(m.input_shape, [2, 2, 1]);
        assert_eq!(d.pixels(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.labels(), &[3, 7]);
        let (d2, m2) = ingest_idx(&img, &lab, 10).unwrap();
        assert_eq!(d, d2);
        assert_eq!(m.content_hash, m2.content_hash);

        fs::write(&lab, idx_bytes(&[3], &[3, 7, 1])).unwrap();
        assert!(matches!(ingest_idx(&img, &lab, 10), Err(Error::Format { .. })));
        fs::write(&img, [1u8, 2, 3, 4]).unwrap();
        assert!(matches!(ingest_idx(&img, &lab, 10), Err(Error::Format { .. })));
        fs::write(&img, &idx_bytes(&[2, 2, 2], &[0; 8])[..10]).unwrap();
        assert!(matches!(ingest_idx(&img, &lab, 10), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "1,0,255\n").unwrap();
        let (d, m) = ingest_csv(&p, [1, 2, 1], 2).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.pixels(0), &[0.0, 1.0]);
        assert_eq!(m.normalization.scale, 1.0 / 255.0);

        fs::write(&p, "0,0.25,0.5\n").unwrap();
        let (d, _) = ingest_csv(&p, [1, 2, 1], 2).unwrap();
        assert_eq!(d.pixels(0), &[0.25, 0.5]);

        fs::write(&p, "0,0.25\n").unwrap();
        assert!(ingest_csv(&p, [1, 2, 1], 2).is_err());
        fs::write(&p, "0,a,0.5\n").unwrap();
        assert!(ingest_csv(&p, [1, 2, 1], 2).is_err());
        fs::write(&p, "2,0,0.5\n").unwrap();
        assert!(ingest_csv(&p, [1, 2, 1], 2).is_err());
    }

    #[test]
    fn csv_export_is_lossless() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let pixels: Vec<f64> = (0..5 * 6).map(|_| rng.gen::<f64>()).collect();
        let labels = (0..5).map(|i| i % 3).collect();
        let d = Dataset::new([2, 3, 1], 3, pixels, labels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        export_csv(&d, &p).unwrap();
        let (back, _) = ingest_csv(&p, [2, 3, 1], 3).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.bin");
        write_atomic(&p, b"abc").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"abc");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }
}
