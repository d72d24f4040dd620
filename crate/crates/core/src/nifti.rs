//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer for 3D
//! scalar grids.
//!
//! Arrays are indexed `(x, y, z)` in memory; on disk NIfTI stores x fastest.
//! The voxel-to-world affine is taken from the sform when present, otherwise
//! the qform, otherwise the pixel dimensions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian as LE, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::{Compression, GzBuilder};
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::volume::Affine;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// Header fields this crate cares about.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
    datatype: i16,
    scl_slope: f64,
    scl_inter: f64,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut raw = Vec::new();
    BufReader::new(file).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| format_err(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(path: &Path, b: &[u8]) -> Result<(Header, usize)> {
    if b.len() < HEADER_SIZE {
        return Err(format_err(path, "file shorter than a NIfTI-1 header"));
    }
    if LE::read_i32(&b[0..4]) != HEADER_SIZE as i32 {
        return Err(format_err(path, "sizeof_hdr is not 348 (big-endian files are not supported)"));
    }
    if &b[344..347] != b"n+1" && &b[344..347] != b"ni1" {
        return Err(format_err(path, "missing NIfTI-1 magic"));
    }
    let dim = |i: usize| LE::read_i16(&b[40 + 2 * i..42 + 2 * i]);
    let ndim = dim(0);
    if !(3..=7).contains(&ndim) {
        return Err(format_err(path, format!("expected a 3D volume, dim[0] = {ndim}")));
    }
    for extra in 4..=ndim as usize {
        if dim(extra) > 1 {
            return Err(format_err(path, format!("expected a 3D volume, dim[{extra}] = {}", dim(extra))));
        }
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = dim(i + 1);
        if v < 1 {
            return Err(format_err(path, format!("non-positive dimension {v}")));
        }
        *d = v as usize;
    }
    let f32_at = |off: usize| LE::read_f32(&b[off..off + 4]) as f64;
    let datatype = LE::read_i16(&b[70..72]);
    let pixdim: Vec<f64> = (0..8).map(|i| f32_at(76 + 4 * i)).collect();
    let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
    let vox_offset = f32_at(108) as usize;
    let scl_slope = f32_at(112);
    let scl_inter = f32_at(116);
    let qform_code = LE::read_i16(&b[252..254]);
    let sform_code = LE::read_i16(&b[254..256]);

    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c);
            }
        }
        a[3][3] = 1.0;
        a
    } else if qform_code > 0 {
        qform_affine(
            [f32_at(256), f32_at(260), f32_at(264)],
            [f32_at(268), f32_at(272), f32_at(276)],
            spacing,
            pixdim[0],
        )
    } else {
        crate::volume::scaling_affine(spacing)
    };
    let header = Header { dims, spacing, affine, datatype, scl_slope, scl_inter };
    Ok((header, vox_offset.max(HEADER_SIZE)))
}

fn qform_affine(quat: [f64; 3], offset: [f64; 3], spacing: [f64; 3], qfac: f64) -> Affine {
    let [b, c, d] = quat;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let qfac = if qfac < 0.0 { -1.0 } else { 1.0 };
    let scale = [spacing[0], spacing[1], spacing[2] * qfac];
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * scale[j];
        }
        out[i][3] = offset[i];
    }
    out[3][3] = 1.0;
    out
}

fn decode_values(path: &Path, header: &Header, payload: &[u8]) -> Result<Vec<f64>> {
    let n = header.dims.iter().product::<usize>();
    let width = match header.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format_err(path, format!("unsupported datatype code {other}"))),
    };
    if payload.len() < n * width {
        return Err(format_err(path, format!("expected {} data bytes, found {}", n * width, payload.len())));
    }
    let chunks = payload[..n * width].chunks_exact(width);
    let values: Vec<f64> = match header.datatype {
        DT_UINT8 => chunks.map(|c| c[0] as f64).collect(),
        DT_INT8 => chunks.map(|c| c[0] as i8 as f64).collect(),
        DT_INT16 => chunks.map(|c| LE::read_i16(c) as f64).collect(),
        DT_UINT16 => chunks.map(|c| LE::read_u16(c) as f64).collect(),
        DT_INT32 => chunks.map(|c| LE::read_i32(c) as f64).collect(),
        DT_UINT32 => chunks.map(|c| LE::read_u32(c) as f64).collect(),
        DT_FLOAT32 => chunks.map(|c| LE::read_f32(c) as f64).collect(),
        _ => chunks.map(LE::read_f64).collect(),
    };
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        Ok(values.into_iter().map(|v| v * slope + inter).collect())
    } else {
        Ok(values)
    }
}

/// Reads only the header of a volume file.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = read_bytes(path)?;
    Ok(parse_header(path, &bytes)?.0)
}

fn read_grid(path: &Path) -> Result<(Array3<f64>, Header)> {
    let bytes = read_bytes(path)?;
    let (header, offset) = parse_header(path, &bytes)?;
    let values = decode_values(path, &header, bytes.get(offset..).unwrap_or(&[]))?;
    // x fastest on disk == Fortran order for an (x, y, z) array
    let grid = Array3::from_shape_vec(header.dims.f(), values)
        .map_err(|e| format_err(path, e.to_string()))?
        .as_standard_layout()
        .into_owned();
    Ok((grid, header))
}

/// Reads a scalar volume as `f32`.
pub fn read_scalar(path: &Path) -> Result<(Array3<f32>, Header)> {
    let (grid, header) = read_grid(path)?;
    Ok((grid.mapv(|v| v as f32), header))
}

/// Reads an integer label volume. Non-integral values are rejected.
pub fn read_labels(path: &Path) -> Result<(Array3<i32>, Header)> {
    let (grid, header) = read_grid(path)?;
    if let Some(v) = grid.iter().find(|v| v.fract() != 0.0 || v.abs() > i32::MAX as f64) {
        return Err(format_err(path, format!("label value {v} is not an integer")));
    }
    Ok((grid.mapv(|v| v as i32), header))
}

/// Reads a binary mask; any nonzero voxel is on.
pub fn read_mask(path: &Path) -> Result<(Array3<bool>, Header)> {
    let (grid, header) = read_grid(path)?;
    Ok((grid.mapv(|v| v != 0.0), header))
}

fn encode_header(dims: [usize; 3], spacing: [f64; 3], affine: &Affine, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LE::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r'; // regular
    LE::write_i16(&mut h[40..42], 3);
    for (i, d) in dims.iter().enumerate() {
        LE::write_i16(&mut h[42 + 2 * i..44 + 2 * i], *d as i16);
    }
    for i in 4..8 {
        LE::write_i16(&mut h[40 + 2 * i..42 + 2 * i], 1);
    }
    LE::write_i16(&mut h[70..72], datatype);
    LE::write_i16(&mut h[72..74], bitpix);
    LE::write_f32(&mut h[76..80], 1.0); // qfac
    for (i, s) in spacing.iter().enumerate() {
        LE::write_f32(&mut h[80 + 4 * i..84 + 4 * i], *s as f32);
    }
    LE::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LE::write_f32(&mut h[112..116], 1.0);
    h[123] = 2; // mm
    LE::write_i16(&mut h[254..256], 2); // sform_code: aligned
    for (r, row) in affine.iter().take(3).enumerate() {
        for (c, v) in row.iter().enumerate() {
            LE::write_f32(&mut h[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c], *v as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_file(path: &Path, mut bytes: Vec<u8>, payload: Vec<u8>) -> Result<()> {
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        // mtime 0 keeps the output byte-stable
        let mut enc = GzBuilder::new().mtime(0).write(file, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(&bytes)?;
        file.flush()?;
    }
    Ok(())
}

fn check_dims(dims: &[usize]) -> Result<[usize; 3]> {
    if dims.iter().any(|d| *d == 0 || *d > i16::MAX as usize) {
        return Err(Error::InvalidVolume(format!("dimensions {dims:?} do not fit a NIfTI-1 header")));
    }
    Ok([dims[0], dims[1], dims[2]])
}

/// Writes a float32 volume. `.gz` extension selects gzip compression.
pub fn write_scalar(path: &Path, data: &Array3<f32>, spacing: [f64; 3], affine: &Affine) -> Result<()> {
    let dims = check_dims(data.shape())?;
    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data.t().iter() {
        payload.write_f32::<LE>(*v)?;
    }
    write_file(path, encode_header(dims, spacing, affine, DT_FLOAT32, 32), payload)
}

/// Writes an integer label volume as uint8 when the values fit, int16 or
/// int32 otherwise.
pub fn write_labels(path: &Path, data: &Array3<i32>, spacing: [f64; 3], affine: &Affine) -> Result<()> {
    let dims = check_dims(data.shape())?;
    let (lo, hi) = data.iter().fold((0, 0), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let (dt, bits, payload) = if lo >= 0 && hi <= u8::MAX as i32 {
        (DT_UINT8, 8, data.t().iter().map(|v| *v as u8).collect::<Vec<_>>())
    } else if lo >= i16::MIN as i32 && hi <= i16::MAX as i32 {
        let mut p = Vec::with_capacity(data.len() * 2);
        for v in data.t().iter() {
            p.write_i16::<LE>(*v as i16)?;
        }
        (DT_INT16, 16, p)
    } else {
        let mut p = Vec::with_capacity(data.len() * 4);
        for v in data.t().iter() {
            p.write_i32::<LE>(*v)?;
        }
        (DT_INT32, 32, p)
    };
    write_file(path, encode_header(dims, spacing, affine, dt, bits), payload)
}

/// Writes a binary mask as uint8 0/1.
pub fn write_mask(path: &Path, data: &Array3<bool>, spacing: [f64; 3], affine: &Affine) -> Result<()> {
    let dims = check_dims(data.shape())?;
    let payload = data.t().iter().map(|v| *v as u8).collect();
    write_file(path, encode_header(dims, spacing, affine, DT_UINT8, 8), payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::scaling_affine;

    #[test]
    fn scalar_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nii.gz");
        let data = Array3::from_shape_fn((3, 4, 5), |(x, y, z)| (x * 100 + y * 10 + z) as f32 * 0.37 - 3.0);
        let spacing = [0.9375, 1.0, 2.5];
        let mut affine = scaling_affine(spacing);
        affine[0][3] = -12.5;
        write_scalar(&path, &data, spacing, &affine).unwrap();
        let (back, h) = read_scalar(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(h.dims, [3, 4, 5]);
        assert_eq!(h.spacing, spacing);
        assert_eq!(h.affine, affine);
    }

    #[test]
    fn disk_order_is_x_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.nii");
        let mut data = Array3::<i32>::zeros((2, 3, 1));
        data[[1, 0, 0]] = 5;
        data[[0, 1, 0]] = 9;
        write_labels(&path, &data, [1.0; 3], &scaling_affine([1.0; 3])).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[VOX_OFFSET..VOX_OFFSET + 3], &[0, 5, 9]);
        assert_eq!(read_labels(&path).unwrap().0, data);
    }

    #[test]
    fn wide_labels_use_int16() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.nii.gz");
        let data = Array3::from_shape_fn((2, 2, 2), |(x, _, _)| if x == 0 { -4 } else { 300 });
        write_labels(&path, &data, [1.0; 3], &scaling_affine([1.0; 3])).unwrap();
        let (back, h) = read_labels(&path).unwrap();
        assert_eq!(h.datatype, DT_INT16);
        assert_eq!(back, data);
    }

    #[test]
    fn gzip_output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((4, 4, 4), |(x, y, z)| (x ^ y ^ z) as f32);
        let a = dir.path().join("a.nii.gz");
        let b = dir.path().join("b.nii.gz");
        let aff = scaling_affine([1.0; 3]);
        write_scalar(&a, &data, [1.0; 3], &aff).unwrap();
        write_scalar(&b, &data, [1.0; 3], &aff).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn missing_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.nii.gz");
        assert!(matches!(read_scalar(&p), Err(Error::MissingFile(_))));
        let t = dir.path().join("t.nii");
        std::fs::write(&t, [0u8; 100]).unwrap();
        assert!(matches!(read_scalar(&t), Err(Error::Format { .. })));
    }

    #[test]
    fn qform_identity_quaternion() {
        let a = qform_affine([0.0; 3], [1.0, 2.0, 3.0], [2.0, 2.0, 2.0], 1.0);
        assert_eq!(a[0], [2.0, 0.0, 0.0, 1.0]);
        assert_eq!(a[2], [0.0, 0.0, 2.0, 3.0]);
    }
}
