//! Single-file NIfTI-1 reader and writer.
//!
//! Reader contract: 348-byte header with magic `n+1\0`, vox_offset ≥ 352,
//! datatype int16 (4), float32 (16) or float64 (64), either endianness
//! (sniffed via dim[0] ∈ [1, 7]), scl_slope/scl_inter applied when
//! scl_slope ≠ 0, trailing singleton dims squeezed to a 3D volume.
//! Writer contract: float32 little-endian, magic `n+1\0`, vox_offset 352
//! (348-byte header plus 4 zero extension bytes), sform carries the affine.

use super::{Result, Volume, VolumeError};
use std::io::{Read, Write};
use std::path::Path;

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const OFF_SIZEOF_HDR: usize = 0;
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_QUATERN: usize = 256; // b, c, d then qoffset x, y, z
const OFF_SROW_X: usize = 280;
const OFF_MAGIC: usize = 344;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

struct Field<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl<'a> Field<'a> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }
    fn i32(&self, off: usize) -> i32 {
        let b = [self.bytes[off], self.bytes[off + 1], self.bytes[off + 2], self.bytes[off + 3]];
        match self.endian {
            Endian::Little => i32::from_le_bytes(b),
            Endian::Big => i32::from_be_bytes(b),
        }
    }
    fn f32(&self, off: usize) -> f32 {
        let b = [self.bytes[off], self.bytes[off + 1], self.bytes[off + 2], self.bytes[off + 3]];
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let mut file = std::fs::File::open(path.as_ref())?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    read_nifti_bytes(&bytes)
}

pub(crate) fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < VOX_OFFSET {
        return Err(VolumeError::Format(format!("file too small ({} bytes)", bytes.len())));
    }
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(VolumeError::Format(format!(
            "bad magic {:?}, want \"n+1\\0\"",
            &bytes[OFF_MAGIC..OFF_MAGIC + 4]
        )));
    }
    // endianness sniff: dim[0] must land in 1..=7 under the right byte order
    let dim0_le = i16::from_le_bytes([bytes[OFF_DIM], bytes[OFF_DIM + 1]]);
    let endian = if (1..=7).contains(&dim0_le) {
        Endian::Little
    } else {
        let dim0_be = i16::from_be_bytes([bytes[OFF_DIM], bytes[OFF_DIM + 1]]);
        if (1..=7).contains(&dim0_be) {
            Endian::Big
        } else {
            return Err(VolumeError::Format(format!("dim[0] = {dim0_le} outside 1..=7 in either byte order")));
        }
    };
    let f = Field { bytes, endian };
    if f.i32(OFF_SIZEOF_HDR) != HEADER_LEN as i32 {
        return Err(VolumeError::Format(format!("sizeof_hdr {} != 348", f.i32(OFF_SIZEOF_HDR))));
    }
    let ndim = f.i16(OFF_DIM) as usize;
    let mut dims: Vec<usize> = (1..=ndim).map(|i| f.i16(OFF_DIM + 2 * i).max(0) as usize).collect();
    while dims.len() > 3 && dims.last() == Some(&1) {
        dims.pop();
    }
    if dims.len() > 3 {
        return Err(VolumeError::Unsupported(format!("more than three non-singleton dims: {dims:?}")));
    }
    while dims.len() < 3 {
        dims.push(1);
    }
    if dims.contains(&0) {
        return Err(VolumeError::Format(format!("zero extent in dims {dims:?}")));
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let numel = nx * ny * nz;

    let datatype = f.i16(OFF_DATATYPE);
    let bitpix = f.i16(OFF_BITPIX);
    let elem_size = match (datatype, bitpix) {
        (DT_INT16, 16) => 2usize,
        (DT_FLOAT32, 32) => 4,
        (DT_FLOAT64, 64) => 8,
        _ => {
            return Err(VolumeError::Unsupported(format!(
                "datatype {datatype} / bitpix {bitpix} (supported: int16, float32, float64)"
            )))
        }
    };
    let vox_offset = f.f32(OFF_VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= VOX_OFFSET as f32) {
        return Err(VolumeError::Format(format!("vox_offset {vox_offset} < 352")));
    }
    let start = vox_offset as usize;
    let need = start + numel * elem_size;
    if bytes.len() < need {
        return Err(VolumeError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("payload truncated: need {need} bytes, have {}", bytes.len()),
        )));
    }
    let payload = &bytes[start..need];

    let slope = f.f32(OFF_SCL_SLOPE);
    let inter = f.f32(OFF_SCL_INTER);
    let scale = |v: f32| if slope != 0.0 { slope * v + inter } else { v };
    let rd_f32 = |chunk: &[u8]| -> f32 {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        match endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    };
    let data: Vec<f32> = match datatype {
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                let raw = match endian {
                    Endian::Little => i16::from_le_bytes(b),
                    Endian::Big => i16::from_be_bytes(b),
                };
                scale(raw as f32)
            })
            .collect(),
        DT_FLOAT32 => payload.chunks_exact(4).map(|c| scale(rd_f32(c))).collect(),
        DT_FLOAT64 => payload
            .chunks_exact(8)
            .map(|c| {
                let b: [u8; 8] = c.try_into().unwrap();
                let raw = match endian {
                    Endian::Little => f64::from_le_bytes(b),
                    Endian::Big => f64::from_be_bytes(b),
                };
                scale(raw as f32)
            })
            .collect(),
        _ => unreachable!(),
    };

    let spacing = (f.f32(OFF_PIXDIM + 12).abs(), f.f32(OFF_PIXDIM + 8).abs(), f.f32(OFF_PIXDIM + 4).abs());
    let sform = f.i16(OFF_SFORM_CODE);
    let qform = f.i16(OFF_QFORM_CODE);
    let affine = if sform > 0 {
        let mut a = [[0.0f32; 4]; 4];
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f.f32(OFF_SROW_X + 16 * r + 4 * c);
            }
        }
        a[3] = [0.0, 0.0, 0.0, 1.0];
        a
    } else if qform > 0 {
        quaternion_affine(&f)
    } else {
        let mut a = [[0.0f32; 4]; 4];
        a[0][0] = spacing.2;
        a[1][1] = spacing.1;
        a[2][2] = spacing.0;
        a[3][3] = 1.0;
        a
    };

    Volume::with_affine((nz, ny, nx), spacing, affine, data)
}

/// NIfTI "method 2": rotation from the quaternion plus qoffset translation.
fn quaternion_affine(f: &Field) -> [[f32; 4]; 4] {
    let b = f.f32(OFF_QUATERN) as f64;
    let c = f.f32(OFF_QUATERN + 4) as f64;
    let d = f.f32(OFF_QUATERN + 8) as f64;
    let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
    let qfac = if f.f32(OFF_PIXDIM) < 0.0 { -1.0f64 } else { 1.0 };
    let (sx, sy, sz) = (f.f32(OFF_PIXDIM + 4) as f64, f.f32(OFF_PIXDIM + 8) as f64, f.f32(OFF_PIXDIM + 12) as f64);
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    let mut out = [[0.0f32; 4]; 4];
    for i in 0..3 {
        out[i][0] = (r[i][0] * sx) as f32;
        out[i][1] = (r[i][1] * sy) as f32;
        out[i][2] = (r[i][2] * sz * qfac) as f32;
        out[i][3] = f.f32(OFF_QUATERN + 12 + 4 * i);
    }
    out[3] = [0.0, 0.0, 0.0, 1.0];
    out
}

pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_nifti_bytes(volume)?;
    let mut file = std::fs::File::create(path.as_ref())?;
    file.write_all(&bytes)?;
    Ok(())
}

pub(crate) fn write_nifti_bytes(volume: &Volume) -> Result<Vec<u8>> {
    let (d, h, w) = volume.dims;
    if d > i16::MAX as usize || h > i16::MAX as usize || w > i16::MAX as usize {
        return Err(VolumeError::Invalid(format!("dims {:?} exceed int16 header fields", volume.dims)));
    }
    let mut out = vec![0u8; VOX_OFFSET + volume.data.len() * 4];
    let put_i16 = |buf: &mut [u8], off: usize, v: i16| buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |buf: &mut [u8], off: usize, v: i32| buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |buf: &mut [u8], off: usize, v: f32| buf[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut out, OFF_SIZEOF_HDR, HEADER_LEN as i32);
    put_i16(&mut out, OFF_DIM, 3);
    put_i16(&mut out, OFF_DIM + 2, w as i16); // x fastest
    put_i16(&mut out, OFF_DIM + 4, h as i16);
    put_i16(&mut out, OFF_DIM + 6, d as i16);
    for i in 4..8 {
        put_i16(&mut out, OFF_DIM + 2 * i, 1);
    }
    put_i16(&mut out, OFF_DATATYPE, DT_FLOAT32);
    put_i16(&mut out, OFF_BITPIX, 32);
    put_f32(&mut out, OFF_PIXDIM, 1.0);
    put_f32(&mut out, OFF_PIXDIM + 4, volume.spacing.2);
    put_f32(&mut out, OFF_PIXDIM + 8, volume.spacing.1);
    put_f32(&mut out, OFF_PIXDIM + 12, volume.spacing.0);
    put_f32(&mut out, OFF_VOX_OFFSET, VOX_OFFSET as f32);
    // slope 0 means "no scaling"; keeps the payload bitwise on round trip
    put_f32(&mut out, OFF_SCL_SLOPE, 0.0);
    put_f32(&mut out, OFF_SCL_INTER, 0.0);
    put_i16(&mut out, OFF_QFORM_CODE, 0);
    put_i16(&mut out, OFF_SFORM_CODE, 1);
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut out, OFF_SROW_X + 16 * r + 4 * c, volume.affine[r][c]);
        }
    }
    out[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);
    // bytes 348..352 are the zeroed extension flag

    for (i, &v) in volume.data.iter().enumerate() {
        out[VOX_OFFSET + 4 * i..VOX_OFFSET + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}
