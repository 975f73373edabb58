//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Little-endian files only. Reads 3D (or 4D with one frame) volumes of
//! common integer and float types and applies the intensity scaling; writes
//! float32.

use std::io::{Cursor, Seek, SeekFrom};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::motion_sim::ImageVolume;

const HEADER_SIZE: i32 = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

#[derive(Clone, Copy)]
enum DataType {
    U8,
    I16,
    I32,
    F32,
    F64,
    U16,
}

impl DataType {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            512 => Self::U16,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, r: &mut Cursor<&[u8]>) -> std::io::Result<f64> {
        Ok(match self {
            Self::U8 => f64::from(r.read_u8()?),
            Self::I16 => f64::from(r.read_i16::<LittleEndian>()?),
            Self::U16 => f64::from(r.read_u16::<LittleEndian>()?),
            Self::I32 => f64::from(r.read_i32::<LittleEndian>()?),
            Self::F32 => f64::from(r.read_f32::<LittleEndian>()?),
            Self::F64 => r.read_f64::<LittleEndian>()?,
        })
    }
}

pub fn read_nifti(path: &Path) -> Result<ImageVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes).map_err(|m| Error::data(path, m))
}

fn parse_nifti(bytes: &[u8]) -> std::result::Result<ImageVolume, String> {
    if bytes.len() < HEADER_SIZE as usize {
        return Err("file shorter than a NIfTI-1 header".into());
    }
    let mut r = Cursor::new(bytes);
    let io = |e: std::io::Error| e.to_string();
    let sizeof_hdr = r.read_i32::<LittleEndian>().map_err(io)?;
    if sizeof_hdr != HEADER_SIZE {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE {
            return Err("big-endian NIfTI files are not supported".into());
        }
        return Err(format!("bad header size {sizeof_hdr}"));
    }
    if &bytes[344..348] != MAGIC {
        return Err("missing n+1 magic (only single-file .nii is supported)".into());
    }
    r.seek(SeekFrom::Start(40)).map_err(io)?;
    let mut dim = [0i16; 8];
    r.read_i16_into::<LittleEndian>(&mut dim).map_err(io)?;
    r.seek(SeekFrom::Start(70)).map_err(io)?;
    let datatype = r.read_i16::<LittleEndian>().map_err(io)?;
    r.seek(SeekFrom::Start(76)).map_err(io)?;
    let mut pixdim = [0f32; 8];
    r.read_f32_into::<LittleEndian>(&mut pixdim).map_err(io)?;
    let vox_offset = r.read_f32::<LittleEndian>().map_err(io)? as usize;
    let scl_slope = r.read_f32::<LittleEndian>().map_err(io)?;
    let scl_inter = r.read_f32::<LittleEndian>().map_err(io)?;

    let ndim = dim[0];
    if !(3..=7).contains(&ndim) || dim[4..=ndim as usize].iter().any(|&d| d != 1) {
        return Err(format!(
            "expected a 3D volume, got dim {:?}",
            &dim[..=ndim.clamp(0, 7) as usize]
        ));
    }
    if dim[1..=3].iter().any(|&d| d < 1) {
        return Err(format!("non-positive dimensions {:?}", &dim[1..=3]));
    }
    let shape = (dim[1] as usize, dim[2] as usize, dim[3] as usize);
    let dt = DataType::from_code(datatype)
        .ok_or_else(|| format!("unsupported datatype code {datatype}"))?;
    let n = shape.0 * shape.1 * shape.2;
    if vox_offset < HEADER_SIZE as usize || bytes.len() < vox_offset + n * dt.size() {
        return Err("voxel data truncated".into());
    }
    let (slope, inter) = if scl_slope == 0.0 || !scl_slope.is_finite() {
        (1.0, 0.0)
    } else {
        (f64::from(scl_slope), f64::from(scl_inter))
    };
    r.seek(SeekFrom::Start(vox_offset as u64)).map_err(io)?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(dt.read(&mut r).map_err(io)? * slope + inter);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite voxel values".into());
    }
    // first index varies fastest on disk
    let data = Array3::from_shape_vec(shape.f(), values).map_err(|e| e.to_string())?;
    let spacing = (
        f64::from(pixdim[1]),
        f64::from(pixdim[2]),
        f64::from(pixdim[3]),
    );
    ImageVolume::new(data.as_standard_layout().into_owned(), spacing, 2).map_err(|e| e.to_string())
}

/// Writes `vol` as float32 with the axial axis last.
pub fn write_nifti(path: &Path, vol: &ImageVolume) -> Result<()> {
    let bytes = encode_nifti(vol);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_nifti(vol: &ImageVolume) -> Vec<u8> {
    let data = vol.data();
    let (nx, ny, nz) = data.dim();
    let sp = vol.spacing();
    let mut h = vec![0u8; VOX_OFFSET];
    let mut w = Cursor::new(&mut h[..]);
    let put =
        |w: &mut Cursor<&mut [u8]>, at: u64| w.seek(SeekFrom::Start(at)).expect("in-memory seek");

    w.write_i32::<LittleEndian>(HEADER_SIZE).unwrap();
    put(&mut w, 38);
    w.write_u8(b'r').unwrap();
    put(&mut w, 40);
    for d in [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1] {
        w.write_i16::<LittleEndian>(d).unwrap();
    }
    put(&mut w, 70);
    w.write_i16::<LittleEndian>(16).unwrap();
    w.write_i16::<LittleEndian>(32).unwrap();
    put(&mut w, 76);
    for p in [
        1.0,
        sp.0 as f32,
        sp.1 as f32,
        sp.2 as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ] {
        w.write_f32::<LittleEndian>(p).unwrap();
    }
    w.write_f32::<LittleEndian>(VOX_OFFSET as f32).unwrap();
    w.write_f32::<LittleEndian>(1.0).unwrap();
    w.write_f32::<LittleEndian>(0.0).unwrap();
    put(&mut w, 123);
    // millimeters
    w.write_u8(2).unwrap();
    put(&mut w, 344);
    std::io::Write::write_all(&mut w, MAGIC).unwrap();

    let mut out = h;
    out.reserve(nx * ny * nz * 4);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out.write_f32::<LittleEndian>(data[[i, j, k]] as f32)
                    .unwrap();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let data =
            Array3::from_shape_fn((5, 4, 3), |(i, j, k)| (i * 100 + j * 10 + k) as f64 * 0.5);
        let vol = ImageVolume::new(data, (2.5, 2.5, 4.0), 2).unwrap();
        let bytes = encode_nifti(&vol);
        assert_eq!(bytes.len(), 352 + 60 * 4);
        let back = parse_nifti(&bytes).unwrap();
        assert_eq!(back.data(), vol.data());
        assert_eq!(back.spacing(), (2.5, 2.5, 4.0));
    }

    #[test]
    fn scaled_integers() {
        let vol = ImageVolume::new(Array3::zeros((2, 2, 2)), (3.0, 3.0, 3.0), 2).unwrap();
        let mut bytes = encode_nifti(&vol)[..352].to_vec();
        bytes[70..72].copy_from_slice(&4i16.to_le_bytes());
        bytes[72..74].copy_from_slice(&16i16.to_le_bytes());
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        for v in 0..8i16 {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let back = parse_nifti(&bytes).unwrap();
        // voxel (1, 0, 1) is element 1 + 4 = 5 on disk
        assert_eq!(back.data()[[1, 0, 1]], 11.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_nifti(&[0u8; 10]).is_err());
        let mut bytes = vec![0u8; 400];
        bytes[..4].copy_from_slice(&348i32.to_be_bytes());
        assert!(parse_nifti(&bytes).unwrap_err().contains("big-endian"));
    }
}
