//! Bit-exact single-frame NIfTI-1 reader/writer.
//!
//! Little-endian only. Reads uint8/int16/float32/float64 payloads with
//! scl_slope/scl_inter applied; writes float32 with vox_offset 352,
//! scl_slope 1, scl_inter 0 and magic "n+1\0".

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::Volume;

const HEADER_SIZE: usize = 348;
const MAGIC_NP1: &[u8; 4] = b"n+1\0";
const MAGIC_NI1: &[u8; 4] = b"ni1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Header fields surfaced to callers on load.
#[derive(Debug, Clone)]
pub struct NiftiMeta {
    pub dim: [i16; 8],
    pub pixdim: [f32; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub descrip: String,
    pub magic: [u8; 4],
}

/// Loads a single-frame NIfTI-1 volume.
///
/// Accepts dim[0] == 3, or dim[0] == 4 with a singleton 4th dimension.
/// "ni1\0" headers read their payload from the sibling `.img` file.
pub fn load_nifti<P: AsRef<Path>>(path: P) -> Result<(Volume, NiftiMeta)> {
    let path = path.as_ref();
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = [0u8; HEADER_SIZE];
    reader.read_exact(&mut header).map_err(|_| {
        Error::MalformedHeader(format!("file shorter than {HEADER_SIZE}-byte header"))
    })?;

    let sizeof_hdr = i32::from_le_bytes(header[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        // 1543569408 is 348 byte-swapped: a big-endian file, which we reject.
        return Err(Error::MalformedHeader(format!(
            "sizeof_hdr = {sizeof_hdr}, expected 348 (little-endian)"
        )));
    }
    let magic: [u8; 4] = header[344..348].try_into().unwrap();
    if &magic != MAGIC_NP1 && &magic != MAGIC_NI1 {
        return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = i16::from_le_bytes(header[40 + 2 * i..42 + 2 * i].try_into().unwrap());
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = f32::from_le_bytes(header[76 + 4 * i..80 + 4 * i].try_into().unwrap());
    }
    let datatype = i16::from_le_bytes(header[70..72].try_into().unwrap());
    let bitpix = i16::from_le_bytes(header[72..74].try_into().unwrap());
    let vox_offset = f32::from_le_bytes(header[108..112].try_into().unwrap());
    let scl_slope = f32::from_le_bytes(header[112..116].try_into().unwrap());
    let scl_inter = f32::from_le_bytes(header[116..120].try_into().unwrap());
    let descrip_bytes = &header[148..228];
    let descrip_end = descrip_bytes.iter().position(|&b| b == 0).unwrap_or(80);
    let descrip = String::from_utf8_lossy(&descrip_bytes[..descrip_end]).into_owned();

    match dim[0] {
        3 => {}
        4 if dim[4] == 1 => {}
        other => {
            return Err(Error::MalformedHeader(format!(
                "dim[0] = {other} not supported (need 3, or 4 with singleton 4th dim)"
            )));
        }
    }
    let (nx, ny, nz) = (dim[1], dim[2], dim[3]);
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err(Error::MalformedHeader(format!(
            "non-positive spatial dims ({nx},{ny},{nz})"
        )));
    }
    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
    let n = nx * ny * nz;

    let bytes_per = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };

    // ni1: payload lives in the sibling .img file at offset 0
    let mut payload_reader: Box<dyn Read> = if &magic == MAGIC_NI1 {
        let img = path.with_extension("img");
        Box::new(BufReader::new(File::open(img)?))
    } else {
        if vox_offset < 352.0 {
            return Err(Error::MalformedHeader(format!(
                "vox_offset = {vox_offset} < 352"
            )));
        }
        reader.seek(SeekFrom::Start(vox_offset as u64))?;
        Box::new(reader)
    };

    let mut raw = vec![0u8; n * bytes_per];
    payload_reader.read_exact(&mut raw).map_err(|_| {
        Error::MalformedHeader(format!("payload truncated, expected {n} samples"))
    })?;

    let mut values = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => values.extend(raw.iter().map(|&b| b as f64)),
        DT_INT16 => {
            for c in raw.chunks_exact(2) {
                values.push(i16::from_le_bytes([c[0], c[1]]) as f64);
            }
        }
        DT_FLOAT32 => {
            for c in raw.chunks_exact(4) {
                values.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
            }
        }
        DT_FLOAT64 => {
            for c in raw.chunks_exact(8) {
                values.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
        }
        _ => unreachable!(),
    }
    if scl_slope != 0.0 {
        let (m, b) = (scl_slope as f64, scl_inter as f64);
        for v in &mut values {
            *v = *v * m + b;
        }
    }

    // payload is x-fastest; our grid is indexed [x, y, z]
    let mut data = Array3::zeros((nx, ny, nz));
    let mut idx = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data[[x, y, z]] = values[idx];
                idx += 1;
            }
        }
    }

    let spacing = [
        positive_or_unit(pixdim[1]),
        positive_or_unit(pixdim[2]),
        positive_or_unit(pixdim[3]),
    ];
    let vol = Volume::new(data, spacing)?;
    let meta = NiftiMeta {
        dim,
        pixdim,
        datatype,
        bitpix,
        vox_offset,
        scl_slope,
        scl_inter,
        descrip,
        magic,
    };
    Ok((vol, meta))
}

fn positive_or_unit(p: f32) -> f64 {
    if p > 0.0 {
        p as f64
    } else {
        1.0
    }
}

/// Writes a little-endian NIfTI-1 file with float32 payload.
pub fn save_nifti<P: AsRef<Path>>(vol: &Volume, path: P) -> Result<()> {
    save_nifti_with_descrip(vol, path, "artiqc")
}

/// Like [`save_nifti`] with a caller-supplied descrip field (<= 79 bytes kept).
pub fn save_nifti_with_descrip<P: AsRef<Path>>(vol: &Volume, path: P, descrip: &str) -> Result<()> {
    let (nx, ny, nz) = vol.shape();
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::InvalidParameter("refusing to write empty volume".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);

    w.write_i32::<LittleEndian>(348)?; // sizeof_hdr
    w.write_all(&[0u8; 10])?; // data_type (unused)
    w.write_all(&[0u8; 18])?; // db_name (unused)
    w.write_i32::<LittleEndian>(0)?; // extents
    w.write_i16::<LittleEndian>(0)?; // session_error
    w.write_u8(b'r')?; // regular
    w.write_u8(0)?; // dim_info

    let dim: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for d in dim {
        w.write_i16::<LittleEndian>(d)?;
    }
    for _ in 0..3 {
        w.write_f32::<LittleEndian>(0.0)?; // intent_p1..p3
    }
    w.write_i16::<LittleEndian>(0)?; // intent_code
    w.write_i16::<LittleEndian>(DT_FLOAT32)?; // datatype
    w.write_i16::<LittleEndian>(32)?; // bitpix
    w.write_i16::<LittleEndian>(0)?; // slice_start

    let sp = vol.spacing();
    let pixdim: [f32; 8] = [1.0, sp[0] as f32, sp[1] as f32, sp[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for p in pixdim {
        w.write_f32::<LittleEndian>(p)?;
    }
    w.write_f32::<LittleEndian>(352.0)?; // vox_offset
    w.write_f32::<LittleEndian>(1.0)?; // scl_slope
    w.write_f32::<LittleEndian>(0.0)?; // scl_inter
    w.write_i16::<LittleEndian>(0)?; // slice_end
    w.write_u8(0)?; // slice_code
    w.write_u8(10)?; // xyzt_units: mm | sec
    w.write_f32::<LittleEndian>(0.0)?; // cal_max
    w.write_f32::<LittleEndian>(0.0)?; // cal_min
    w.write_f32::<LittleEndian>(0.0)?; // slice_duration
    w.write_f32::<LittleEndian>(0.0)?; // toffset
    w.write_i32::<LittleEndian>(0)?; // glmax
    w.write_i32::<LittleEndian>(0)?; // glmin

    let mut descrip_buf = [0u8; 80];
    let bytes = descrip.as_bytes();
    let len = bytes.len().min(79);
    descrip_buf[..len].copy_from_slice(&bytes[..len]);
    w.write_all(&descrip_buf)?;
    w.write_all(&[0u8; 24])?; // aux_file

    w.write_i16::<LittleEndian>(0)?; // qform_code
    w.write_i16::<LittleEndian>(1)?; // sform_code: scaled axes
    for _ in 0..3 {
        w.write_f32::<LittleEndian>(0.0)?; // quatern b,c,d
    }
    for _ in 0..3 {
        w.write_f32::<LittleEndian>(0.0)?; // qoffset x,y,z
    }
    // srow: diagonal spacing, zero offset
    let srows = [
        [sp[0] as f32, 0.0, 0.0, 0.0],
        [0.0, sp[1] as f32, 0.0, 0.0],
        [0.0, 0.0, sp[2] as f32, 0.0],
    ];
    for row in srows {
        for v in row {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.write_all(&[0u8; 16])?; // intent_name
    w.write_all(MAGIC_NP1)?;

    w.write_all(&[0u8; 4])?; // extension flag: none

    let data = vol.data();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                w.write_f32::<LittleEndian>(data[[x, y, z]] as f32)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::tempdir;

    #[test]
    fn save_load_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.nii");
        let mut rng = crate::rng::rng_stream(3, 0);
        let data = Array3::from_shape_fn((5, 4, 3), |_| rng.gen_range(-2.0..2.0f64));
        // float32-representable values only, so the f64 round trip is exact
        let data = data.mapv(|v| v as f32 as f64);
        let vol = Volume::new(data, [0.5, 1.0, 2.0]).unwrap();
        save_nifti(&vol, &path).unwrap();
        let (loaded, meta) = load_nifti(&path).unwrap();
        assert_eq!(vol.data(), loaded.data());
        assert_eq!(loaded.spacing(), [0.5, 1.0, 2.0]);
        assert_eq!(meta.datatype, DT_FLOAT32);
        assert_eq!(meta.vox_offset, 352.0);

        // second save is byte-identical
        let path2 = dir.path().join("v2.nii");
        save_nifti(&loaded, &path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn constant_volume_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.nii");
        let vol = Volume::constant((4, 4, 4), 0.5);
        save_nifti(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 352 + 64 * 4);
        assert_eq!(&bytes[0..4], &348i32.to_le_bytes());
        assert_eq!(&bytes[344..348], MAGIC_NP1);
        let half = 0.5f32.to_le_bytes();
        for i in 0..64 {
            assert_eq!(&bytes[352 + 4 * i..356 + 4 * i], &half);
        }
    }

    #[test]
    fn header_bytes_follow_layout() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.nii");
        let vol = Volume::constant((2, 3, 4), 0.0);
        save_nifti(&vol, &path).unwrap();
        let b = std::fs::read(&path).unwrap();
        // dim at offset 40: [3, 2, 3, 4, 1, ...]
        assert_eq!(&b[40..50], &[3, 0, 2, 0, 3, 0, 4, 0, 1, 0]);
        // datatype float32 (16) at 70, bitpix 32 at 72
        assert_eq!(&b[70..74], &[16, 0, 32, 0]);
        // vox_offset 352.0 at 108, scl_slope 1.0 at 112, scl_inter 0.0 at 116
        assert_eq!(&b[108..112], &352.0f32.to_le_bytes());
        assert_eq!(&b[112..116], &1.0f32.to_le_bytes());
        assert_eq!(&b[116..120], &0.0f32.to_le_bytes());
    }

    #[test]
    fn zero_payload_loads_as_zeros() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("z.nii");
        let vol = Volume::constant((2, 2, 2), 0.0);
        save_nifti(&vol, &path).unwrap();
        let (loaded, _) = load_nifti(&path).unwrap();
        assert_eq!(loaded.shape(), (2, 2, 2));
        assert!(loaded.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn int16_slope_intercept_applied() {
        // hand-built header: int16 payload {100, 200}, slope 0.5, inter 1 -> {51, 101}
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.nii");
        let vol = Volume::constant((2, 1, 1), 0.0);
        save_nifti(&vol, &path).unwrap();
        let mut b = std::fs::read(&path).unwrap();
        b[70..72].copy_from_slice(&DT_INT16.to_le_bytes()); // datatype
        b[72..74].copy_from_slice(&16i16.to_le_bytes()); // bitpix
        b[112..116].copy_from_slice(&0.5f32.to_le_bytes()); // scl_slope
        b[116..120].copy_from_slice(&1.0f32.to_le_bytes()); // scl_inter
        b.truncate(352);
        b.extend_from_slice(&100i16.to_le_bytes());
        b.extend_from_slice(&200i16.to_le_bytes());
        std::fs::write(&path, &b).unwrap();
        let (loaded, meta) = load_nifti(&path).unwrap();
        let got: Vec<f64> = loaded.data().iter().copied().collect();
        assert_eq!(got, vec![51.0, 101.0]);
        assert_eq!(meta.scl_slope, 0.5);
    }

    #[test]
    fn malformed_header_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        std::fs::write(&path, vec![0u8; 400]).unwrap();
        assert!(matches!(load_nifti(&path), Err(Error::MalformedHeader(_))));

        // valid file with unsupported datatype
        let path2 = dir.path().join("dt.nii");
        let vol = Volume::constant((2, 1, 1), 0.0);
        save_nifti(&vol, &path2).unwrap();
        let mut b = std::fs::read(&path2).unwrap();
        b[70..72].copy_from_slice(&8i16.to_le_bytes()); // int32: unsupported
        std::fs::write(&path2, &b).unwrap();
        assert!(matches!(load_nifti(&path2), Err(Error::UnsupportedDatatype(8))));
    }

    #[test]
    fn four_dim_singleton_accepted() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d4.nii");
        let vol = Volume::constant((2, 2, 2), 1.0);
        save_nifti(&vol, &path).unwrap();
        let mut b = std::fs::read(&path).unwrap();
        b[40..42].copy_from_slice(&4i16.to_le_bytes()); // dim[0] = 4, dim[4] already 1
        std::fs::write(&path, &b).unwrap();
        assert!(load_nifti(&path).is_ok());

        b[48..50].copy_from_slice(&2i16.to_le_bytes()); // dim[4] = 2: rejected
        std::fs::write(&path, &b).unwrap();
        assert!(load_nifti(&path).is_err());
    }
}
