//! Two-head encoder-decoder segmentation model and its checkpoint format.
//!
//! Architecture: two resolution levels with 3x3x1 convolutions, leaky-ReLU
//! activations and one skip connection. One head emits class logits, the
//! other per-voxel log variances (task channel first, one channel per
//! decoupled augmentation mode after it). Heads start at zero so a fresh
//! model predicts uniform logits and unit variance everywhere.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, Array4};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_stream;
use crate::toytrain::autodiff::{Tape, Tensor, VarId};
use crate::uncmath::{LogitField, UncertaintyBundle};
use crate::volume::Volume;

const CHECKPOINT_MAGIC: &[u8; 4] = b"AQCM";
const CHECKPOINT_VERSION: u32 = 1;

/// Leaky-ReLU negative slope used throughout the trunk.
pub const LEAKY_SLOPE: f32 = 0.01;

/// Self-describing checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub width: usize,
    pub num_classes: usize,
    /// uncertainty channels: 1 task + one per augmentation mode
    pub num_unc: usize,
    /// names of the decoupled modes behind channels 1.., in order
    pub aug_kinds: Vec<String>,
    pub stage: String,
    pub seed: u64,
    pub tool_version: String,
    pub phantom_shape: [usize; 3],
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// The toy segmentation model: parameters plus architecture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub header: ModelHeader,
    pub params: Vec<Param>,
}

impl ToyModel {
    /// Fresh model; trunk weights He-initialized from the seed, heads zero.
    pub fn new(header: ModelHeader) -> Result<Self> {
        let w = header.width;
        let c = header.num_classes;
        let u = header.num_unc;
        if w == 0 || c < 2 || u == 0 {
            return Err(Error::InvalidParameter(format!(
                "bad architecture: width {w}, classes {c}, unc channels {u}"
            )));
        }
        let mut rng = rng_stream(header.seed, 0xA11C);
        let mut params = Vec::new();
        let mut add_conv = |name: &str, cout: usize, cin: usize, k: (usize, usize, usize), zero: bool, rng: &mut rand_chacha::ChaCha8Rng| {
            let shape = [cout, cin, k.0, k.1, k.2];
            let fan_in = (cin * k.0 * k.1 * k.2) as f64;
            let tensor = if zero {
                Tensor::zeros(&shape)
            } else {
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                let len: usize = shape.iter().product();
                Tensor::from_vec(
                    (0..len).map(|_| normal.sample(rng) as f32).collect(),
                    &shape,
                )
            };
            params.push(Param { name: format!("{name}.weight"), tensor });
            params.push(Param { name: format!("{name}.bias"), tensor: Tensor::zeros(&[cout]) });
        };
        add_conv("enc1", w, 1, (3, 3, 1), false, &mut rng);
        add_conv("enc2", w, w, (3, 3, 1), false, &mut rng);
        add_conv("mid1", 2 * w, w, (3, 3, 1), false, &mut rng);
        add_conv("mid2", 2 * w, 2 * w, (3, 3, 1), false, &mut rng);
        add_conv("dec1", w, 3 * w, (3, 3, 1), false, &mut rng);
        add_conv("dec2", w, w, (3, 3, 1), false, &mut rng);
        add_conv("head_seg", c, w, (1, 1, 1), true, &mut rng);
        add_conv("head_unc", u, w, (1, 1, 1), true, &mut rng);
        let model = Self { header, params };
        debug_assert!(model.num_parameters() <= 50_000, "parameter budget exceeded");
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Copies every parameter with a matching name and shape from `source`
    /// (trunk and segmentation head). For the uncertainty head, whose
    /// channel count differs across stages, only the task channel (output
    /// channel 0) is copied; augmentation channels keep their zero init.
    pub fn warm_start_from(&mut self, source: &ToyModel) {
        for param in &mut self.params {
            let Some(src) = source.params.iter().find(|p| p.name == param.name) else {
                continue;
            };
            if src.tensor.shape == param.tensor.shape {
                param.tensor = src.tensor.clone();
            } else if param.name.starts_with("head_unc") && src.tensor.shape.len() == param.tensor.shape.len()
            {
                // channel 0 rows have identical extents in both models
                let per_channel = param.tensor.len() / param.tensor.shape[0];
                let src_per_channel = src.tensor.len() / src.tensor.shape[0];
                let n = per_channel.min(src_per_channel);
                param.tensor.data[..n].copy_from_slice(&src.tensor.data[..n]);
            }
        }
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self
            .params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .tensor
    }

    /// Records the forward graph on a tape. Returns (seg logits, log
    /// variances, leaf id per parameter in `params` order).
    pub fn forward_tape(&self, tape: &mut Tape, input: VarId) -> Result<(VarId, VarId, Vec<VarId>)> {
        let shape = tape.value(input).shape.clone();
        if shape.len() != 4 || shape[0] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "model input must be [1, x, y, z], got {shape:?}"
            )));
        }
        if shape[1] % 2 != 0 || shape[2] % 2 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "x and y extents must be even for the 2-level trunk, got {shape:?}"
            )));
        }
        let ids: Vec<VarId> = self.params.iter().map(|p| tape.leaf(p.tensor.clone())).collect();
        let get = |name: &str| -> (VarId, VarId) {
            let wi = self.params.iter().position(|p| p.name == format!("{name}.weight")).unwrap();
            let bi = self.params.iter().position(|p| p.name == format!("{name}.bias")).unwrap();
            (ids[wi], ids[bi])
        };

        let (w, b) = get("enc1");
        let e1 = tape.conv3(input, w, b);
        let e1 = tape.leaky_relu(e1, LEAKY_SLOPE);
        let (w, b) = get("enc2");
        let e2 = tape.conv3(e1, w, b);
        let e2 = tape.leaky_relu(e2, LEAKY_SLOPE);

        let down = tape.avg_pool_xy(e2);
        let (w, b) = get("mid1");
        let m1 = tape.conv3(down, w, b);
        let m1 = tape.leaky_relu(m1, LEAKY_SLOPE);
        let (w, b) = get("mid2");
        let m2 = tape.conv3(m1, w, b);
        let m2 = tape.leaky_relu(m2, LEAKY_SLOPE);

        let up = tape.upsample_xy(m2);
        let cat = tape.concat(e2, up);
        let (w, b) = get("dec1");
        let d1 = tape.conv3(cat, w, b);
        let d1 = tape.leaky_relu(d1, LEAKY_SLOPE);
        let (w, b) = get("dec2");
        let d2 = tape.conv3(d1, w, b);
        let d2 = tape.leaky_relu(d2, LEAKY_SLOPE);

        let (w, b) = get("head_seg");
        let seg = tape.conv3(d2, w, b);
        let (w, b) = get("head_unc");
        let unc = tape.conv3(d2, w, b);
        Ok((seg, unc, ids))
    }

    /// Inference: logits and the uncertainty bundle for a volume.
    pub fn infer(&self, vol: &Volume) -> Result<(LogitField, UncertaintyBundle)> {
        let mut tape = Tape::new();
        let input = tape.leaf(volume_to_tensor(vol));
        let (seg, unc, _) = self.forward_tape(&mut tape, input)?;
        let logits = tensor_to_array4(tape.value(seg));
        let unc_arr = tensor_to_array4(tape.value(unc));
        let (channels, nx, ny, nz) = unc_arr.dim();
        let mut s_task = Array3::zeros((nx, ny, nz));
        s_task.assign(&unc_arr.index_axis(ndarray::Axis(0), 0));
        let s_aug: Vec<Array3<f64>> = (1..channels)
            .map(|c| {
                let mut a = Array3::zeros((nx, ny, nz));
                a.assign(&unc_arr.index_axis(ndarray::Axis(0), c));
                a
            })
            .collect();
        Ok((
            LogitField::new(logits)?,
            UncertaintyBundle::new(s_task, s_aug)?,
        ))
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name)?;
            w.write_u8(p.tensor.shape.len() as u8)?;
            for &d in &p.tensor.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &p.tensor.data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.read_u32::<LittleEndian>()? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: ModelHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?;
            let ndim = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0f32; len];
            for v in &mut data {
                *v = r.read_f32::<LittleEndian>()?;
            }
            params.push(Param { name, tensor: Tensor::from_vec(data, &shape) });
        }
        Ok(Self { header, params })
    }
}

/// Volume (f64) to a [1, x, y, z] f32 tensor.
pub fn volume_to_tensor(vol: &Volume) -> Tensor {
    let (nx, ny, nz) = vol.shape();
    let mut data = Vec::with_capacity(nx * ny * nz);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                data.push(vol.data()[[x, y, z]] as f32);
            }
        }
    }
    Tensor::from_vec(data, &[1, nx, ny, nz])
}

/// [C, x, y, z] tensor to an f64 array.
pub fn tensor_to_array4(t: &Tensor) -> Array4<f64> {
    let (c, x, y, z) = t.dim4();
    Array4::from_shape_vec((c, x, y, z), t.data.iter().map(|&v| v as f64).collect())
        .expect("tensor layout is row-major")
}

/// [C, x, y, z] f64 array to an f32 tensor.
pub fn array4_to_tensor(a: &Array4<f64>) -> Tensor {
    let (c, x, y, z) = a.dim();
    Tensor::from_vec(a.iter().map(|&v| v as f32).collect(), &[c, x, y, z])
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_header() -> ModelHeader {
        ModelHeader {
            width: 4,
            num_classes: 2,
            num_unc: 3,
            aug_kinds: vec!["k_noise".into(), "blur".into()],
            stage: "test".into(),
            seed: 5,
            tool_version: crate::VERSION.into(),
            phantom_shape: [16, 16, 2],
        }
    }

    #[test]
    fn zero_heads_give_uniform_logits_and_unit_variance() {
        let model = ToyModel::new(small_header()).unwrap();
        let vol = crate::toytrain::phantom::generate_phantoms(1, 3, (16, 16, 2))
            .unwrap()
            .images
            .remove(0);
        let (logits, bundle) = model.infer(&vol).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(bundle.s_task.iter().all(|&v| v == 0.0));
        assert!(bundle.s_aug.iter().all(|ch| ch.iter().all(|&v| v == 0.0)));
        assert_eq!(bundle.num_aug(), 2);
    }

    #[test]
    fn forward_is_pure() {
        let model = ToyModel::new(small_header()).unwrap();
        let vol = crate::toytrain::phantom::generate_phantoms(1, 4, (16, 16, 2))
            .unwrap()
            .images
            .remove(0);
        let (a, _) = model.infer(&vol).unwrap();
        let (b, _) = model.infer(&vol).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn parameter_budget() {
        let header = ModelHeader {
            width: 8,
            num_unc: 6,
            ..small_header()
        };
        let model = ToyModel::new(header).unwrap();
        assert!(model.num_parameters() <= 50_000, "{}", model.num_parameters());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = ToyModel::new(small_header()).unwrap();
        model.save(&path).unwrap();
        let loaded = ToyModel::load(&path).unwrap();
        assert_eq!(model, loaded);

        // byte-identical on re-save
        let path2 = dir.path().join("m2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(ToyModel::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn odd_input_extent_rejected() {
        let model = ToyModel::new(small_header()).unwrap();
        let vol = Volume::constant((15, 16, 2), 0.5);
        assert!(model.infer(&vol).is_err());
    }
}
