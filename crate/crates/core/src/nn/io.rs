//! `.tfm` model files: magic, header length, JSON header, little-endian f64 blob.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Head, MlpModel, ModelMeta, NnError};

pub const MODEL_MAGIC: &[u8; 4] = b"TFM1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    layer_dims: Vec<usize>,
    head: Head,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    meta: ModelMeta,
    param_count: usize,
}

/// Serializes weights then biases, layer by layer, weights row-major.
pub fn write_model<W: Write>(model: &MlpModel, mut w: W) -> Result<(), NnError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        layer_dims: model.layer_dims.clone(),
        head: model.head,
        input_mean: model.input_mean.to_vec(),
        input_std: model.input_std.to_vec(),
        meta: model.meta.clone(),
        param_count: model.param_count(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut blob = Vec::with_capacity(model.param_count() * 8);
    for (wt, b) in model.weights.iter().zip(&model.biases) {
        for x in wt.iter().chain(b.iter()) {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&blob)?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<MlpModel, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(NnError::Format("header too large".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| NnError::Format(e.to_string()))?;
    if h.format_version != FORMAT_VERSION {
        return Err(NnError::Format(format!("unsupported format version {}", h.format_version)));
    }
    let mut model = MlpModel::zeros(&h.layer_dims, h.head)?;
    if h.param_count != model.param_count() || h.input_mean.len() != h.layer_dims[0] || h.input_std.len() != h.layer_dims[0] {
        return Err(NnError::Format("header shapes disagree".into()));
    }
    let mut blob = vec![0u8; h.param_count * 8];
    r.read_exact(&mut blob)?;
    let mut vals = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for l in 0..model.weights.len() {
        let (rows, cols) = model.weights[l].dim();
        model.weights[l] = Array2::from_shape_fn((rows, cols), |_| vals.next().unwrap());
        model.biases[l] = Array1::from_shape_fn(cols, |_| vals.next().unwrap());
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NnError::Format("trailing bytes".into()));
    }
    model.input_mean = Array1::from(h.input_mean);
    model.input_std = Array1::from(h.input_std);
    model.meta = h.meta;
    Ok(model)
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<(), NnError> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel, NnError> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Role;
    use crate::rng::stream;

    #[test]
    fn roundtrip_is_exact() {
        let mut m = MlpModel::init(&[4, 7, 3], Head::Softmax, &mut stream(2, 0)).unwrap();
        m.input_mean = Array1::from(vec![0.1, 0.2, 0.3, 0.4]);
        m.meta.role = Some(Role::Nn2);
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], MODEL_MAGIC);
        let back = read_model(&buf[..]).unwrap();
        assert_eq!(back, m);
        assert!(read_model(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_model(&bad[..]).is_err());
    }
}
