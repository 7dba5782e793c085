//! Bit-exact binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "PTCHFMR1"
//! header     u64 length + UTF-8 JSON (model config, scaler, channel names, seed)
//! count      u64 number of parameters
//! per param  u64 name length + name, u64 ndim, ndim × u64 dims, numel × f64 bits
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Scaler;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PatchformerModel};
use crate::tensor::{numel, ParameterStore, Tensor};

const MAGIC: &[u8; 8] = b"PTCHFMR1";
/// Upper bound on any length field, to fail fast on corrupt files.
const MAX_LEN: u64 = 1 << 34;

/// Everything needed to rebuild a model and map its outputs back to raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub channel_names: Vec<String>,
    pub scaler: Option<Scaler>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn from_model(model: &PatchformerModel, channel_names: Vec<String>, scaler: Option<Scaler>) -> Self {
        Self::with_params(model, model.params().clone(), channel_names, scaler)
    }

    /// Checkpoint of `model`'s layout holding `params` (e.g. best-validation weights).
    pub fn with_params(
        model: &PatchformerModel,
        params: ParameterStore,
        channel_names: Vec<String>,
        scaler: Option<Scaler>,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                config: model.config().clone(),
                seed: params.seed(),
                channel_names,
                scaler,
            },
            params,
        }
    }

    /// Rebuilds the model and installs the stored parameters.
    pub fn to_model(&self) -> Result<PatchformerModel> {
        let mut model = PatchformerModel::new(self.header.config.clone(), self.header.seed)?;
        model.load_params(self.params.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(&header);
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.ndim() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let header_len = get_len(&mut r)?;
        let header: CheckpointHeader = serde_json::from_slice(take(&mut r, header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = get_len(&mut r)?;
        let mut params = ParameterStore::new(header.seed);
        for _ in 0..count {
            let name_len = get_len(&mut r)?;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = get_len(&mut r)?;
            let shape = (0..ndim).map(|_| get_len(&mut r)).collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let raw = take(
                &mut r,
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect();
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("file truncated".into()))
}

fn get_len(r: &mut &[u8]) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    let v = u64::from_le_bytes(b);
    if v > MAX_LEN {
        return Err(Error::Checkpoint(format!("implausible length field {v}")));
    }
    Ok(v as usize)
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("file truncated".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> PatchformerModel {
        let cfg = ModelConfig {
            seq_len: 16,
            pred_len: 8,
            channels: 2,
            patch_len: 4,
            stride: 2,
            d_model: 8,
            n_heads: 2,
            e_layers: 1,
            d_layers: 1,
            d_ff: 16,
            ..ModelConfig::default()
        };
        PatchformerModel::new(cfg, 11).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut model = small_model();
        // Awkward values must survive too.
        let w = model.params_mut().get_mut("head.w_y").unwrap();
        w.data_mut()[0] = -0.0;
        w.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        w.data_mut()[2] = 1.0 / 3.0;
        let scaler = Scaler {
            mean: vec![1.5, -2.0],
            std: vec![0.25, 1e-8],
        };
        let ck = Checkpoint::from_model(&model, vec!["a".into(), "b".into()], Some(scaler));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, ck.header);
        assert!(back.params.bit_eq(&ck.params));
        let rebuilt = back.to_model().unwrap();
        assert!(rebuilt.params().bit_eq(model.params()));
        let x = Tensor::uniform(&[16, 2], -1.0, 1.0, &mut crate::Rng::new(0));
        assert!(rebuilt.forward(&x).unwrap().bit_eq(&model.forward(&x).unwrap()));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint::from_model(&small_model(), vec![], None);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(matches!(
            Checkpoint::load(Path::new("/no/such.ckpt")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn layout_mismatch_is_a_checkpoint_error() {
        let mut ck = Checkpoint::from_model(&small_model(), vec![], None);
        ck.header.config.d_ff = 32;
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
    }
}
