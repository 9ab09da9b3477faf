//! Network checkpoint files.
//!
//! ```text
//! "JRNW"                      magic
//! u32 version = 1
//! config:
//!   u32 fusion (0 = concatenate, 1 = sum)
//!   u32 post-fusion channels
//!   u32 branch output channels
//!   u32 number of classes
//!   u32 branch feature channels
//!   u32 number of scales, then one u32 divisor per scale
//!   u64 rng seed
//! per parameter block, in declaration order:
//!   u32 ndim = 4, u32 × 4 weight dims (out, in, k, k), f32 weights
//!   u32 ndim = 1, u32 bias length, f32 bias
//! ```
//!
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::Reader;
use crate::model::{layer_shapes, FusionOp, JrnConfig, JrnNetwork};
use crate::tensor::ConvParams;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"JRNW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(network: &JrnNetwork<f32>) -> Vec<u8> {
    let c = network.config();
    let mut out = Vec::with_capacity(64 + 4 * network.num_params() + 24 * network.params().len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    put_u32(&mut out, matches!(c.fusion, FusionOp::Sum) as usize);
    put_u32(&mut out, c.post_fusion_channels);
    put_u32(&mut out, c.branch_output_channels);
    put_u32(&mut out, c.num_classes);
    put_u32(&mut out, c.branch_feature_channels);
    put_u32(&mut out, c.scales.len());
    for &s in &c.scales {
        put_u32(&mut out, s);
    }
    out.extend_from_slice(&c.rng_seed.to_le_bytes());
    for p in network.params() {
        put_u32(&mut out, 4);
        for d in p.weight_dims() {
            put_u32(&mut out, d);
        }
        for w in p.weights() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        put_u32(&mut out, 1);
        put_u32(&mut out, p.bias().len());
        for b in p.bias() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

fn read_config(r: &mut Reader<'_>) -> Result<JrnConfig> {
    let at = r.offset();
    let fusion = match r.u32("fusion")? {
        0 => FusionOp::Concatenate,
        1 => FusionOp::Sum,
        other => return Err(Error::format(at, format!("unknown fusion code {other}"))),
    };
    let post_fusion_channels = r.u32("post-fusion channels")? as usize;
    let branch_output_channels = r.u32("branch output channels")? as usize;
    let num_classes = r.u32("class count")? as usize;
    let branch_feature_channels = r.u32("feature channels")? as usize;
    let at = r.offset();
    let n_scales = r.u32("scale count")? as usize;
    if n_scales > 16 {
        return Err(Error::format(at, format!("implausible scale count {n_scales}")));
    }
    let scales = (0..n_scales).map(|_| r.u32("scale").map(|s| s as usize)).collect::<Result<_>>()?;
    let rng_seed = r.u64("seed")?;
    let config = JrnConfig {
        fusion,
        post_fusion_channels,
        branch_output_channels,
        num_classes,
        scales,
        branch_feature_channels,
        rng_seed,
    };
    config.validate().map_err(|e| Error::format(r.offset(), format!("invalid configuration: {e}")))?;
    Ok(config)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<JrnNetwork<f32>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"JRNW\""));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let config = read_config(&mut r)?;
    let expected = layer_shapes(&config);
    let mut params = Vec::with_capacity(expected.len());
    for (i, dims) in expected.iter().enumerate() {
        let at = r.offset();
        let ndim = r.u32("weight ndim")?;
        let got = [r.u32("dim")?, r.u32("dim")?, r.u32("dim")?, r.u32("dim")?].map(|d| d as usize);
        if ndim != 4 || got != *dims {
            return Err(Error::format(
                at,
                format!("parameter block {i}: expected weights {dims:?}, found {ndim}-d {got:?}"),
            ));
        }
        let weights = r.f32s(dims.iter().product(), "weights")?;
        let at = r.offset();
        let ndim = r.u32("bias ndim")?;
        let len = r.u32("bias length")? as usize;
        if ndim != 1 || len != dims[0] {
            return Err(Error::format(at, format!("parameter block {i}: expected {} biases", dims[0])));
        }
        let bias = r.f32s(len, "bias")?;
        params.push(ConvParams::new(dims[0], dims[1], dims[2], weights, bias)?);
    }
    r.finish()?;
    JrnNetwork::from_params(config, params)
}

pub fn save_checkpoint(network: &JrnNetwork<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(network)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<JrnNetwork<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_jrn, Variant};

    #[test]
    fn round_trip_every_variant() {
        for v in Variant::ALL {
            let n = build_jrn::<f32>(&JrnConfig::for_variant(v, 5, 11)).unwrap();
            let bytes = encode_checkpoint(&n);
            assert_eq!(decode_checkpoint(&bytes).unwrap(), n);
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let n = build_jrn::<f32>(&JrnConfig::for_variant(Variant::Cat1, 3, 0)).unwrap();
        let bytes = encode_checkpoint(&n);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        // post-fusion channel count sits after magic, version and fusion code
        bad[12..16].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { .. })));
    }
}
