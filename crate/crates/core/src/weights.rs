//! Binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ERAW" | u32 version | u8 mode | u32 count
//! count × ( u16 name_len | name | u8 rank | rank × u32 dim | f32 payload )
//! u32 CRC-32 of everything before it
//! ```
//!
//! Besides the parameters, the file carries an `arch.flags` tensor holding the
//! [`ModelConfig`], so a file fully describes its architecture.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::attention::MlpActivation;
use crate::error::FormatError;
use crate::kirsch::EdgeOperator;
use crate::model::{fuse_model, BlockKind, EraNetModel, Mode, ModelConfig};
use crate::ops::norm::NormGroup;
use crate::tensor::{Real, Tensor4};

pub const MAGIC: [u8; 4] = *b"ERAW";
pub const VERSION: u32 = 1;
pub const FLAGS_NAME: &str = "arch.flags";

const FLAG_COUNT: usize = 11;

fn encode_config(c: &ModelConfig) -> Tensor4<f32> {
    let kind = match c.block_kind {
        BlockKind::Reparam => 0,
        BlockKind::Plain => 1,
    };
    let v = [
        c.channels as f32,
        c.blocks as f32,
        c.expansion as f32,
        c.reduction as f32,
        c.operator.code() as f32,
        kind as f32,
        c.norm.code() as f32,
        c.cam_activation.code() as f32,
        c.use_cam as u8 as f32,
        c.use_sam as u8 as f32,
        c.global_residual as u8 as f32,
    ];
    Tensor4::channel_vector(&v)
}

fn decode_config(t: &Tensor4<f32>) -> Result<ModelConfig, FormatError> {
    let bad = |reason: String| FormatError::Architecture {
        name: FLAGS_NAME.into(),
        reason,
    };
    if t.numel() != FLAG_COUNT {
        return Err(bad(format!(
            "expected {FLAG_COUNT} entries, got {}",
            t.numel()
        )));
    }
    let mut ints = Vec::with_capacity(FLAG_COUNT);
    for &v in t.data() {
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f32 {
            return Err(bad(format!("non-integral flag {v}")));
        }
        ints.push(v as usize);
    }
    let byte = |i: usize| u8::try_from(ints[i]).map_err(|_| bad(format!("flag {i} out of range")));
    let flag = |i: usize| match ints[i] {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(bad(format!("flag {i} must be 0 or 1, got {v}"))),
    };
    let config = ModelConfig {
        channels: ints[0],
        blocks: ints[1],
        expansion: ints[2],
        reduction: ints[3],
        operator: EdgeOperator::from_code(byte(4)?)
            .ok_or_else(|| bad("unknown edge operator".into()))?,
        block_kind: match ints[5] {
            0 => BlockKind::Reparam,
            1 => BlockKind::Plain,
            v => return Err(bad(format!("unknown block kind {v}"))),
        },
        norm: NormGroup::from_code(byte(6)?).ok_or_else(|| bad("unknown norm grouping".into()))?,
        cam_activation: MlpActivation::from_code(byte(7)?)
            .ok_or_else(|| bad("unknown attention activation".into()))?,
        use_cam: flag(8)?,
        use_sam: flag(9)?,
        global_residual: flag(10)?,
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    Ok(config)
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor4<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(4);
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model. Values are stored at single precision.
pub fn encode_weights<T: Real>(m: &EraNetModel<T>) -> Vec<u8> {
    let named = m.named_parameters();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(m.mode.code());
    out.extend_from_slice(&((named.len() + 1) as u32).to_le_bytes());
    put_tensor(&mut out, FLAGS_NAME, &encode_config(&m.config));
    for (name, t) in &named {
        put_tensor(&mut out, name, &t.cast());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// One decoded tensor record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor4<f32>,
}

/// Header and raw records of a container, without architecture checks.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub mode: Mode,
    pub records: Vec<Record>,
}

/// Parses the container framing and verifies the checksum.
pub fn decode_container(bytes: &[u8]) -> Result<Container, FormatError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let mode_byte = c.u8()?;
    let mode = Mode::from_code(mode_byte).ok_or(FormatError::BadMode(mode_byte))?;
    let count = c.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let at = c.pos;
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| FormatError::BadName(at))?
            .to_string();
        let rank = c.u8()? as usize;
        if rank > 4 {
            return Err(FormatError::Architecture {
                name,
                reason: format!("rank {rank} exceeds 4"),
            });
        }
        let mut shape = [1usize; 4];
        for d in 0..rank {
            shape[4 - rank + d] = c.u32()? as usize;
        }
        let numel: usize = shape.iter().product();
        let payload = c.take(numel.checked_mul(4).ok_or(FormatError::Truncated {
            offset: c.pos,
            needed: usize::MAX,
        })?)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor4::from_vec(shape, data).expect("length checked above");
        records.push(Record { name, tensor });
    }
    let body_end = c.pos;
    let stored = c.u32()?;
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    if c.pos != bytes.len() {
        return Err(FormatError::Architecture {
            name: String::new(),
            reason: format!("{} trailing bytes after checksum", bytes.len() - c.pos),
        });
    }
    Ok(Container { mode, records })
}

/// Parses a container and rebuilds the model it describes.
pub fn decode_weights<T: Real>(bytes: &[u8]) -> Result<EraNetModel<T>, FormatError> {
    let container = decode_container(bytes)?;
    let mut tensors: HashMap<String, Tensor4<f32>> = HashMap::new();
    for r in container.records {
        if tensors.insert(r.name.clone(), r.tensor).is_some() {
            return Err(FormatError::Architecture {
                name: r.name,
                reason: "duplicate tensor".into(),
            });
        }
    }
    let flags = tensors
        .remove(FLAGS_NAME)
        .ok_or_else(|| FormatError::Architecture {
            name: FLAGS_NAME.into(),
            reason: "missing".into(),
        })?;
    let config = decode_config(&flags)?;
    let arch = |e: crate::error::ModelError| FormatError::Architecture {
        name: FLAGS_NAME.into(),
        reason: e.to_string(),
    };
    let mut skeleton = EraNetModel::<T>::zeros(config).map_err(arch)?;
    if container.mode == Mode::Fused {
        skeleton = fuse_model(&skeleton).map_err(arch)?;
    }

    let mut err = None;
    let model = skeleton.map_named(&mut |name, p| {
        match tensors.remove(name) {
            Some(t) if t.shape() == p.shape() => return t.cast(),
            Some(t) => {
                err.get_or_insert(FormatError::Architecture {
                    name: name.into(),
                    reason: format!("expected shape {:?}, found {:?}", p.shape(), t.shape()),
                });
            }
            None => {
                err.get_or_insert(FormatError::Architecture {
                    name: name.into(),
                    reason: "missing".into(),
                });
            }
        }
        p.clone()
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = tensors.keys().min() {
        return Err(FormatError::Architecture {
            name: name.clone(),
            reason: "not part of the described architecture".into(),
        });
    }
    log::debug!(
        "loaded {:?}-mode model: {} blocks, {} parameters",
        model.mode,
        config.blocks,
        model.param_count()
    );
    Ok(model)
}

pub fn save_weights<T: Real, W: Write>(m: &EraNetModel<T>, mut sink: W) -> Result<(), FormatError> {
    sink.write_all(&encode_weights(m))?;
    sink.flush()?;
    Ok(())
}

pub fn load_weights<T: Real, R: Read>(mut source: R) -> Result<EraNetModel<T>, FormatError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fuse_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(cfg: ModelConfig) -> EraNetModel<f32> {
        EraNetModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_weights(&model(ModelConfig::toy()));
        assert_eq!(&bytes[..4], b"ERAW");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 0);
        let count = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        assert_eq!(count, model(ModelConfig::toy()).parameters().len() + 1);
        let body = &bytes[..bytes.len() - 4];
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(body));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for cfg in [
            ModelConfig::toy(),
            ModelConfig {
                use_sam: false,
                operator: EdgeOperator::Sobel,
                norm: NormGroup::PerSample,
                ..ModelConfig::toy()
            },
            ModelConfig {
                block_kind: BlockKind::Plain,
                use_cam: false,
                global_residual: false,
                ..ModelConfig::toy()
            },
        ] {
            let m = model(cfg);
            let bytes = encode_weights(&m);
            let back: EraNetModel<f32> = decode_weights(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_weights(&back), bytes);
        }
    }

    #[test]
    fn fused_file_loads_without_training_weights() {
        let f = fuse_model(&model(ModelConfig::toy())).unwrap();
        let bytes = encode_weights(&f);
        assert_eq!(bytes[8], 1);
        let c = decode_container(&bytes).unwrap();
        assert!(c.records.iter().all(|r| !r.name.contains(".krm.")));
        let back: EraNetModel<f64> = decode_weights(&bytes).unwrap();
        assert_eq!(back.mode, Mode::Fused);
        let x = Tensor4::full([1, 3, 8, 8], 0.5);
        assert_eq!(back.forward(&x).unwrap().shape(), [1, 3, 8, 8]);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = encode_weights(&model(ModelConfig::toy()));
        let mut b = bytes.clone();
        b[0] ^= 0xff;
        assert!(matches!(
            decode_container(&b),
            Err(FormatError::BadMagic(_))
        ));
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(matches!(
            decode_container(&b),
            Err(FormatError::UnsupportedVersion(2))
        ));
        let mut b = bytes.clone();
        b[8] = 7;
        assert!(matches!(decode_container(&b), Err(FormatError::BadMode(7))));
        let mut b = bytes.clone();
        let mid = b.len() / 2;
        b[mid] ^= 0x01;
        assert!(decode_container(&b).is_err());
        let mut b = bytes.clone();
        b[8] = 1;
        assert!(matches!(
            decode_container(&b),
            Err(FormatError::Checksum { .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_weights(&model(ModelConfig::toy()));
        for cut in [2, 11, 40, bytes.len() - 2] {
            match decode_container(&bytes[..cut]) {
                Err(FormatError::Truncated { offset, needed }) => {
                    assert!(offset <= cut && needed > 0);
                }
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let m = model(ModelConfig::toy());
        let mut c = decode_container(&encode_weights(&m)).unwrap();
        c.records.retain(|r| r.name != "tail.bias");
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(0);
        out.extend_from_slice(&(c.records.len() as u32).to_le_bytes());
        for r in &c.records {
            put_tensor(&mut out, &r.name, &r.tensor);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        match decode_weights::<f32>(&out) {
            Err(FormatError::Architecture { name, .. }) => assert_eq!(name, "tail.bias"),
            other => panic!("{other:?}"),
        }
    }
}
