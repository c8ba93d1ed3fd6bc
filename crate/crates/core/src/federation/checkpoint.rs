//! Binary checkpoint: `FSKL` magic, `u32` format version, `u64` round, a
//! layer table with little-endian `f32` tensors, then per-client ratios and
//! skeleton bitsets (least significant bit first). All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use super::{Client, FederationError};
use crate::engine::{LayerKind, LayerParams, Model, ParamSet, Scope};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FSKL";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_CONV: u8 = 0;
const KIND_FC: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ClientRecord {
    pub id: u32,
    pub ratio: f64,
    /// Per prunable layer, one flag per filter.
    pub mask: Option<Vec<Vec<bool>>>,
}

impl ClientRecord {
    pub fn of(client: &Client) -> Self {
        Self {
            id: client.id() as u32,
            ratio: client.ratio(),
            mask: client.skeleton().map(|s| s.mask().layers().to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub round: u64,
    /// `(kind tag, scope, params)` per parameter slot.
    pub layers: Vec<(u8, Scope, LayerParams<f32>)>,
    pub clients: Vec<ClientRecord>,
}

impl Checkpoint {
    pub fn new(model: &Model, round: u64, params: &ParamSet, clients: Vec<ClientRecord>) -> Self {
        let layers = params
            .layers()
            .iter()
            .enumerate()
            .map(|(slot, p)| {
                let kind = match model.layers()[model.layer_of_slot(slot)].kind {
                    LayerKind::Conv2d { .. } => KIND_CONV,
                    _ => KIND_FC,
                };
                (kind, model.slot_scope(slot), p.clone())
            })
            .collect();
        Self { round, layers, clients }
    }

    /// The stored parameters, checked against `model`.
    pub fn params(&self, model: &Model) -> Result<ParamSet, FederationError> {
        let set = ParamSet::from_layers(self.layers.iter().map(|(_, _, p)| p.clone()).collect());
        set.check(model)?;
        for (slot, (_, scope, _)) in self.layers.iter().enumerate() {
            if *scope != model.slot_scope(slot) {
                return Err(FederationError::Checkpoint(format!("slot {slot} scope differs from the model")));
            }
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for (kind, scope, p) in &self.layers {
            out.push(*kind);
            out.push(match scope {
                Scope::Global => 0,
                Scope::Local => 1,
            });
            let dims = p.weights.shape();
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(p.bias.len() as u32).to_le_bytes());
            for v in p.weights.data().iter().chain(p.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.clients.len() as u32).to_le_bytes());
        for c in &self.clients {
            out.extend_from_slice(&c.id.to_le_bytes());
            out.extend_from_slice(&c.ratio.to_le_bytes());
            match &c.mask {
                None => out.push(0),
                Some(layers) => {
                    out.push(1);
                    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
                    for bits in layers {
                        out.extend_from_slice(&(bits.len() as u32).to_le_bytes());
                        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
                        for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
                            bytes[i / 8] |= 1 << (i % 8);
                        }
                        out.extend_from_slice(&bytes);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FederationError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(FederationError::Checkpoint("missing FSKL magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(FederationError::Checkpoint(format!(
                "format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let round = r.u64()?;
        let slots = r.u32()? as usize;
        let mut layers = Vec::with_capacity(slots.min(1024));
        for _ in 0..slots {
            let kind = r.u8()?;
            if kind != KIND_CONV && kind != KIND_FC {
                return Err(FederationError::Checkpoint(format!("unknown layer kind {kind}")));
            }
            let scope = match r.u8()? {
                0 => Scope::Global,
                1 => Scope::Local,
                s => return Err(FederationError::Checkpoint(format!("unknown scope {s}"))),
            };
            let rank = r.u8()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let bias_len = r.u32()? as usize;
            let n: usize = dims.iter().product();
            let weights = r.f32s(n)?;
            let bias = r.f32s(bias_len)?;
            let bad = |e: crate::tensor::TensorError| FederationError::Checkpoint(e.to_string());
            layers.push((
                kind,
                scope,
                LayerParams {
                    weights: Tensor::new(&dims, weights).map_err(bad)?,
                    bias: Tensor::new(&[bias_len], bias).map_err(bad)?,
                },
            ));
        }
        let count = r.u32()? as usize;
        let mut clients = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = r.u32()?;
            let ratio = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let mask = match r.u8()? {
                0 => None,
                1 => {
                    let n = r.u32()? as usize;
                    let mut layers = Vec::with_capacity(n.min(1024));
                    for _ in 0..n {
                        let bits = r.u32()? as usize;
                        let bytes = r.take(bits.div_ceil(8))?;
                        layers.push((0..bits).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect());
                    }
                    Some(layers)
                }
                f => return Err(FederationError::Checkpoint(format!("bad mask flag {f}"))),
            };
            clients.push(ClientRecord { id, ratio, mask });
        }
        if r.at != bytes.len() {
            return Err(FederationError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self { round, layers, clients })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FederationError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            FederationError::Checkpoint(format!("truncated at byte {} (need {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FederationError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FederationError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FederationError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FederationError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| FederationError::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), FederationError> {
    fs::write(path, checkpoint.to_bytes()).map_err(|source| FederationError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, FederationError> {
    let bytes = fs::read(path).map_err(|source| FederationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (Model, Checkpoint) {
        let model = Model::lenet5(true);
        let params = ParamSet::init(&model, &mut ChaCha8Rng::seed_from_u64(2));
        let mut bits = vec![vec![false; 6], vec![true; 16], vec![false; 120], vec![false; 84]];
        bits[0][0] = true;
        bits[0][5] = true;
        bits[2][119] = true;
        bits[3][8] = true;
        let clients = vec![
            ClientRecord { id: 0, ratio: 0.1, mask: Some(bits) },
            ClientRecord { id: 1, ratio: 1.0, mask: None },
        ];
        let ck = Checkpoint::new(&model, 17, &params, clients);
        (model, ck)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (model, ck) = sample();
        let path = dir.path().join("ck.fskl");
        write_checkpoint(&path, &ck).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert!(back.params(&model).unwrap().bit_eq(&ck.params(&model).unwrap()));
        assert!(back.params(&Model::lenet5(false)).is_err());
    }

    #[test]
    fn header_layout() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"FSKL");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &17u64.to_le_bytes());
        // First slot: conv, global, rank 4, dims 6×1×5×5.
        assert_eq!(&bytes[16..20], &5u32.to_le_bytes());
        assert_eq!(&bytes[20..23], &[0, 0, 4]);
        assert_eq!(&bytes[23..27], &6u32.to_le_bytes());
    }

    #[test]
    fn mask_bits_are_lsb_first() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        // Client 1 carries no mask: id, ratio, flag 0 end the file.
        let tail = &bytes[bytes.len() - 13..];
        assert_eq!(&tail[..4], &1u32.to_le_bytes());
        assert_eq!(tail[12], 0);
        // Client 0's first mask layer: 6 bits, filters 0 and 5 -> 0b0010_0001.
        let needle = [6u8, 0, 0, 0, 0b0010_0001];
        assert!(bytes.windows(5).any(|w| w == needle));
    }

    #[test]
    fn rejects_corruption() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(FederationError::Checkpoint(m)) if m.contains("version 2")));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
