//! Binary checkpoints: a `MAGNET\x01` header, the config text, the
//! vocabulary, named parameter records with 32-bit little-endian payloads,
//! optional Adam moments, and the step counter.

use std::path::Path;

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{AdamState, Tensor};
use crate::textproc::{EmbeddingTable, Vocabulary};

const MAGIC: &[u8; 6] = b"MAGNET";
pub const FORMAT_VERSION: u8 = 1;

/// One stored parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor<f32>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub vocab: Vec<String>,
    pub step: u64,
    pub records: Vec<Record>,
    /// Adam step and per-record first and second moments.
    pub adam: Option<(u64, Vec<Vec<f32>>, Vec<Vec<f32>>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, adam: Option<&AdamState<f32>>, step: u64) -> Self {
        let records = model
            .store
            .iter()
            .map(|(_, name, t)| Record { name: name.to_string(), trainable: t.requires_grad, tensor: t.clone() })
            .collect();
        Checkpoint {
            cfg: model.cfg.clone(),
            vocab: model.vocab.tokens().to_vec(),
            step,
            records,
            adam: adam.map(|a| (a.step, a.m.clone(), a.v.clone())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        put_str(&mut out, &self.cfg.to_text());
        put_u32(&mut out, self.vocab.len());
        for t in &self.vocab {
            put_str(&mut out, t);
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, self.records.len());
        for r in &self.records {
            put_str(&mut out, &r.name);
            out.push(u8::from(r.trainable));
            put_u32(&mut out, r.tensor.shape().len());
            for &d in r.tensor.shape() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, r.tensor.data());
        }
        match &self.adam {
            None => out.push(0),
            Some((step, m, v)) => {
                out.push(1);
                out.extend_from_slice(&step.to_le_bytes());
                for (m, v) in m.iter().zip(v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::Codec("not a checkpoint (bad magic)".into()));
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!("checkpoint format {version}, expected {FORMAT_VERSION}")));
        }
        let cfg = ModelConfig::from_text(&r.string()?)?;
        let vocab = (0..r.u32()?).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let step = r.u64()?;
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                f => return Err(Error::Codec(format!("bad flag {f} on {name}"))),
            };
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Codec(format!("oversized shape for {name}")))?;
            let mut tensor = Tensor::new(shape, r.f32s(len)?)?;
            tensor.requires_grad = trainable;
            records.push(Record { name, trainable, tensor });
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for rec in &records {
                    m.push(r.f32s(rec.tensor.len())?);
                    v.push(r.f32s(rec.tensor.len())?);
                }
                Some((step, m, v))
            }
            f => return Err(Error::Codec(format!("bad optimizer flag {f}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::Codec(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint { cfg, vocab, step, records, adam })
    }

    /// Rebuilds the model, checking that every stored tensor matches the
    /// layout the config implies.
    pub fn into_model(self) -> Result<(Model<f32>, Option<AdamState<f32>>, u64)> {
        let cfg = ModelConfig { embedding_file: None, ..self.cfg.clone() };
        let vocab = Vocabulary::from_tokens(&self.vocab)?;
        let mut rng = SplitMix64::seed_from_u64(0);
        let table = EmbeddingTable::random(&vocab, cfg.word_dim, 0.0, &mut rng)?;
        let mut model = Model::with_embeddings(cfg, vocab, table, &mut rng)?;
        model.cfg.embedding_file = self.cfg.embedding_file.clone();
        self.load_into(&mut model)?;
        let adam = self.adam.map(|(step, m, v)| AdamState { step, m, v });
        Ok((model, adam, self.step))
    }

    /// Copies the stored tensors into `model`; names and shapes must match exactly.
    pub fn load_into(&self, model: &mut Model<f32>) -> Result<()> {
        let mismatch = |m: String| Error::Version(format!("checkpoint does not match the model configuration: {m}"));
        if self.records.len() != model.store.len() {
            return Err(mismatch(format!("{} tensors stored, {} expected", self.records.len(), model.store.len())));
        }
        if self.vocab != model.vocab.tokens() {
            return Err(mismatch("vocabulary differs".into()));
        }
        for (i, rec) in self.records.iter().enumerate() {
            let id = model.store.iter().nth(i).map(|(id, name, _)| (id, name == rec.name));
            let Some((id, true)) = id else {
                return Err(mismatch(format!("unexpected tensor {}", rec.name)));
            };
            if model.store.get(id).shape() != rec.tensor.shape() {
                return Err(mismatch(format!(
                    "{} is {:?}, expected {:?}",
                    rec.name,
                    rec.tensor.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = rec.tensor.clone();
        }
        Ok(())
    }
}

pub fn save(path: &Path, model: &Model<f32>, adam: Option<&AdamState<f32>>, step: u64) -> Result<()> {
    let bytes = Checkpoint::from_model(model, adam, step).encode();
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::decode(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(4 * v.len());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Codec(format!("truncated checkpoint at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Codec("invalid UTF-8 in checkpoint".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Codec("oversized payload".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use crate::geometry::Bbox;
    use crate::numerics::{adam_step, AdamConfig, Tape};
    use crate::textproc::build_vocab;

    fn tiny() -> Model<f32> {
        let cfg = ModelConfig {
            image_size: 32,
            backbone_channels: [2, 2, 2],
            feature_channels: 4,
            visual_dim: 4,
            attn_dim: 4,
            word_dim: 3,
            rpn_hidden: 3,
            det_hidden: 5,
            roi_bins: 2,
            ..ModelConfig::desk()
        };
        Model::new(cfg, build_vocab(&["red circle"], 1).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut model = tiny();
        let mut adam = AdamState::new(&model.store);
        let mut tape = Tape::new();
        let vis = model.visual(&mut tape, &Image::filled(32, 32, [0.3, 0.6, 0.1])).unwrap();
        let tokens = model.tokenize("red circle").unwrap();
        let gt = [Bbox::new(4.0, 4.0, 20.0, 20.0).unwrap()];
        let loss = model.loss(&mut tape, &vis, &tokens, &gt, &mut SplitMix64::seed_from_u64(3)).unwrap();
        let grads = tape.backward(loss.total).unwrap();
        adam_step(&mut model.store, &grads, &mut adam, &AdamConfig::default()).unwrap();
        let ck = Checkpoint::from_model(&model, Some(&adam), 17);
        let bytes = ck.encode();
        assert_eq!(&bytes[..7], b"MAGNET\x01");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        let (m2, a2, step) = back.into_model().unwrap();
        assert_eq!(step, 17);
        assert_eq!(a2.unwrap(), adam);
        for ((_, n1, t1), (_, n2, t2)) in model.store.iter().zip(m2.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
            assert_eq!(t1.requires_grad, t2.requires_grad);
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = Checkpoint::from_model(&tiny(), None, 0).encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Codec(_))));
        assert!(matches!(Checkpoint::decode(b"NOTMAG\x01"), Err(Error::Codec(_))));
        let mut v2 = bytes.clone();
        v2[6] = 2;
        assert!(matches!(Checkpoint::decode(&v2), Err(Error::Version(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Codec(_))));
    }

    #[test]
    fn mismatched_config_is_a_version_error() {
        let ck = Checkpoint::from_model(&tiny(), None, 0);
        let mut other = tiny();
        let cfg = ModelConfig { det_hidden: 6, ..other.cfg.clone() };
        other = Model::new(cfg, other.vocab.clone()).unwrap();
        assert!(matches!(ck.load_into(&mut other), Err(Error::Version(_))));
    }
}
