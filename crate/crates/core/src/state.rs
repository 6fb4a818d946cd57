//! Versioned binary run-state container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "SEEDCLST" | version u32
//! config   u32 length + UTF-8 TOML echo
//! header   u32 length + UTF-8 JSON (net, seeds, flags, task classes, history)
//! trunk    u64 count + f64 values
//! heads    u32 count, each u64 count + f64 values
//! banks    u32 count, each u32 classes, each:
//!          u64 class | u8 mode | u32 dim | mean f64×dim | covariance triangle f64×dim(dim+1)/2
//! trailer  SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gaussian::{ClassBank, ClassGaussian, ClassId, RepresentationMode};
use crate::linalg::SpdMatrix;
use crate::net::NetConfig;
use crate::runner::RunHistory;
use crate::trainer::{EnsembleState, Seeds};

pub const MAGIC: &[u8; 8] = b"SEEDCLST";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunStateFile {
    /// TOML text of the configuration that produced the state.
    pub config: String,
    pub seeds: Seeds,
    pub state: EnsembleState,
    pub history: RunHistory,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    seeds: Seeds,
    experts: usize,
    trunk_frozen: bool,
    trained: Vec<bool>,
    task_classes: Vec<Vec<ClassId>>,
    history: RunHistory,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::CorruptState(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::CorruptState("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptState("invalid UTF-8".into()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptState("length overflow".into()))
    }
}

impl RunStateFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let st = &self.state;
        let header = Header {
            net: st.net.clone(),
            seeds: self.seeds,
            experts: st.experts(),
            trunk_frozen: st.trunk.frozen,
            trained: st.heads.iter().map(|h| h.trained).collect(),
            task_classes: st.task_classes.clone(),
            history: self.history.clone(),
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.config);
        put_str(&mut out, &serde_json::to_string(&header).expect("header serializes"));

        let trunk = st.trunk.mlp.flat_params();
        put_u64(&mut out, trunk.len() as u64);
        put_f64s(&mut out, &trunk);
        put_u32(&mut out, st.heads.len() as u32);
        for h in &st.heads {
            let p = h.mlp.flat_params();
            put_u64(&mut out, p.len() as u64);
            put_f64s(&mut out, &p);
        }
        put_u32(&mut out, st.banks.len() as u32);
        for bank in &st.banks {
            put_u32(&mut out, bank.len() as u32);
            for (c, g) in bank.iter() {
                put_u64(&mut out, c as u64);
                out.push(g.mode().tag());
                put_u32(&mut out, g.dim() as u32);
                put_f64s(&mut out, g.mean());
                if let Some(cov) = g.cov() {
                    put_f64s(&mut out, &cov.lower_triangle());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::CorruptState("not a run-state file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::StateVersion {
                expected: VERSION,
                found: version,
            });
        }
        if bytes.len() < 12 + 32 {
            return Err(Error::CorruptState("truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::CorruptState("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let config = r.string()?;
        let header: Header =
            serde_json::from_str(&r.string()?).map_err(|e| Error::CorruptState(format!("header: {e}")))?;

        let mut state = EnsembleState::new(&header.net, header.experts)
            .map_err(|e| Error::CorruptState(format!("network: {e}")))?;
        let n = r.len_u64()?;
        if n != state.trunk.mlp.param_len() {
            return Err(Error::CorruptState("trunk shape".into()));
        }
        state.trunk.mlp.set_flat_params(&r.f64s(n)?);
        state.trunk.frozen = header.trunk_frozen;
        if r.u32()? as usize != header.experts || header.trained.len() != header.experts {
            return Err(Error::CorruptState("expert count".into()));
        }
        for (h, trained) in state.heads.iter_mut().zip(&header.trained) {
            let n = r.len_u64()?;
            if n != h.mlp.param_len() {
                return Err(Error::CorruptState("head shape".into()));
            }
            h.mlp.set_flat_params(&r.f64s(n)?);
            h.trained = *trained;
        }
        if r.u32()? as usize != header.experts {
            return Err(Error::CorruptState("bank count".into()));
        }
        for bank in state.banks.iter_mut() {
            *bank = read_bank(&mut r)?;
        }
        if r.pos != body.len() {
            return Err(Error::CorruptState("trailing bytes".into()));
        }
        state.task_classes = header.task_classes;
        Ok(Self {
            config,
            seeds: header.seeds,
            state,
            history: header.history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_bank(r: &mut Reader) -> Result<ClassBank> {
    let mut bank = ClassBank::new();
    for _ in 0..r.u32()? {
        let class = r.len_u64()?;
        let mode = RepresentationMode::from_tag(r.u8()?).ok_or_else(|| Error::CorruptState("mode tag".into()))?;
        let dim = r.u32()? as usize;
        let mean = r.f64s(dim)?;
        let cov = match mode {
            RepresentationMode::Prototype => None,
            _ => Some(SpdMatrix::from_lower_triangle(dim, &r.f64s(dim * (dim + 1) / 2)?)?),
        };
        let g = ClassGaussian::new(mean, cov, mode).map_err(|e| Error::CorruptState(format!("class {class}: {e}")))?;
        bank.insert(class, g)?;
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::fit_gaussian;
    use crate::net::Activation;

    fn sample_state() -> RunStateFile {
        let net = NetConfig {
            input_dim: 3,
            trunk_layers: vec![4],
            head_layers: vec![],
            embed_dim: 2,
            activation: Activation::Relu,
            rng_seed: 9,
        };
        let mut state = EnsembleState::new(&net, 2).unwrap();
        state.heads[0].trained = true;
        state.trunk.frozen = true;
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        for (c, mode) in [(4, RepresentationMode::FullCovariance), (9, RepresentationMode::FullCovariance)] {
            state.banks[0].insert(c, fit_gaussian(&refs, mode, 1e-3).unwrap()).unwrap();
        }
        state.task_classes.push(vec![4, 9]);
        RunStateFile {
            config: "seed = 1\n".into(),
            seeds: Seeds::from_global(1),
            state,
            history: RunHistory::default(),
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let s = sample_state();
        let back = RunStateFile::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), s.to_bytes());
    }

    #[test]
    fn version_mismatch_is_hard_error() {
        let mut b = sample_state().to_bytes();
        b[8] = 2;
        assert!(matches!(
            RunStateFile::from_bytes(&b),
            Err(Error::StateVersion { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn corruption_detected() {
        let b = sample_state().to_bytes();
        for pos in [20, b.len() / 2, b.len() - 40, b.len() - 1] {
            let mut c = b.clone();
            c[pos] ^= 0x40;
            assert!(RunStateFile::from_bytes(&c).is_err(), "flip at {pos}");
        }
        assert!(RunStateFile::from_bytes(&b[..b.len() - 5]).is_err());
        assert!(RunStateFile::from_bytes(b"garbage").is_err());
    }
}
