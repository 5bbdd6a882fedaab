//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LTXG"  u32 version  u8 kind
//! u32 config_len  config_len bytes of UTF-8 config text
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rank, rank × u64 extents, f32 data
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gan::ResNet;
use crate::nn::ParamStore;
use crate::seq::{Autoencoder, Nlm, Vae};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LTXG";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Autoencoder,
    Generator,
    Critic,
    Nlm,
    Vae,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            Self::Autoencoder => 1,
            Self::Generator => 2,
            Self::Critic => 3,
            Self::Nlm => 4,
            Self::Vae => 5,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            1 => Self::Autoencoder,
            2 => Self::Generator,
            3 => Self::Critic,
            4 => Self::Nlm,
            5 => Self::Vae,
            _ => return Err(Error::Checkpoint(format!("unknown model kind tag {t}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Run configuration the model was trained with.
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
        }
        let kind = ModelKind::from_tag(r.take(1)?[0])?;
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config snapshot is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("extent overflows".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, config, tensors })
    }

    /// Writes to a temporary file next to `path`, then renames it over
    /// `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and requires the given kind.
    pub fn load_kind(path: &Path, kind: ModelKind) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} model, expected {:?}",
                path.display(),
                c.kind,
                kind
            )));
        }
        Ok(c)
    }
}

/// A model that can be written to and rebuilt from a checkpoint. Shapes
/// come from the embedded config snapshot.
pub trait Persist: Sized {
    const KIND: ModelKind;

    fn params(&self) -> &ParamStore<f32>;

    fn params_mut(&mut self) -> &mut ParamStore<f32>;

    /// Fresh model with the shapes `config` describes.
    fn skeleton(config: &RunConfig, vocab_size: usize) -> Self;

    fn to_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint { kind: Self::KIND, config: config.to_text(), tensors: self.params().to_named() }
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<(Self, RunConfig)> {
        if c.kind != Self::KIND {
            return Err(Error::Checkpoint(format!("holds a {:?} model, expected {:?}", c.kind, Self::KIND)));
        }
        let config = RunConfig::parse(&c.config)?;
        let vocab_size = c.tensors.iter().find(|(n, _)| n == "embedding").map_or(0, |(_, t)| t.shape()[0]);
        let mut model = Self::skeleton(&config, vocab_size);
        model.params_mut().load_from(&c.tensors)?;
        Ok((model, config))
    }

    fn save(&self, config: &RunConfig, path: &Path) -> Result<()> {
        self.to_checkpoint(config).save(path)
    }

    fn load(path: &Path) -> Result<(Self, RunConfig)> {
        Self::from_checkpoint(&Checkpoint::load_kind(path, Self::KIND)?)
    }
}

impl Persist for Autoencoder<f32> {
    const KIND: ModelKind = ModelKind::Autoencoder;

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn skeleton(config: &RunConfig, vocab_size: usize) -> Self {
        Autoencoder::new(config.ae_dims(vocab_size), config.dropout, 0)
    }
}

impl Persist for Nlm<f32> {
    const KIND: ModelKind = ModelKind::Nlm;

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn skeleton(config: &RunConfig, vocab_size: usize) -> Self {
        Nlm::new(config.nlm_dims(vocab_size), 0)
    }
}

impl Persist for Vae<f32> {
    const KIND: ModelKind = ModelKind::Vae;

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn skeleton(config: &RunConfig, vocab_size: usize) -> Self {
        Vae::new(config.vae_dims(vocab_size), 0)
    }
}

/// Generator checkpoint wrapper; the critic shares the network type.
pub struct Generator(pub ResNet<f32>);

pub struct Critic(pub ResNet<f32>);

macro_rules! persist_resnet {
    ($ty:ident, $kind:ident, $dims:ident) => {
        impl Persist for $ty {
            const KIND: ModelKind = ModelKind::$kind;

            fn params(&self) -> &ParamStore<f32> {
                &self.0.store
            }

            fn params_mut(&mut self) -> &mut ParamStore<f32> {
                &mut self.0.store
            }

            fn skeleton(config: &RunConfig, _: usize) -> Self {
                $ty(ResNet::new(config.$dims(), 0))
            }
        }
    };
}

persist_resnet!(Generator, Generator, generator_dims);
persist_resnet!(Critic, Critic, critic_dims);

/// Keys whose values differ between two configs.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<&'static str> {
    a.entries().into_iter().zip(b.entries()).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect()
}

/// Replaces `path` with `bytes` so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Generator,
            config: "seed = 1\n".into(),
            tensors: vec![
                ("a.w".into(), Tensor::matrix(2, 3, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-42, 7.0, -1e30]).unwrap()),
                ("a.b".into(), Tensor::vector(vec![0.1, 0.2, 0.3])),
                ("s".into(), Tensor::scalar(9.0)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, c.kind);
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn truncation_detected_everywhere() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn bad_magic_version_and_kind() {
        let bytes = sample().to_bytes();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(m)) if m.contains("version")));
        let mut b = bytes;
        b[8] = 77;
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    #[test]
    fn models_round_trip() {
        let cfg = RunConfig::desk();
        let ae = Autoencoder::<f32>::new(cfg.ae_dims(30), cfg.dropout, 4);
        let (back, cfg2) = Autoencoder::<f32>::from_checkpoint(&ae.to_checkpoint(&cfg)).unwrap();
        assert_eq!(back.store.checksum(), ae.store.checksum());
        assert!(config_diff(&cfg, &cfg2).is_empty());
        let g = Generator(ResNet::new(cfg.generator_dims(), 9));
        let ck = g.to_checkpoint(&cfg);
        assert_eq!(Generator::from_checkpoint(&ck).unwrap().0 .0.store.checksum(), g.0.store.checksum());
        assert!(Critic::from_checkpoint(&ck).is_err());
        assert!(Autoencoder::<f32>::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn config_mismatch_listed() {
        let mut b = RunConfig::desk();
        b.seed = 3;
        assert_eq!(config_diff(&RunConfig::desk(), &b), ["seed"]);
    }

    #[test]
    fn wrong_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load_kind(&path, ModelKind::Critic).is_err());
        assert!(Checkpoint::load_kind(&path, ModelKind::Generator).is_ok());
    }
}
