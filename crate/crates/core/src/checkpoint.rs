//! Versioned little-endian checkpoint files.
//!
//! Layout (`u32`/`u64`/`u128` little-endian, strings length-prefixed by `u32`):
//!
//! ```text
//! magic       8 bytes "MOLECKPT"
//! version     u32     1
//! config      string  model configuration as TOML
//! vocabulary  string  output characters in index order (blank excluded)
//! step        u64     optimizer steps taken
//! rng         32-byte seed, u64 stream, u128 word position of the batch sampler
//! params      u32 count, then per tensor:
//!               string name, u32 rank, rank × u32 dims, numel × f64
//! optimizer   u32 count (0 or params count), then per tensor:
//!               numel × f64 first moment, numel × f64 second moment
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{MoleError, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOLECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Complete position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Adam moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocabulary: String,
    pub step: u64,
    pub sampler: RngState,
    pub params: Vec<(String, Tensor)>,
    /// Empty before the first optimizer step.
    pub moments: Vec<Moments>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MoleError::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| MoleError::format(self.path, "string is not UTF-8"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| MoleError::format(self.path, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION as usize);
        w.str(&self.config.to_toml());
        w.str(&self.vocabulary);
        w.u64(self.step);
        w.0.extend_from_slice(&self.sampler.seed);
        w.u64(self.sampler.stream);
        w.0.extend_from_slice(&self.sampler.word_pos.to_le_bytes());
        w.u32(self.params.len());
        for (name, t) in &self.params {
            w.str(name);
            w.u32(t.shape().len());
            for &d in t.shape() {
                w.u32(d);
            }
            w.f64s(t.data());
        }
        w.u32(self.moments.len());
        for m in &self.moments {
            w.f64s(&m.m);
            w.f64s(&m.v);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(MoleError::format(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(MoleError::format(
                path,
                format!("unsupported version {version}"),
            ));
        }
        let config = toml::from_str(&r.str()?)
            .map_err(|e| MoleError::format(path, format!("config: {e}")))?;
        let vocabulary = r.str()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u32()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = r.f64s(numel)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let n_moments = r.u32()?;
        if n_moments != 0 && n_moments != params.len() {
            return Err(MoleError::format(
                path,
                "optimizer state does not match parameters",
            ));
        }
        let mut moments = Vec::with_capacity(n_moments);
        for (_, t) in params.iter().take(n_moments) {
            moments.push(Moments {
                m: r.f64s(t.numel())?,
                v: r.f64s(t.numel())?,
            });
        }
        if r.pos != buf.len() {
            return Err(MoleError::format(path, "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            vocabulary,
            step,
            sampler: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MoleError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| MoleError::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    /// Loads a checkpoint and requires its configuration to equal `expected`.
    pub fn load_with_config(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let c = Self::load(path)?;
        if &c.config != expected {
            return Err(MoleError::Config(format!(
                "{} was saved with a different configuration",
                path.display()
            )));
        }
        Ok(c)
    }

    /// Rebuilds the model and installs the stored parameters.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config)?;
        if model.params.len() != self.params.len() {
            return Err(MoleError::Config(format!(
                "checkpoint has {} tensors, configuration builds {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model.params.id(name).ok_or_else(|| {
                MoleError::Config(format!("checkpoint tensor {name} not in model"))
            })?;
            if model.params.get(id).shape() != t.shape() {
                return Err(MoleError::dim(
                    "checkpoint",
                    t.shape(),
                    model.params.get(id).shape(),
                ));
            }
            *model.params.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    /// Snapshot of a model with no optimizer history.
    pub fn from_model(model: &Model, vocabulary: &str, sampler: &ChaCha8Rng) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocabulary: vocabulary.to_string(),
            step: 0,
            sampler: RngState::capture(sampler),
            params: model
                .params
                .iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.zero_grad();
                    (n.to_string(), t)
                })
                .collect(),
            moments: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::derived_rng;
    use rand::RngCore;

    fn model() -> Model {
        let c = ModelConfig {
            feature_dim: 4,
            vocab_size: 6,
            num_blocks: 2,
            expert_positions: vec![2],
            d_model: 8,
            d_ff: 8,
            gate_hidden: 3,
            num_languages: 2,
            ..ModelConfig::default()
        };
        Model::new(&c).unwrap()
    }

    fn checkpoint() -> Checkpoint {
        let m = model();
        let mut rng = derived_rng(3, "sampler");
        rng.next_u64();
        let mut c = Checkpoint::from_model(&m, "abcde", &rng);
        c.step = 17;
        c.moments = c
            .params
            .iter()
            .map(|(_, t)| Moments {
                m: t.data().iter().map(|x| x * 0.5).collect(),
                v: t.data().iter().map(|x| x * x).collect(),
            })
            .collect();
        c
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let c = checkpoint();
        c.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, c);
        loaded.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = derived_rng(5, "x");
        rng.next_u32();
        let state = RngState::capture(&rng);
        let expect: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        let mut back = state.restore();
        assert_eq!((0..4).map(|_| back.next_u64()).collect::<Vec<_>>(), expect);
    }

    #[test]
    fn forward_outputs_survive_round_trip() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        Checkpoint::from_model(&m, "abcde", &derived_rng(0, "s"))
            .save(&p)
            .unwrap();
        let back = Checkpoint::load(&p).unwrap().to_model().unwrap();
        let x = Tensor::randn(vec![5, 4], 1.0, &mut derived_rng(1, "probe"));
        let a = m.infer(&x).unwrap();
        let b = back.infer(&x).unwrap();
        assert!(a
            .log_probs
            .data()
            .iter()
            .zip(b.log_probs.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn config_mismatch_and_corruption_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = checkpoint();
        c.save(&p).unwrap();
        let other = ModelConfig {
            d_model: 16,
            ..c.config.clone()
        };
        assert!(matches!(
            Checkpoint::load_with_config(&p, &other),
            Err(MoleError::Config(_))
        ));
        Checkpoint::load_with_config(&p, &c.config).unwrap();

        let mut wrong = c.clone();
        wrong.config.d_model = 16;
        assert!(wrong.to_model().is_err());

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(MoleError::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, bad).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(MoleError::Format { .. })
        ));
    }
}
