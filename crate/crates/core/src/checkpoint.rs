//! Binary checkpoints.
//!
//! Layout (little-endian): magic `NFA1`, `u32` version, then length-prefixed
//! sections for the config text, generator, encoder, both Adam states,
//! counters, the shuffling RNG, training feature statistics and model
//! selection state. Arrays carry a `u64` length.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::math::{Matrix, Rng, RngSnapshot};
use crate::mlp::{Activation, Layer, MlpSpec};
use crate::model::Generator;
use crate::sparse::FeatureStats;
use crate::train::{AdamConfig, AdamState, Nfa, TrainState};

pub const MAGIC: &[u8; 4] = b"NFA1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Nfa,
    pub state: TrainState,
    /// Statistics of the training corpus (TF-IDF needs them at test time).
    pub stats: FeatureStats,
    /// Best validation score so far (lower is better); `+∞` if none.
    pub best_score: f64,
    /// Validations since the best one.
    pub since_best: u64,
}

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b)?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u128(&mut self, v: u128) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn len(&mut self, n: usize) -> Result<()> {
        self.u64(n as u64)
    }
    fn f64s(&mut self, xs: &[f64]) -> Result<()> {
        self.len(xs.len())?;
        for &x in xs {
            self.f64(x)?;
        }
        Ok(())
    }
    fn usizes(&mut self, xs: &[usize]) -> Result<()> {
        self.len(xs.len())?;
        for &x in xs {
            self.u64(x as u64)?;
        }
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.bytes(s.as_bytes())
    }
    fn matrix(&mut self, m: &Matrix) -> Result<()> {
        self.u64(m.rows() as u64)?;
        self.u64(m.cols() as u64)?;
        self.f64s(m.as_slice())
    }
    fn layers(&mut self, layers: &[Layer]) -> Result<()> {
        self.len(layers.len())?;
        for l in layers {
            self.matrix(&l.weight)?;
            self.f64s(&l.bias)?;
        }
        Ok(())
    }
    fn adam(&mut self, a: &AdamState) -> Result<()> {
        let c = a.config;
        for x in [c.lr, c.beta1, c.beta2, c.eps] {
            self.f64(x)?;
        }
        self.u64(a.t)?;
        self.len(a.m.len())?;
        for (m, v) in a.m.iter().zip(&a.v) {
            self.f64s(m)?;
            self.f64s(v)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    r: R,
}

/// Upper bound on any single array, to fail fast on corrupt lengths.
const MAX_LEN: u64 = 1 << 34;

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.r
            .read_exact(buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))
    }
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn u128(&mut self) -> Result<u128> {
        let mut b = [0; 16];
        self.fill(&mut b)?;
        Ok(u128::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(Error::Checkpoint(format!("implausible array length {n}")));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(self.u64()? as usize)).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut b = vec![0; n];
        self.fill(&mut b)?;
        String::from_utf8(b).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        Matrix::from_vec(rows, cols, self.f64s()?)
    }
    fn layers(&mut self) -> Result<Vec<Layer>> {
        let n = self.len()?;
        (0..n)
            .map(|_| {
                Ok(Layer {
                    weight: self.matrix()?,
                    bias: self.f64s()?,
                })
            })
            .collect()
    }
    fn adam(&mut self) -> Result<AdamState> {
        let config = AdamConfig {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let t = self.u64()?;
        let n = self.len()?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            m.push(self.f64s()?);
            v.push(self.f64s()?);
        }
        Ok(AdamState { config, t, m, v })
    }
}

fn check_adam(a: &AdamState, tensors: &[&[f64]], name: &str) -> Result<()> {
    let ok = a.m.len() == tensors.len()
        && a.m.iter().zip(&a.v).zip(tensors).all(|((m, v), t)| m.len() == t.len() && v.len() == t.len());
    if ok {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("{name} optimizer state does not match the parameters")))
    }
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = Writer { w };
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.str(&self.config.serialize())?;

        let g = &self.model.generator;
        w.usizes(&g.spec().layer_dims)?;
        w.u8(g.activation().tag())?;
        w.layers(g.layers())?;

        let e = &self.model.encoder;
        let spec = e.spec();
        w.u64(spec.input_dim as u64)?;
        w.usizes(&spec.hidden)?;
        w.u64(spec.latent_dim as u64)?;
        w.u8(spec.activation.tag())?;
        let (lo, hi) = e.logvar_bounds();
        w.f64(lo)?;
        w.f64(hi)?;
        w.layers(e.trunk_layers())?;
        w.matrix(e.w_mu())?;
        w.matrix(e.w_logvar())?;

        w.adam(&self.state.adam_theta)?;
        w.adam(&self.state.adam_phi)?;
        w.u64(self.state.updates)?;
        w.u64(self.state.epoch)?;
        let snap = self.state.rng.snapshot();
        w.bytes(&snap.seed)?;
        w.u64(snap.stream)?;
        w.u128(snap.word_pos)?;

        w.u64(self.stats.doc_count as u64)?;
        w.usizes(&self.stats.doc_frequency)?;
        w.f64(self.best_score)?;
        w.u64(self.since_best)?;
        w.w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader { r };
        let mut magic = [0u8; 4];
        r.fill(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let config = RunConfig::parse(&r.str()?)?;

        let dims = r.usizes()?;
        let act = Activation::from_tag(r.u8()?)?;
        let generator = Generator::from_layers(MlpSpec::new(dims, act)?, r.layers()?)?;

        let input_dim = r.u64()? as usize;
        let hidden = r.usizes()?;
        let latent_dim = r.u64()? as usize;
        let activation = Activation::from_tag(r.u8()?)?;
        let bounds = (r.f64()?, r.f64()?);
        let spec = EncoderSpec {
            input_dim,
            hidden,
            latent_dim,
            activation,
        };
        let trunk = r.layers()?;
        let w_mu = r.matrix()?;
        let w_logvar = r.matrix()?;
        let encoder = Encoder::from_parts(spec, trunk, w_mu, w_logvar, bounds)?;

        let adam_theta = r.adam()?;
        let adam_phi = r.adam()?;
        check_adam(&adam_theta, &generator.tensors(), "generator")?;
        check_adam(&adam_phi, &encoder.tensors(), "encoder")?;
        let updates = r.u64()?;
        let epoch = r.u64()?;
        let mut seed = [0u8; 32];
        r.fill(&mut seed)?;
        let snap = RngSnapshot {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };

        let doc_count = r.u64()? as usize;
        let doc_frequency = r.usizes()?;
        let best_score = r.f64()?;
        let since_best = r.u64()?;
        let mut rest = [0u8; 1];
        if r.r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }

        if generator.vocab_size() != encoder.input_dim() || generator.latent_dim() != encoder.latent_dim() {
            return Err(Error::Checkpoint("generator and encoder dimensions disagree".into()));
        }
        if doc_frequency.len() != generator.vocab_size() {
            return Err(Error::Checkpoint("feature statistics do not match the vocabulary".into()));
        }
        Ok(Self {
            config,
            model: Nfa { generator, encoder },
            state: TrainState {
                adam_theta,
                adam_phi,
                updates,
                epoch,
                rng: Rng::from_snapshot(&snap),
            },
            stats: FeatureStats {
                doc_count,
                doc_frequency,
            },
            best_score,
            since_best,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write_to(&mut v)?;
        Ok(v)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        Self::read_from(b)
    }

    /// Writes to a temporary file next to `path`, then renames.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write_to(std::io::BufWriter::new(f))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f)).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Human-readable dump for debugging.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "# checkpoint version {VERSION}");
        let _ = writeln!(s, "epoch {}", self.state.epoch);
        let _ = writeln!(s, "updates {}", self.state.updates);
        let _ = writeln!(s, "best_score {}", self.best_score);
        let _ = writeln!(s, "since_best {}", self.since_best);
        let _ = writeln!(s, "train_docs {}", self.stats.doc_count);
        let snap = self.state.rng.snapshot();
        let _ = writeln!(s, "rng stream {} word_pos {}", snap.stream, snap.word_pos);
        let _ = writeln!(s, "[config]");
        s.push_str(&self.config.serialize());
        let dump = |s: &mut String, name: &str, tensors: Vec<&[f64]>| {
            for (i, t) in tensors.iter().enumerate() {
                let _ = write!(s, "{name}[{i}] len {}:", t.len());
                for x in t.iter() {
                    let _ = write!(s, " {x}");
                }
                s.push('\n');
            }
        };
        let _ = writeln!(s, "[generator] dims {:?}", self.model.generator.spec().layer_dims);
        dump(&mut s, "theta", self.model.generator.tensors());
        let _ = writeln!(s, "[encoder] logvar_bounds {:?}", self.model.encoder.logvar_bounds());
        dump(&mut s, "phi", self.model.encoder.tensors());
        let _ = writeln!(s, "[adam_theta] t {}", self.state.adam_theta.t);
        let _ = writeln!(s, "[adam_phi] t {}", self.state.adam_phi.t);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    fn sample() -> Checkpoint {
        let mut config = RunConfig::default();
        config.train = TrainConfig {
            latent_dim: 3,
            generator_hidden: vec![4, 5],
            encoder_hidden: vec![6],
            ..TrainConfig::default()
        };
        let model = Nfa::new(&config.train, 9).unwrap();
        let mut state = TrainState::new(&model, &config.train);
        state.adam_theta.t = 3;
        state.adam_theta.m[0][1] = 0.25;
        state.adam_phi.v[2][0] = 1e-300;
        state.updates = 17;
        state.epoch = 2;
        for _ in 0..5 {
            state.rng.uniform();
        }
        Checkpoint {
            config,
            model,
            state,
            stats: FeatureStats {
                doc_count: 4,
                doc_frequency: vec![1, 0, 2, 3, 4, 1, 1, 0, 2],
            },
            best_score: 123.5,
            since_best: 1,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut a = back.state.rng.clone();
        let mut b = c.state.rng.clone();
        assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        assert!(c.to_text().contains("epoch 2"));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        match Checkpoint::from_bytes(&v2) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("version 2")),
            other => panic!("{other:?}"),
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert!(Checkpoint::load(dir.path().join("missing")).is_err());
    }
}
