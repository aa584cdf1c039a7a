//! Named parameters and the binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "FSQCKPT\0"
//! version   u32       CHECKPOINT_VERSION
//! digest    32 bytes  SHA-256 of the canonical model config
//! count     u32
//! count x { name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64),
//!           ndim u32, dims u64 x ndim, raw values }
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};

use crate::compute::NoiseRng;
use crate::config::ConfigDigest;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSQCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Parameter initializers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Owns every parameter of a model under a unique slash-separated name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    dtype: DType,
    frozen: bool,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            dtype,
            frozen: false,
        }
    }

    /// A view sharing this store's parameter storage whose builder hands out
    /// tensors detached from the gradient graph. Models built on it run
    /// inference without retaining intermediate activations, and see every
    /// later update to the original parameters.
    pub fn frozen_view(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<Var> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.contiguous()?)?;
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            var: var.clone(),
            trainable,
        });
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut NoiseRng) -> ParamBuilder<'a> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
        }
    }

    /// Adds Gaussian noise of standard deviation `std` to every parameter
    /// whose name satisfies `filter`.
    pub fn perturb(&self, rng: &mut NoiseRng, std: f64, filter: impl Fn(&str) -> bool) -> Result<()> {
        for p in self.params.iter().filter(|p| filter(&p.name)) {
            let noise = rng.normal_tensor(p.var.dims(), self.dtype)?;
            let updated = (p.var.as_tensor() + (noise * std)?)?;
            p.var.set(&updated)?;
        }
        Ok(())
    }

    /// Deep copy of every parameter value, in insertion order.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.params
            .iter()
            .map(|p| Ok((p.name.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    pub fn to_checkpoint(&self, digest: ConfigDigest) -> Result<Checkpoint> {
        Ok(Checkpoint {
            digest,
            tensors: self.snapshot()?,
        })
    }

    /// Loads values from `ckpt`. The digest must equal `expected`, and the
    /// checkpoint must hold exactly this store's names and shapes.
    pub fn load_checkpoint(&self, ckpt: &Checkpoint, expected: ConfigDigest) -> Result<()> {
        if ckpt.digest != expected {
            return Err(Error::DigestMismatch {
                expected: expected.to_hex(),
                found: ckpt.digest.to_hex(),
            });
        }
        if ckpt.tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                ckpt.tensors.len(),
                self.params.len()
            )));
        }
        for (name, value) in &ckpt.tensors {
            let p = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if p.var.dims() != value.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: model {:?}, checkpoint {:?}",
                    p.var.dims(),
                    value.dims()
                )));
            }
            p.var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, digest: ConfigDigest) -> Result<()> {
        self.to_checkpoint(digest)?.write(path)
    }

    pub fn load(&self, path: &Path, expected: ConfigDigest) -> Result<()> {
        self.load_checkpoint(&Checkpoint::read(path)?, expected)
    }
}

/// Creates parameters under a name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut NoiseRng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    /// Builder for the child namespace `prefix/name`.
    pub fn pp<'b>(&'b mut self, name: impl AsRef<str>) -> ParamBuilder<'b> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}/{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn rng(&mut self) -> &mut NoiseRng {
        self.rng
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}/{name}", self.prefix)
        }
    }

    fn init_tensor(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => self.rng.normal_vec(n).into_iter().map(|x| x * std).collect(),
            Init::Uniform(b) => (0..n).map(|_| (2.0 * self.rng.uniform() - 1.0) * b).collect(),
        };
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn frozen(&self) -> bool {
        self.store.frozen
    }

    /// Existing parameter of a frozen store, checked against `shape`.
    fn existing(&self, name: &str, shape: &[usize]) -> Result<Var> {
        let full = self.full_name(name);
        let p = self
            .store
            .get(&full)
            .ok_or_else(|| Error::Checkpoint(format!("frozen store has no parameter `{full}`")))?;
        if p.var.dims() != shape {
            return Err(Error::Checkpoint(format!(
                "frozen parameter `{full}` has shape {:?}, expected {shape:?}",
                p.var.dims()
            )));
        }
        Ok(p.var.clone())
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        if self.store.frozen {
            return self.existing(name, shape);
        }
        let value = self.init_tensor(shape, init)?;
        self.var_from(name, value, trainable)
    }

    pub fn var_from(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<Var> {
        if self.store.frozen {
            return self.existing(name, value.dims());
        }
        let full = self.full_name(name);
        self.store.insert(&full, value, trainable)
    }

    /// Trainable parameter; returns the tensor view models compute with.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = self.var(name, shape, init, true)?;
        Ok(if self.store.frozen { var.as_tensor().detach() } else { var.as_tensor().clone() })
    }
}

/// In-memory image of a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub digest: ConfigDigest,
    pub tensors: Vec<(String, Tensor)>,
}

fn read_exact<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest.0);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let tag: u8 = match t.dtype() {
                DType::F32 => 0,
                DType::F64 => 1,
                other => {
                    return Err(Error::Checkpoint(format!("unsupported dtype {other:?} for `{name}`")))
                }
            };
            out.push(tag);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            match tag {
                0 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = bytes.as_slice();
        let magic: [u8; 8] = read_exact(&mut r, path)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(read_exact(&mut r, path)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let digest = ConfigDigest(read_exact(&mut r, path)?);
        let count = u32::from_le_bytes(read_exact(&mut r, path)?) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_exact(&mut r, path)?) as usize;
            if name_len > r.len() {
                return Err(Error::Checkpoint("truncated parameter name".into()));
            }
            let (name, rest) = r.split_at(name_len);
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            r = rest;
            let [tag] = read_exact::<1>(&mut r, path)?;
            let ndim = u32::from_le_bytes(read_exact(&mut r, path)?) as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u64::from_le_bytes(read_exact(&mut r, path)?) as usize);
            }
            let n: usize = dims.iter().product();
            let t = match tag {
                0 => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        v.push(f32::from_le_bytes(read_exact(&mut r, path)?));
                    }
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        v.push(f64::from_le_bytes(read_exact(&mut r, path)?));
                    }
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                t => return Err(Error::Checkpoint(format!("unknown dtype tag {t} for `{name}`"))),
            };
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { digest, tensors })
    }

    /// Arithmetic mean of each named tensor across checkpoints.
    pub fn average(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
        let first = ckpts
            .first()
            .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
        for c in &ckpts[1..] {
            if c.digest != first.digest {
                return Err(Error::DigestMismatch {
                    expected: first.digest.to_hex(),
                    found: c.digest.to_hex(),
                });
            }
        }
        let k = ckpts.len() as f64;
        let mut tensors = Vec::with_capacity(first.tensors.len());
        for (i, (name, t0)) in first.tensors.iter().enumerate() {
            let mut acc = t0.to_dtype(DType::F64)?;
            for c in &ckpts[1..] {
                let (n, t) = c
                    .tensors
                    .get(i)
                    .filter(|(n, _)| n == name)
                    .or_else(|| c.tensors.iter().find(|(n, _)| n == name))
                    .ok_or_else(|| Error::Checkpoint(format!("`{name}` missing from a checkpoint")))?;
                if t.dims() != t0.dims() {
                    return Err(Error::Checkpoint(format!("shape mismatch for `{n}`")));
                }
                acc = (acc + t.to_dtype(DType::F64)?)?;
            }
            let mean = if ckpts.len() == 1 { acc } else { (acc / k)? };
            tensors.push((name.clone(), mean.to_dtype(t0.dtype())?));
        }
        Ok(Checkpoint {
            digest: first.digest,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(dtype: DType) -> ParamStore {
        let mut s = ParamStore::new(dtype);
        let mut rng = NoiseRng::new(0);
        let mut b = s.builder(&mut rng);
        let mut enc = b.pp("enc");
        enc.param("w", &[3, 2], Init::Normal(1.0)).unwrap();
        enc.param("b", &[2], Init::Zeros).unwrap();
        b.var("flag", &[1], Init::Const(1.0), false).unwrap();
        s
    }

    #[test]
    fn names_are_namespaced_and_unique() {
        let mut s = store(DType::F32);
        assert!(s.get("enc/w").is_some());
        assert!(!s.get("flag").unwrap().trainable);
        assert_eq!(s.trainable().count(), 2);
        let mut rng = NoiseRng::new(0);
        let err = s.builder(&mut rng).pp("enc").param("w", &[1], Init::Zeros);
        assert!(err.is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for dtype in [DType::F32, DType::F64] {
            let s = store(dtype);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.bin");
            let digest = ConfigDigest::of_text("cfg");
            s.save(&path, digest).unwrap();
            let fresh = store(dtype);
            fresh.perturb(&mut NoiseRng::new(9), 1.0, |_| true).unwrap();
            fresh.load(&path, digest).unwrap();
            for (a, b) in s.iter().zip(fresh.iter()) {
                let x = a.var.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
                let y = b.var.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn digest_mismatch_is_rejected() {
        let s = store(DType::F32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        s.save(&path, ConfigDigest::of_text("a")).unwrap();
        let err = s.load(&path, ConfigDigest::of_text("b")).unwrap_err();
        assert!(matches!(err, Error::DigestMismatch { .. }));
    }

    #[test]
    fn averaging() {
        let mk = |v: f64, digest: &str| Checkpoint {
            digest: ConfigDigest::of_text(digest),
            tensors: vec![("p".into(), Tensor::new(&[v], &Device::Cpu).unwrap())],
        };
        let avg = Checkpoint::average(&[mk(1.0, "d"), mk(3.0, "d")]).unwrap();
        assert_eq!(avg.tensors[0].1.to_vec1::<f64>().unwrap(), vec![2.0]);
        let one = Checkpoint::average(&[mk(1.25, "d")]).unwrap();
        assert_eq!(one.tensors[0].1.to_vec1::<f64>().unwrap(), vec![1.25]);
        let same = Checkpoint::average(&[mk(0.1, "d"), mk(0.1, "d")]).unwrap();
        assert_eq!(same.tensors[0].1.to_vec1::<f64>().unwrap(), vec![0.1]);
        assert!(Checkpoint::average(&[mk(1.0, "d"), mk(1.0, "e")]).is_err());
    }
}
