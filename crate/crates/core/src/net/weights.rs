//! Named `f32` tensors and the `GFTW` file format.
//!
//! Layout, all little-endian: magic `GFTW`, version `u32`, tensor count
//! `u32`, then per tensor a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank` dims as `u32` and the row-major `f32` data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AecError, Result};

pub const MAGIC: &[u8; 4] = b"GFTW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AecError::shape(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// How a tensor is filled by random initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f32),
    Constant(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightContainer {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Fails unless the container holds exactly the tensors in `specs`.
    pub fn check_against(&self, specs: &[TensorSpec]) -> Result<()> {
        for spec in specs {
            match self.tensors.get(&spec.name) {
                None => return Err(AecError::Load(format!("missing tensor '{}'", spec.name))),
                Some(t) if t.shape != spec.shape => {
                    return Err(AecError::Load(format!(
                        "tensor '{}' has shape {:?}, expected {:?}",
                        spec.name, t.shape, spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != specs.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(AecError::Load(format!("unexpected tensor '{extra}'")));
        }
        Ok(())
    }

    /// Fills every spec in order from one seeded stream.
    pub fn random(specs: &[TensorSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data = match spec.init {
                Init::Constant(v) => vec![v; n],
                Init::Uniform(b) if b > 0.0 => (0..n).map(|_| rng.random_range(-b..b)).collect(),
                Init::Uniform(_) => vec![0.0; n],
            };
            out.insert(spec.name.clone(), Tensor { shape: spec.shape.clone(), data });
        }
        out
    }

    pub fn zeros(specs: &[TensorSpec]) -> Self {
        let mut out = Self::new();
        for spec in specs {
            out.insert(spec.name.clone(), Tensor { shape: spec.shape.clone(), data: vec![0.0; spec.numel()] });
        }
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32::try_from(self.tensors.len()).map_err(|_| fmt("too many tensors"))?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| fmt("tensor name too long"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| fmt("tensor rank too large"))?;
            w.write_all(&[rank])?;
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| fmt("tensor dim too large"))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(AecError::Load("not a GFTW weight file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(AecError::Load(format!("unsupported GFTW version {version}")));
        }
        let count = read_u32(r)?;
        let mut out = Self::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| AecError::Load("tensor name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            read_exact(r, &mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(r, &mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if out.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(AecError::Load(format!("duplicate tensor '{name}'")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(AecError::Load("trailing bytes after last tensor".into()));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path.as_ref())
            .map_err(|e| AecError::Load(format!("{}: {e}", path.as_ref().display())))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

fn fmt(msg: &str) -> AecError {
    AecError::Format(msg.into())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => AecError::Load("truncated GFTW file".into()),
        _ => AecError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<TensorSpec> {
        vec![
            TensorSpec { name: "a.weight".into(), shape: vec![2, 3], init: Init::Uniform(0.5) },
            TensorSpec { name: "a.bias".into(), shape: vec![2], init: Init::Constant(0.25) },
        ]
    }

    #[test]
    fn byte_layout() {
        let mut c = WeightContainer::new();
        c.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let mut want = b"GFTW".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(1u16.to_le_bytes());
        want.push(b'w');
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn round_trip() {
        let c = WeightContainer::random(&specs(), 3);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = WeightContainer::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.get("a.bias").unwrap().data, vec![0.25, 0.25]);
    }

    #[test]
    fn seeded_random_is_reproducible() {
        assert_eq!(WeightContainer::random(&specs(), 9), WeightContainer::random(&specs(), 9));
        assert_ne!(WeightContainer::random(&specs(), 9), WeightContainer::random(&specs(), 10));
        let c = WeightContainer::random(&specs(), 9);
        assert!(c.get("a.weight").unwrap().data.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn strict_checks_name_the_tensor() {
        let mut c = WeightContainer::random(&specs(), 1);
        c.check_against(&specs()).unwrap();
        c.remove("a.bias");
        let err = c.check_against(&specs()).unwrap_err().to_string();
        assert!(err.contains("a.bias"), "{err}");
        let mut c = WeightContainer::random(&specs(), 1);
        c.insert("a.bias", Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        assert!(c.check_against(&specs()).unwrap_err().to_string().contains("a.bias"));
        let mut c = WeightContainer::random(&specs(), 1);
        c.insert("stray", Tensor::new(vec![1], vec![0.0]).unwrap());
        assert!(c.check_against(&specs()).unwrap_err().to_string().contains("stray"));
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(WeightContainer::read_from(&mut &b"NOPE"[..]), Err(AecError::Load(_))));
        let c = WeightContainer::random(&specs(), 2);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let cut = &buf[..buf.len() - 2];
        assert!(matches!(WeightContainer::read_from(&mut &cut[..]), Err(AecError::Load(_))));
        buf.push(0);
        assert!(matches!(WeightContainer::read_from(&mut buf.as_slice()), Err(AecError::Load(_))));
        let mut v2 = b"GFTW".to_vec();
        v2.extend(2u32.to_le_bytes());
        v2.extend(0u32.to_le_bytes());
        assert!(matches!(WeightContainer::read_from(&mut v2.as_slice()), Err(AecError::Load(_))));
    }

    #[test]
    fn tensor_len_checked() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
