use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::spec::NetworkSpec;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MPKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Parameters of one network. Each parametric layer owns a weight tensor,
/// followed by a bias tensor when the layer has one.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let mut tensors = Vec::new();
        for layer in &spec.layers {
            if let Some((shape, _)) = layer.weight_shape() {
                tensors.push(Tensor::zeros(shape));
            }
            if let Some(n) = layer.bias_len() {
                tensors.push(Tensor::zeros(vec![n]));
            }
        }
        ModelParams { tensors }
    }

    /// He initialization: weights ~ N(0, 2 / fan_in), biases zero.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(spec, &mut rng)
    }

    pub fn init_with<R: rand::Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut tensors = Vec::new();
        for layer in &spec.layers {
            if let Some((shape, fan_in)) = layer.weight_shape() {
                let scale = (2.0 / fan_in as f64).sqrt();
                let mut t = Tensor::zeros(shape);
                for w in &mut t.data {
                    let z: f64 = StandardNormal.sample(rng);
                    *w = scale * z;
                }
                tensors.push(t);
            }
            if let Some(n) = layer.bias_len() {
                tensors.push(Tensor::zeros(vec![n]));
            }
        }
        ModelParams { tensors }
    }

    pub fn matches(&self, spec: &NetworkSpec) -> bool {
        let expected = ModelParams::zeros(spec);
        self.tensors.len() == expected.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&expected.tensors)
                .all(|(a, b)| a.shape == b.shape && a.data.len() == b.data.len())
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if !self.matches(spec) {
            return Err(Error::invalid(
                "parameter shapes do not match the network spec",
            ));
        }
        if !self.is_finite() {
            return Err(Error::invalid("parameters contain non-finite entries"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        self.iter_mut().for_each(|v| *v *= c);
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes to the binary params format: magic `MPKP`, version, tensor
    /// count, then for each tensor its rank, dims and little-endian f64 data.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + self.len() * 8);
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, origin, "magic")?;
        if &magic != MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_path_buf(),
                found: u32::from_be_bytes(magic),
                expected: u32::from_be_bytes(*MAGIC),
            });
        }
        let version = read_u32(&mut r, origin, "version")?;
        if version != VERSION {
            return Err(Error::Format {
                path: origin.to_path_buf(),
                detail: format!("unsupported params version {version}"),
            });
        }
        let count = read_u32(&mut r, origin, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = read_u32(&mut r, origin, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r, origin, "dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            read_exact(&mut r, &mut bytes, origin, "tensor data")?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { shape, data });
        }
        Ok(ModelParams { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice(), path)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], origin: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated {
        path: origin.to_path_buf(),
        detail: format!("while reading {what}"),
    })
}

fn read_u32<R: Read>(r: &mut R, origin: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, origin, what)?;
    Ok(u32::from_le_bytes(b))
}
