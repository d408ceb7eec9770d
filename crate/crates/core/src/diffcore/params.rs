use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape, Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"PDKP";

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Array2<f64>,
    grad: Array2<f64>,
    has_grad: bool,
    // Adam moments
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
}

impl Param {
    fn new(value: Array2<f64>) -> Self {
        let z = Array2::zeros(value.dim());
        Self {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
            has_grad: false,
            t: 0,
        }
    }
}

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable matrices with gradient accumulators and optimizer state.
///
/// Iteration order is lexicographic by name, which fixes checkpoint layout
/// and update order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(invalid(format!("bad parameter name length {}", name.len())));
        }
        if self.params.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    /// Insert an `rows×cols` matrix drawn from N(0, std²).
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Array2::zeros((rows, cols)))
    }

    pub fn value(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Array2<f64>> {
        self.params.get(name).filter(|p| p.has_grad).map(|p| &p.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn add_grad(&mut self, name: &str, g: &Array2<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?;
        if p.grad.dim() != g.dim() {
            return Err(shape(format!(
                "gradient for `{name}`: {:?} vs {:?}",
                g.dim(),
                p.grad.dim()
            )));
        }
        p.grad += g;
        p.has_grad = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
            p.has_grad = false;
        }
    }

    /// Scale every accumulated gradient, e.g. to average over a batch.
    pub fn scale_grads(&mut self, c: f64) {
        for p in self.params.values_mut() {
            p.grad *= c;
        }
    }

    /// Apply one optimizer update to every parameter that received a gradient,
    /// then zero all gradients.
    pub fn step(&mut self, opt: &Optimizer) -> Result<()> {
        if !self.params.values().any(|p| p.has_grad) {
            return Err(Error::State("optimizer step without any gradient".into()));
        }
        for (name, p) in self.params.iter_mut().filter(|(_, p)| p.has_grad) {
            if !p.grad.iter().all(|g| g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
            match *opt {
                Optimizer::Sgd { lr } => p.value.scaled_add(-lr, &p.grad),
                Optimizer::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    p.t += 1;
                    let t = p.t as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    ndarray::Zip::from(&mut p.value)
                        .and(&mut p.m)
                        .and(&mut p.v)
                        .and(&p.grad)
                        .for_each(|w, m, v, &g| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                        });
                }
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Serialize parameter values in the `PDKP` checkpoint layout.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let (r, c) = p.value.dim();
            w.write_all(&(r as u32).to_le_bytes())?;
            w.write_all(&(c as u32).to_le_bytes())?;
            for v in p.value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load a `PDKP` checkpoint; optimizer state starts fresh.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let count = read_u32(&mut r)?;
        let mut store = Self::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            store.insert(name, value)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }

    /// Bitwise equality of parameter values, ignoring optimizer state.
    pub fn values_equal(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((a, pa), (b, pb))| {
                a == b
                    && pa.value.dim() == pb.value.dim()
                    && pa
                        .value
                        .iter()
                        .zip(pb.value.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
