use std::collections::HashMap;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.grads.push(vec![T::zero(); value.len()]);
        self.values.push(value);
        self.names.push(name.to_string());
        self.frozen.push(false);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds a parameter drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: Vec<usize>, bound: f64, rng: &mut R) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![T::from_f64(value); n])?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[T]) {
        for (d, &s) in self.grads[id.0].iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(|g| vec![U::zero(); g.len()]).collect(),
            frozen: self.frozen.clone(),
            index: self.index.clone(),
        }
    }

    pub fn records(&self) -> Vec<(String, Tensor<f32>)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.clone(), v.cast()))
            .collect()
    }

    /// Overwrites values from named records; every parameter must be present
    /// with a matching shape. Extra records are ignored.
    pub fn load_records(&mut self, records: &[(String, Tensor<f32>)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<f32>> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (i, name) in self.names.iter().enumerate() {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            if t.shape != self.values[i].shape {
                return Err(Error::Format(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape, self.values[i].shape
                )));
            }
            self.values[i] = t.cast();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.values.iter().map(|v| vec![T::zero(); v.len()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (lr, eps) = (T::from_f64(self.cfg.lr), T::from_f64(self.cfg.eps));
        let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
        for i in 0..store.values.len() {
            if store.frozen[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &store.grads[i]);
            for (j, p) in store.values[i].data.iter_mut().enumerate() {
                m[j] = b1t * m[j] + (T::one() - b1t) * g[j];
                v[j] = b2t * v[j] + (T::one() - b2t) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn records(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as f32))];
        for (i, name) in store.names.iter().enumerate() {
            let shape = store.values[i].shape.clone();
            let to32 = |x: &Vec<T>| Tensor {
                shape: shape.clone(),
                data: x.iter().map(|v| v.as_f64() as f32).collect(),
            };
            out.push((format!("adam.m.{name}"), to32(&self.m[i])));
            out.push((format!("adam.v.{name}"), to32(&self.v[i])));
        }
        out
    }

    pub fn load_records(&mut self, store: &ParamStore<T>, records: &[(String, Tensor<f32>)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<f32>> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let step = by_name
            .get("adam.step")
            .ok_or_else(|| Error::Format("checkpoint lacks optimizer state".into()))?;
        self.step = step.item() as u64;
        for (i, name) in store.names.iter().enumerate() {
            for (key, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let t = by_name
                    .get(format!("adam.{key}.{name}").as_str())
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks adam.{key}.{name}")))?;
                if t.len() != slot.len() {
                    return Err(Error::Format(format!("adam.{key}.{name}: size mismatch")));
                }
                *slot = t.data.iter().map(|&x| T::from_f64(x as f64)).collect();
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"CMT1";

/// `CMT1`, u32 count, then per tensor: u32 name length, UTF-8 name, u32
/// rank, u32 dims, f32 payload. All integers and floats little-endian.
pub fn encode_checkpoint(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let count = r.u32("header")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor { shape, data }));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(records))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_checkpoint(&bytes)
}
