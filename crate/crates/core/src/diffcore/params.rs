//! Named parameters, Adam, EMA blending and a binary dump format.

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use super::array::Array2;
use super::DiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in insertion order, each with a gradient buffer of equal shape.
/// Equality compares names and values; gradient buffers are scratch space.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2>,
    grads: Vec<Array2>,
    index: HashMap<String, usize>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2) -> Result<ParamId, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::StoreMismatch(format!("duplicate parameter {name}")));
        }
        if !value.is_finite() {
            return Err(DiffError::NonFiniteDetected(name.to_string()));
        }
        let id = self.names.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Array2::zeros(value.rows(), value.cols()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Uniform init in `[-a, a]` with `a = sqrt(6 / (rows + cols))`.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId, DiffError> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_fn(rows, cols, |_, _| rng.random_range(-a..=a));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Array2 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2 {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Array2] {
        &self.values
    }

    pub fn grad(&self, id: ParamId) -> &Array2 {
        &self.grads[id.0]
    }

    pub fn grads(&self) -> &[Array2] {
        &self.grads
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Adds `scale * grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &[Array2], scale: f64) -> Result<(), DiffError> {
        if grads.len() != self.grads.len() {
            return Err(DiffError::ShapeMismatch(format!("{} gradients for {} parameters", grads.len(), self.len())));
        }
        for (i, (buf, g)) in self.grads.iter_mut().zip(grads).enumerate() {
            if buf.shape() != g.shape() {
                return Err(DiffError::ShapeMismatch(format!("gradient for {}", self.names[i])));
            }
            buf.axpy(scale, g);
        }
        Ok(())
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(Array2::is_finite)
    }

    fn check_same_layout(&self, other: &ParamStore) -> Result<(), DiffError> {
        if self.names != other.names {
            return Err(DiffError::StoreMismatch("parameter names differ".into()));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(DiffError::StoreMismatch(format!("shape of {}", self.names[i])));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2>,
    pub v: Vec<Array2>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.values().iter().map(|p| Array2::zeros(p.rows(), p.cols())).collect::<Vec<_>>();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update from the store's gradient buffers.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<(), DiffError> {
    if state.m.len() != store.len() {
        return Err(DiffError::ShapeMismatch("optimizer state does not match parameters".into()));
    }
    if !store.grads_finite() {
        return Err(DiffError::NonFiniteDetected("gradients".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..store.len() {
        let (p, g) = (&mut store.values[i], &store.grads[i]);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if p.shape() != m.shape() {
            return Err(DiffError::ShapeMismatch(format!("optimizer state for {}", store.names[i])));
        }
        for (((pv, &gv), mv), vv) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
        {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<(), DiffError> {
    teacher.check_same_layout(student)?;
    for (t, s) in teacher.values.iter_mut().zip(&student.values) {
        if m == 0.0 {
            t.data_mut().copy_from_slice(s.data());
            continue;
        }
        if m == 1.0 {
            continue;
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// Names, shapes and little-endian values.
pub fn write_params<W: Write>(w: &mut W, store: &ParamStore) -> Result<(), DiffError> {
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for (name, value) in store.names.iter().zip(&store.values) {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(value.rows() as u32)?;
        w.write_u32::<LittleEndian>(value.cols() as u32)?;
        for &v in value.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParamStore, DiffError> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        if len > 4096 {
            return Err(DiffError::Malformed(format!("parameter name of {len} bytes")));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let name = String::from_utf8(buf).map_err(|e| DiffError::Malformed(e.to_string()))?;
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        store.add(&name, Array2::new(rows, cols, data)?)?;
    }
    Ok(store)
}
