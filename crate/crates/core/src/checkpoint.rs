//! Binary checkpoint container for model weights and optimizer state.
//! The byte layout is described in `docs/checkpoint.md`.

use std::fs;
use std::path::Path;

use crate::cells::{Blocks, CellKind, CellParams};
use crate::error::{Error, Result};
use crate::network::{block_tensor_name, ModelConfig, ModelParams, OUTPUT_B, OUTPUT_W};
use crate::numerics::{Matrix, Real};
use crate::optim::{OptimConfig, OptimKind, OptimState, Slot};

pub const MAGIC: &[u8; 8] = b"MIRUCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Model,
    Optimizer,
}

impl FileKind {
    fn code(self) -> u8 {
        match self {
            FileKind::Model => 0,
            FileKind::Optimizer => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Values widened to f64; narrowed again on load.
    pub data: Vec<f64>,
}

impl Tensor {
    fn from_slice<T: Real>(name: &str, rows: usize, cols: usize, data: &[T]) -> Self {
        Tensor {
            name: name.to_string(),
            rows,
            cols,
            data: data.iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }

    fn values<T: Real>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::lit(v)).collect()
    }

    fn matrix<T: Real>(&self) -> Result<Matrix<T>> {
        Matrix::from_vec(self.rows, self.cols, self.values())
    }
}

/// Decoded file: header fields, numeric attributes and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: FileKind,
    pub cell: CellKind,
    pub n_x: usize,
    pub n_h: usize,
    pub n_y: usize,
    /// Bytes per stored value: 4 or 8.
    pub precision: u8,
    pub attrs: Vec<(String, f64)>,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn attr(&self, key: &str) -> Option<f64> {
        self.attrs.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn need(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.push(self.cell.code());
        for d in [self.n_x, self.n_h, self.n_y] {
            out.extend_from_slice(&u32_of(d)?.to_le_bytes());
        }
        if !matches!(self.precision, 4 | 8) {
            return Err(Error::Checkpoint(format!("unsupported precision {}", self.precision)));
        }
        out.push(self.precision);
        out.extend_from_slice(&u16_of(self.attrs.len())?.to_le_bytes());
        for (k, v) in &self.attrs {
            put_name(&mut out, k)?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&u32_of(self.tensors.len())?.to_le_bytes());
        for t in &self.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(Error::Checkpoint(format!("tensor `{}` has inconsistent size", t.name)));
            }
            put_name(&mut out, &t.name)?;
            out.extend_from_slice(&u32_of(t.rows)?.to_le_bytes());
            out.extend_from_slice(&u32_of(t.cols)?.to_le_bytes());
            for &v in &t.data {
                if self.precision == 4 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = match r.u8()? {
            0 => FileKind::Model,
            1 => FileKind::Optimizer,
            k => return Err(Error::Checkpoint(format!("unknown file kind {k}"))),
        };
        let code = r.u8()?;
        let cell = CellKind::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown cell kind {code}")))?;
        let (n_x, n_h, n_y) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let precision = r.u8()?;
        if !matches!(precision, 4 | 8) {
            return Err(Error::Checkpoint(format!("unsupported precision {precision}")));
        }
        let n_attrs = r.u16()?;
        let mut attrs = Vec::with_capacity(n_attrs as usize);
        for _ in 0..n_attrs {
            let k = r.name()?;
            attrs.push((k, f64::from_le_bytes(r.take(8)?.try_into().unwrap())));
        }
        let n_tensors = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.name()?;
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let raw = r.take(rows * cols * precision as usize)?;
            let data = raw
                .chunks_exact(precision as usize)
                .map(|c| {
                    if precision == 4 {
                        f32::from_le_bytes(c.try_into().unwrap()) as f64
                    } else {
                        f64::from_le_bytes(c.try_into().unwrap())
                    }
                })
                .collect();
            tensors.push(Tensor { name, rows, cols, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container {
            kind,
            cell,
            n_x,
            n_h,
            n_y,
            precision,
            attrs,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))
}

fn u16_of(v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u16")))
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    out.extend_from_slice(&u16_of(name.len())?.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }
}

pub fn model_container<T: Real>(p: &ModelParams<T>) -> Container {
    let c = &p.cell;
    let n_h = c.n_h();
    let mut tensors = Vec::new();
    if let Some(l) = c.lambda() {
        tensors.push(Tensor::from_slice("lambda", n_h, 1, l));
    }
    if let Some(b) = c.beta() {
        tensors.push(Tensor::from_slice("beta", n_h, 1, b));
    }
    for (g, b) in c.blocks().iter() {
        tensors.push(Tensor::from_slice(block_tensor_name(g, 'W'), n_h, c.n_x(), b.w.data()));
        tensors.push(Tensor::from_slice(block_tensor_name(g, 'U'), n_h, n_h, b.u.data()));
        tensors.push(Tensor::from_slice(block_tensor_name(g, 'b'), n_h, 1, &b.b));
    }
    tensors.push(Tensor::from_slice(OUTPUT_W, p.w_y.rows(), p.w_y.cols(), p.w_y.data()));
    if let Some(b) = &p.b_y {
        tensors.push(Tensor::from_slice(OUTPUT_B, b.len(), 1, b));
    }
    Container {
        kind: FileKind::Model,
        cell: c.kind(),
        n_x: c.n_x(),
        n_h,
        n_y: p.w_y.rows(),
        precision: T::BYTES as u8,
        attrs: Vec::new(),
        tensors,
    }
}

pub fn model_from_container<T: Real>(c: &Container) -> Result<ModelParams<T>> {
    if c.kind != FileKind::Model {
        return Err(Error::Checkpoint("file holds optimizer state, not a model".into()));
    }
    let mut blocks = Blocks::zeros(c.cell, c.n_x, c.n_h);
    for (g, b) in blocks.iter_mut() {
        let shape = |name: &str, rows, cols| -> Result<&Tensor> {
            let t = c.need(name)?;
            if (t.rows, t.cols) != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "`{name}` is {}x{}, expected {rows}x{cols}",
                    t.rows, t.cols
                )));
            }
            Ok(t)
        };
        b.w = shape(block_tensor_name(g, 'W'), c.n_h, c.n_x)?.matrix()?;
        b.u = shape(block_tensor_name(g, 'U'), c.n_h, c.n_h)?.matrix()?;
        b.b = shape(block_tensor_name(g, 'b'), c.n_h, 1)?.values();
    }
    let coeff = |name: &str| c.tensor(name).map(|t| t.values::<T>());
    let cell = CellParams::from_parts(c.cell, blocks, coeff("lambda"), coeff("beta"))
        .map_err(|e| Error::Checkpoint(format!("invalid cell: {e}")))?;
    let w_y = c.need(OUTPUT_W)?.matrix()?;
    if w_y.shape() != (c.n_y, c.n_h) {
        return Err(Error::Checkpoint("output.W shape disagrees with header".into()));
    }
    Ok(ModelParams {
        cell,
        w_y,
        b_y: c.tensor(OUTPUT_B).map(|t| t.values()),
    })
}

pub fn save_model<T: Real>(path: &Path, p: &ModelParams<T>) -> Result<()> {
    model_container(p).write(path)
}

pub fn load_model<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    model_from_container(&Container::read(path)?)
}

/// Loads a model and checks it against `cfg`.
pub fn load_model_for<T: Real>(path: &Path, cfg: &ModelConfig) -> Result<ModelParams<T>> {
    let p = load_model(path)?;
    p.check(cfg)?;
    Ok(p)
}

pub fn optim_container<T: Real>(st: &OptimState<T>, model: &ModelParams<T>) -> Container {
    let c = &st.config;
    let attrs = vec![
        ("kind".into(), c.kind.code() as f64),
        ("steps".into(), st.steps as f64),
        ("lr".into(), c.lr),
        ("rho".into(), c.rho),
        ("beta1".into(), c.beta1),
        ("beta2".into(), c.beta2),
        ("eps".into(), c.eps),
        ("weight_decay".into(), c.weight_decay),
    ];
    let mut tensors = Vec::new();
    for s in &st.slots {
        if !s.m.is_empty() {
            tensors.push(Tensor::from_slice(&format!("m:{}", s.name), s.m.len(), 1, &s.m));
        }
        if !s.v.is_empty() {
            tensors.push(Tensor::from_slice(&format!("v:{}", s.name), s.v.len(), 1, &s.v));
        }
    }
    Container {
        kind: FileKind::Optimizer,
        cell: model.cell.kind(),
        n_x: model.cell.n_x(),
        n_h: model.cell.n_h(),
        n_y: model.w_y.rows(),
        precision: T::BYTES as u8,
        attrs,
        tensors,
    }
}

pub fn optim_from_container<T: Real>(c: &Container, model: &ModelParams<T>) -> Result<OptimState<T>> {
    if c.kind != FileKind::Optimizer {
        return Err(Error::Checkpoint("file holds a model, not optimizer state".into()));
    }
    let attr = |k: &str| c.attr(k).ok_or_else(|| Error::Checkpoint(format!("missing attribute `{k}`")));
    let kind = OptimKind::from_code(attr("kind")? as u8).ok_or_else(|| Error::Checkpoint("unknown optimizer kind".into()))?;
    let config = OptimConfig {
        kind,
        lr: attr("lr")?,
        rho: attr("rho")?,
        beta1: attr("beta1")?,
        beta2: attr("beta2")?,
        eps: attr("eps")?,
        weight_decay: attr("weight_decay")?,
    };
    let mut st = OptimState::new(config, model)?;
    st.steps = attr("steps")? as u64;
    for Slot { name, m, v } in &mut st.slots {
        for (prefix, buf) in [("m", m), ("v", v)] {
            if buf.is_empty() {
                continue;
            }
            let t = c.need(&format!("{prefix}:{name}"))?;
            if t.data.len() != buf.len() {
                return Err(Error::Checkpoint(format!("`{prefix}:{name}` has the wrong length")));
            }
            *buf = t.values();
        }
    }
    Ok(st)
}

pub fn save_optim<T: Real>(path: &Path, st: &OptimState<T>, model: &ModelParams<T>) -> Result<()> {
    optim_container(st, model).write(path)
}

pub fn load_optim<T: Real>(path: &Path, model: &ModelParams<T>) -> Result<OptimState<T>> {
    optim_from_container(&Container::read(path)?, model)
}
