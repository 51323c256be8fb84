//! Single-hidden-layer sequence classifier: an unrolled recurrent cell, an
//! optional k-winner-take-all inhibition, a dense output layer on the final
//! hidden state, and backpropagation through time.

use serde::{Deserialize, Serialize};

use crate::cells::{self, backward_preact, fan_bound, init_params, CellGrads, CellKind, CellParams, CoeffSpec, Gate, StepTrace};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::numerics::{gemm, sigmoid, Matrix, Real, Rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    SoftmaxCe,
    SigmoidBce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub n_x: usize,
    pub n_h: usize,
    pub n_y: usize,
    pub n_t: usize,
    /// Fraction η of hidden units suppressed each step; `None` disables
    /// inhibition.
    #[serde(default)]
    pub sparsity: Option<f64>,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "yes")]
    pub output_bias: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn new(cell: CellKind, n_x: usize, n_h: usize, n_y: usize, n_t: usize) -> Self {
        ModelConfig {
            cell,
            n_x,
            n_h,
            n_y,
            n_t,
            sparsity: None,
            loss: LossKind::SoftmaxCe,
            output_bias: true,
        }
    }

    /// Row-wise MNIST: 28 steps of 28 pixels, 10 classes.
    pub fn mnist(cell: CellKind, n_h: usize) -> Self {
        Self::new(cell, 28, n_h, 10, 28)
    }

    pub fn with_sparsity(mut self, eta: Option<f64>) -> Self {
        self.sparsity = eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n_x", self.n_x), ("n_h", self.n_h), ("n_y", self.n_y), ("n_t", self.n_t)] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if let Some(eta) = self.sparsity {
            if !(eta > 0.0 && eta < 1.0) {
                return Err(Error::Config(format!("model.sparsity = {eta} must lie strictly between 0 and 1")));
            }
        }
        if self.loss == LossKind::SoftmaxCe && self.n_y < 2 {
            return Err(Error::Config("softmax cross-entropy needs n_y >= 2".into()));
        }
        Ok(())
    }

    /// Number of units kept by the inhibition mask, if inhibition is on.
    pub fn active_units(&self) -> Option<usize> {
        self.sparsity.map(|eta| active_units(eta, self.n_h))
    }
}

/// `k = max(1, round((1 − η)·n_h))`.
pub fn active_units(eta: f64, n_h: usize) -> usize {
    (((1.0 - eta) * n_h as f64).round() as usize).clamp(1, n_h.max(1))
}

/// Indicator of the `k` largest entries of `h`; equal values go to the lower
/// index.
pub fn kmax_mask<T: Real>(h: &[T], k: usize) -> Vec<bool> {
    let k = k.min(h.len());
    let mut mask = vec![false; h.len()];
    if k == 0 {
        return mask;
    }
    let mut idx: Vec<usize> = (0..h.len()).collect();
    let order = |&a: &usize, &b: &usize| h[b].partial_cmp(&h[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
    }
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

/// Column-wise [`kmax_mask`] of an `n_h × n_b` activation matrix, as 0/1
/// values.
pub fn kmax_mask_columns<T: Real>(h: &Matrix<T>, k: usize) -> Matrix<T> {
    let (rows, cols) = h.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut col = vec![T::zero(); rows];
    for c in 0..cols {
        for (r, v) in col.iter_mut().enumerate() {
            *v = h.get(r, c);
        }
        for (r, on) in kmax_mask(&col, k).into_iter().enumerate() {
            if on {
                out.set(r, c, T::one());
            }
        }
    }
    out
}

/// Trainable output layer plus the recurrent cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real> {
    pub cell: CellParams<T>,
    /// `n_y × n_h`, so that logits are `W_y·h + b_y`.
    pub w_y: Matrix<T>,
    pub b_y: Option<Vec<T>>,
}

/// Stable tensor names, shared by checkpoints, optimizer state and reports.
pub fn block_tensor_name(gate: Gate, part: char) -> &'static str {
    match (gate, part) {
        (Gate::Reset, 'W') => "reset.W",
        (Gate::Reset, 'U') => "reset.U",
        (Gate::Reset, _) => "reset.b",
        (Gate::Update, 'W') => "update.W",
        (Gate::Update, 'U') => "update.U",
        (Gate::Update, _) => "update.b",
        (Gate::Candidate, 'W') => "candidate.W",
        (Gate::Candidate, 'U') => "candidate.U",
        (Gate::Candidate, _) => "candidate.b",
    }
}

pub const OUTPUT_W: &str = "output.W";
pub const OUTPUT_B: &str = "output.b";

impl<T: Real> ModelParams<T> {
    pub fn init(cfg: &ModelConfig, coeffs: CoeffSpec, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let cell = init_params(cfg.cell, cfg.n_x, cfg.n_h, coeffs, rng)?;
        let mut w_y = Matrix::zeros(cfg.n_y, cfg.n_h);
        let s = fan_bound(cfg.n_h, cfg.n_y);
        rng.fill_uniform(w_y.data_mut(), -s, s)?;
        Ok(ModelParams {
            cell,
            w_y,
            b_y: cfg.output_bias.then(|| vec![T::zero(); cfg.n_y]),
        })
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let c = &self.cell;
        if c.kind() != cfg.cell || c.n_x() != cfg.n_x || c.n_h() != cfg.n_h {
            return Err(Error::contract(
                "ModelParams",
                format!(
                    "cell is {} {}x{}, config wants {} {}x{}",
                    c.kind(),
                    c.n_x(),
                    c.n_h(),
                    cfg.cell,
                    cfg.n_x,
                    cfg.n_h
                ),
            ));
        }
        if self.w_y.shape() != (cfg.n_y, cfg.n_h) {
            return Err(Error::Shape {
                op: "ModelParams output layer",
                left: (cfg.n_y, cfg.n_h),
                right: self.w_y.shape(),
            });
        }
        match &self.b_y {
            Some(b) if cfg.output_bias && b.len() == cfg.n_y => Ok(()),
            None if !cfg.output_bias => Ok(()),
            _ => Err(Error::contract("ModelParams", "output bias does not match config")),
        }
    }

    /// Trainable tensors in canonical order. λ and β are not included.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out = Vec::new();
        for (g, b) in self.cell.blocks().iter() {
            out.push((block_tensor_name(g, 'W'), b.w.data()));
            out.push((block_tensor_name(g, 'U'), b.u.data()));
            out.push((block_tensor_name(g, 'b'), b.b.as_slice()));
        }
        out.push((OUTPUT_W, self.w_y.data()));
        if let Some(b) = &self.b_y {
            out.push((OUTPUT_B, b.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out = Vec::new();
        for (g, b) in self.cell.blocks_mut().iter_mut() {
            out.push((block_tensor_name(g, 'W'), b.w.data_mut()));
            out.push((block_tensor_name(g, 'U'), b.u.data_mut()));
            out.push((block_tensor_name(g, 'b'), b.b.as_mut_slice()));
        }
        out.push((OUTPUT_W, self.w_y.data_mut()));
        if let Some(b) = &mut self.b_y {
            out.push((OUTPUT_B, b.as_mut_slice()));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut blocks = cells::Blocks::zeros(self.cell.kind(), self.cell.n_x(), self.cell.n_h());
        for ((_, dst), (_, src)) in blocks.iter_mut().zip(self.cell.blocks().iter()) {
            dst.w = src.w.cast();
            dst.u = src.u.cast();
            dst.b = src.b.iter().map(|&v| U::lit(v.to_f64().unwrap())).collect();
        }
        let conv = |v: &[T]| -> Vec<U> { v.iter().map(|&x| U::lit(x.to_f64().unwrap())).collect() };
        ModelParams {
            cell: CellParams::from_parts(
                self.cell.kind(),
                blocks,
                self.cell.lambda().map(conv),
                self.cell.beta().map(conv),
            )
            .expect("casting preserves validity"),
            w_y: self.w_y.cast(),
            b_y: self.b_y.as_deref().map(conv),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T: Real> {
    pub cell: CellGrads<T>,
    pub w_y: Matrix<T>,
    pub b_y: Option<Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ParamGrads {
            cell: CellGrads::zeros(cfg.cell, cfg.n_x, cfg.n_h),
            w_y: Matrix::zeros(cfg.n_y, cfg.n_h),
            b_y: cfg.output_bias.then(|| vec![T::zero(); cfg.n_y]),
        }
    }

    /// Same names and order as [`ModelParams::tensors`].
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out = Vec::new();
        for (g, b) in self.cell.blocks.iter() {
            out.push((block_tensor_name(g, 'W'), b.w.data()));
            out.push((block_tensor_name(g, 'U'), b.u.data()));
            out.push((block_tensor_name(g, 'b'), b.b.as_slice()));
        }
        out.push((OUTPUT_W, self.w_y.data()));
        if let Some(b) = &self.b_y {
            out.push((OUTPUT_B, b.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out = Vec::new();
        for (g, b) in self.cell.blocks.iter_mut() {
            out.push((block_tensor_name(g, 'W'), b.w.data_mut()));
            out.push((block_tensor_name(g, 'U'), b.u.data_mut()));
            out.push((block_tensor_name(g, 'b'), b.b.as_mut_slice()));
        }
        out.push((OUTPUT_W, self.w_y.data_mut()));
        if let Some(b) = &mut self.b_y {
            out.push((OUTPUT_B, b.as_mut_slice()));
        }
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::lit(max_norm / norm);
            for (_, t) in self.tensors_mut() {
                t.iter_mut().for_each(|v| *v = *v * s);
            }
        }
        norm
    }
}

#[derive(Clone, Debug)]
pub struct ForwardRecord<T: Real> {
    /// One trace per timestep; masks live in `StepTrace::mask`.
    pub steps: Vec<StepTrace<T>>,
    /// The batch inputs, `n_x × (n_t·n_b)` in timestep-major blocks.
    pub inputs: Matrix<T>,
    pub logits: Matrix<T>,
    pub probs: Matrix<T>,
}

impl<T: Real> ForwardRecord<T> {
    pub fn masks(&self) -> Vec<&Matrix<T>> {
        self.steps.iter().filter_map(|s| s.mask.as_ref()).collect()
    }

    /// Hidden state fed to the output layer (masked if inhibition is on).
    pub fn final_state(&self) -> Matrix<T> {
        self.steps.last().expect("n_t >= 1").output()
    }

    pub fn n_b(&self) -> usize {
        self.logits.cols()
    }
}

fn check_batch<T: Real>(cfg: &ModelConfig, batch: &SequenceBatch<T>) -> Result<()> {
    if batch.n_x() != cfg.n_x || batch.n_t() != cfg.n_t {
        return Err(Error::Shape {
            op: "forward_sequence (n_x, n_t)",
            left: (cfg.n_x, cfg.n_t),
            right: (batch.n_x(), batch.n_t()),
        });
    }
    if batch.n_b() == 0 {
        return Err(Error::contract("forward_sequence", "empty batch"));
    }
    Ok(())
}

fn output_layer<T: Real>(p: &ModelParams<T>, cfg: &ModelConfig, h: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let n_b = h.cols();
    let mut logits = match &p.b_y {
        Some(b) => Matrix::from_fn(cfg.n_y, n_b, |r, _| b[r]),
        None => Matrix::zeros(cfg.n_y, n_b),
    };
    gemm(T::one(), p.w_y.view(), h.view(), T::one(), &mut logits)?;
    let probs = output_probs(&logits, cfg.loss);
    Ok((logits, probs))
}

/// Softmax per column or elementwise sigmoid, matching the loss.
pub fn output_probs<T: Real>(logits: &Matrix<T>, loss: LossKind) -> Matrix<T> {
    match loss {
        LossKind::SoftmaxCe => softmax_columns(logits),
        LossKind::SigmoidBce => logits.map(sigmoid),
    }
}

pub fn softmax_columns<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let (rows, cols) = logits.shape();
    let mut out = Matrix::zeros(rows, cols);
    for c in 0..cols {
        let max = (0..rows).map(|r| logits.get(r, c)).fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for r in 0..rows {
            let e = (logits.get(r, c) - max).exp();
            out.set(r, c, e);
            sum = sum + e;
        }
        for r in 0..rows {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

/// Projects every timestep through one block in a single GEMM.
fn project_all<T: Real>(block: &cells::Block<T>, inputs: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::from_fn(block.w.rows(), inputs.cols(), |r, _| block.b[r]);
    gemm(T::one(), block.w.view(), inputs.view(), T::one(), &mut out)?;
    Ok(out)
}

/// Forward pass. With `frozen` masks the inhibition pattern is taken from
/// them instead of being recomputed (used by gradient checking).
pub(crate) fn forward_impl<T: Real>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &SequenceBatch<T>,
    frozen: Option<&[Matrix<T>]>,
    keep_traces: bool,
) -> Result<ForwardRecord<T>> {
    cfg.validate()?;
    p.check(cfg)?;
    check_batch(cfg, batch)?;
    let n_b = batch.n_b();
    let inputs = batch.features();
    let blocks = p.cell.blocks();
    let proj = |g: Gate| blocks.get(g).map(|b| project_all(b, inputs)).transpose();
    let (pr, pz, ph) = (proj(Gate::Reset)?, proj(Gate::Update)?, proj(Gate::Candidate)?.unwrap());
    let k = cfg.active_units();
    let mut h = Matrix::zeros(cfg.n_h, n_b);
    let mut steps = Vec::with_capacity(if keep_traces { cfg.n_t } else { 1 });
    for t in 0..cfg.n_t {
        let cols = |m: &Matrix<T>| m.copy_col_block(t * n_b, n_b);
        let pre = cells::Projections {
            reset: pr.as_ref().map(cols),
            update: pz.as_ref().map(cols),
            candidate: cols(&ph),
        };
        let mut tr = cells::step_projected(&p.cell, batch.step_matrix(t), pre, &h)?;
        if let Some(k) = k {
            tr.mask = Some(match frozen {
                Some(m) => m[t].clone(),
                None => kmax_mask_columns(&tr.h, k),
            });
        }
        h = tr.output();
        if keep_traces || t + 1 == cfg.n_t {
            steps.push(tr);
        }
    }
    let (logits, probs) = output_layer(p, cfg, &h)?;
    Ok(ForwardRecord {
        steps,
        inputs: inputs.clone(),
        logits,
        probs,
    })
}

/// Runs the cell over all `n_t` steps from `h⁰ = 0` and classifies the final
/// hidden state.
pub fn forward_sequence<T: Real>(p: &ModelParams<T>, cfg: &ModelConfig, batch: &SequenceBatch<T>) -> Result<ForwardRecord<T>> {
    forward_impl(p, cfg, batch, None, true)
}

/// Logits only, without keeping per-step traces.
pub fn infer<T: Real>(p: &ModelParams<T>, cfg: &ModelConfig, batch: &SequenceBatch<T>) -> Result<Matrix<T>> {
    Ok(forward_impl(p, cfg, batch, None, false)?.logits)
}

/// Predicted class per column: argmax of the logits (lowest index on ties),
/// or `logit > 0` for a single sigmoid output.
pub fn predict_from_logits<T: Real>(logits: &Matrix<T>) -> Vec<usize> {
    let (rows, cols) = logits.shape();
    (0..cols)
        .map(|c| {
            if rows == 1 {
                return (logits.get(0, c) > T::zero()) as usize;
            }
            let mut best = 0;
            for r in 1..rows {
                if logits.get(r, c) > logits.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

fn check_labels(labels: &[usize], n_y: usize, n_b: usize, loss: LossKind) -> Result<()> {
    if labels.len() != n_b {
        return Err(Error::contract(
            "loss_and_grad",
            format!("{} labels for a batch of {n_b}", labels.len()),
        ));
    }
    let classes = if loss == LossKind::SigmoidBce && n_y == 1 { 2 } else { n_y };
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::contract(
            "loss_and_grad",
            format!("label {l} at column {i} is outside [0, {classes})"),
        ));
    }
    Ok(())
}

/// Batch-mean loss and its gradient with respect to the logits.
///
/// Softmax cross-entropy: `(softmax − onehot)/n_b`. Sigmoid BCE treats a
/// single output as a binary target and several outputs as one-hot targets.
pub fn loss_and_grad<T: Real>(record: &ForwardRecord<T>, labels: &[usize], loss: LossKind) -> Result<(f64, Matrix<T>)> {
    loss_from_logits(&record.logits, &record.probs, labels, loss)
}

/// [`loss_and_grad`] on bare logits; `probs` must be the matching output
/// nonlinearity (see [`output_probs`]).
pub fn loss_from_logits<T: Real>(logits: &Matrix<T>, probs: &Matrix<T>, labels: &[usize], loss: LossKind) -> Result<(f64, Matrix<T>)> {
    let (n_y, n_b) = logits.shape();
    check_labels(labels, n_y, n_b, loss)?;
    let inv_b = T::lit(1.0 / n_b as f64);
    let mut grad = Matrix::zeros(n_y, n_b);
    let mut total = 0.0f64;
    for (c, &y) in labels.iter().enumerate() {
        match loss {
            LossKind::SoftmaxCe => {
                let z: Vec<f64> = (0..n_y).map(|r| logits.get(r, c).to_f64().unwrap()).collect();
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - z[y];
                for r in 0..n_y {
                    let onehot = if r == y { T::one() } else { T::zero() };
                    grad.set(r, c, (probs.get(r, c) - onehot) * inv_b);
                }
            }
            LossKind::SigmoidBce => {
                for r in 0..n_y {
                    let target = if n_y == 1 { y as f64 } else { (r == y) as u8 as f64 };
                    let z = logits.get(r, c).to_f64().unwrap();
                    // softplus(z) − y·z, written to stay finite for large |z|
                    total += z.max(0.0) + (-z.abs()).exp().ln_1p() - target * z;
                    grad.set(r, c, (probs.get(r, c) - T::lit(target)) * inv_b);
                }
            }
        }
    }
    Ok((total / n_b as f64, grad))
}

/// Exact reverse of [`forward_sequence`]. Masks are constants: a suppressed
/// unit passes no gradient back through its position.
pub fn backward_through_time<T: Real>(
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    record: &ForwardRecord<T>,
    dlogits: &Matrix<T>,
) -> Result<ParamGrads<T>> {
    p.check(cfg)?;
    if record.steps.len() != cfg.n_t {
        return Err(Error::contract(
            "backward_through_time",
            format!("record holds {} steps, config has n_t = {}", record.steps.len(), cfg.n_t),
        ));
    }
    let n_b = record.n_b();
    if dlogits.shape() != (cfg.n_y, n_b) {
        return Err(Error::Shape {
            op: "backward_through_time",
            left: (cfg.n_y, n_b),
            right: dlogits.shape(),
        });
    }
    let one = T::one();
    let mut grads = ParamGrads::zeros(cfg);
    let h_final = record.final_state();
    gemm(one, dlogits.view(), h_final.t(), T::zero(), &mut grads.w_y)?;
    if let Some(b) = &mut grads.b_y {
        *b = dlogits.row_sums();
    }
    let mut dh = Matrix::zeros(cfg.n_h, n_b);
    gemm(one, p.w_y.t(), dlogits.view(), T::zero(), &mut dh)?;

    let width = cfg.n_t * n_b;
    let gates = cfg.cell.gates();
    let mut da: Vec<Matrix<T>> = gates.iter().map(|_| Matrix::zeros(cfg.n_h, width)).collect();
    for t in (0..cfg.n_t).rev() {
        let tr = &record.steps[t];
        if let Some(m) = &tr.mask {
            dh.data_mut().iter_mut().zip(m.data()).for_each(|(d, &k)| *d = *d * k);
        }
        let pre = backward_preact(&p.cell, tr, &dh)?;
        for (g, acc) in gates.iter().zip(da.iter_mut()) {
            acc.write_col_block(t * n_b, pre.get(*g).unwrap());
        }
        dh = pre.dh_prev;
    }
    for (g, acc) in gates.iter().zip(&da) {
        let mut rec = Matrix::zeros(cfg.n_h, width);
        for (t, tr) in record.steps.iter().enumerate() {
            rec.write_col_block(t * n_b, cells::recurrent_input(tr, *g));
        }
        let blk = grads.cell.blocks.get_mut(*g).unwrap();
        gemm(one, acc.view(), record.inputs.t(), T::zero(), &mut blk.w)?;
        gemm(one, acc.view(), rec.t(), T::zero(), &mut blk.u)?;
        blk.b = acc.row_sums();
    }
    Ok(grads)
}
