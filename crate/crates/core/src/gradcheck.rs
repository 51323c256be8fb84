//! Central finite-difference check of the analytic BPTT gradients in 64-bit.

use serde::{Deserialize, Serialize};

use crate::cells::{CellKind, CoeffSpec};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::network::{backward_through_time, forward_impl, loss_and_grad, loss_from_logits, ModelConfig, ModelParams};
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSpec {
    pub model: ModelConfig,
    pub n_b: usize,
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
}

impl GradcheckSpec {
    pub fn new(cell: CellKind, n_x: usize, n_h: usize, n_y: usize, n_t: usize, n_b: usize, seed: u64) -> Self {
        GradcheckSpec {
            model: ModelConfig::new(cell, n_x, n_h, n_y, n_t),
            n_b,
            seed,
            eps: DEFAULT_EPS,
            tol: DEFAULT_TOL,
        }
    }

    /// The default suite: 5×7×3, four steps, batch of two, seeds 0..5.
    pub fn suite() -> Vec<GradcheckSpec> {
        CellKind::ALL
            .iter()
            .flat_map(|&k| (0..5).map(move |s| GradcheckSpec::new(k, 5, 7, 3, 4, 2, s)))
            .collect()
    }
}

/// Adds `delta` to one analytic gradient entry before comparison; a
/// negative control for the checker itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub tensor: String,
    pub index: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub spec: GradcheckSpec,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| t.max_rel_err > self.spec.tol)
    }
}

fn random_inputs(spec: &GradcheckSpec, rng: &mut Rng) -> Result<SequenceBatch<f64>> {
    let cfg = &spec.model;
    let mut seqs = Vec::with_capacity(spec.n_b);
    for _ in 0..spec.n_b {
        let mut s = vec![0.0; cfg.n_x * cfg.n_t];
        rng.fill_uniform(&mut s, -1.0, 1.0)?;
        seqs.push(s);
    }
    let refs: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
    let labels = (0..spec.n_b).map(|_| rng.below(cfg.n_y as u64) as usize).collect();
    SequenceBatch::from_sequences(cfg.n_x, cfg.n_t, &refs, labels, vec![0; spec.n_b], vec![false; spec.n_b])
}

/// Model with initializer weights, random λ/β and non-zero biases so every
/// term of the backward pass is exercised.
fn random_params(spec: &GradcheckSpec, rng: &mut Rng) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::<f64>::init(&spec.model, CoeffSpec::Random, rng)?;
    for (_, blk) in p.cell.blocks_mut().iter_mut() {
        rng.fill_uniform(&mut blk.b, -0.5, 0.5)?;
    }
    if let Some(b) = p.b_y.as_mut() {
        rng.fill_uniform(b, -0.5, 0.5)?;
    }
    Ok(p)
}

pub fn gradcheck(spec: &GradcheckSpec, corrupt: Option<&Corruption>) -> Result<GradcheckReport> {
    if spec.n_b == 0 || !(spec.eps > 0.0) || !(spec.tol > 0.0) {
        return Err(Error::contract("gradcheck", "n_b, eps and tol must be positive"));
    }
    let cfg = &spec.model;
    cfg.validate()?;
    let mut rng = Rng::new(spec.seed);
    let params = random_params(spec, &mut rng)?;
    let batch = random_inputs(spec, &mut rng)?;

    let rec = forward_impl(&params, cfg, &batch, None, true)?;
    let frozen: Option<Vec<Matrix<f64>>> = cfg.sparsity.map(|_| rec.masks().into_iter().cloned().collect());
    let (_, dl) = loss_and_grad(&rec, &batch.labels, cfg.loss)?;
    let grads = backward_through_time(&params, cfg, &rec, &dl)?;
    let mut analytic: Vec<(&str, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    if let Some(c) = corrupt {
        let (_, g) = analytic
            .iter_mut()
            .find(|(n, _)| *n == c.tensor)
            .ok_or_else(|| Error::contract("gradcheck", format!("no gradient tensor named {:?}", c.tensor)))?;
        let len = g.len();
        *g.get_mut(c.index)
            .ok_or_else(|| Error::contract("gradcheck", format!("index {} out of range for {} ({len})", c.index, c.tensor)))? += c.delta;
    }

    let loss_at = |q: &ModelParams<f64>| -> Result<f64> {
        let r = forward_impl(q, cfg, &batch, frozen.as_deref(), false)?;
        Ok(loss_from_logits(&r.logits, &r.probs, &batch.labels, cfg.loss)?.0)
    };
    let names: Vec<&str> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut tensors = Vec::new();
    for (name, a) in &analytic {
        let ti = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::contract("gradcheck", format!("gradient {name} has no parameter")))?;
        let mut check = TensorCheck {
            name: name.to_string(),
            len: a.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let mut q = params.clone();
        for (i, &ai) in a.iter().enumerate() {
            let orig = q.tensors_mut()[ti].1[i];
            q.tensors_mut()[ti].1[i] = orig + spec.eps;
            let up = loss_at(&q)?;
            q.tensors_mut()[ti].1[i] = orig - spec.eps;
            let down = loss_at(&q)?;
            q.tensors_mut()[ti].1[i] = orig;
            let num = (up - down) / (2.0 * spec.eps);
            let e = relative_error(ai, num);
            if e > check.max_rel_err || i == 0 {
                check.max_rel_err = e;
                check.worst_index = i;
                check.analytic = ai;
                check.numeric = num;
            }
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        spec: spec.clone(),
        tensors,
        max_rel_err,
        passed: max_rel_err <= spec.tol,
    })
}
