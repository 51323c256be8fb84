//! Recurrent cells: the standard GRU and the two Minion Recurrent Unit
//! variants, each with a forward step that records everything the backward
//! step needs.
//!
//! | kind   | learned blocks        | fixed coefficients |
//! |--------|-----------------------|--------------------|
//! | GRU    | reset, update, cand.  | none               |
//! | MiRU-1 | reset, candidate      | λ                  |
//! | MiRU-2 | candidate             | λ, β               |
//!
//! λ and β are per-unit vectors in `[0, 1]` and never receive gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm, gemm_bias_into, sigmoid, Matrix, Real, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    #[serde(rename = "gru")]
    Gru,
    #[serde(rename = "miru1", alias = "miru-1")]
    Miru1,
    #[serde(rename = "miru2", alias = "miru-2")]
    Miru2,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Gru, CellKind::Miru1, CellKind::Miru2];

    /// Learned blocks in canonical order.
    pub fn gates(self) -> &'static [Gate] {
        match self {
            CellKind::Gru => &[Gate::Reset, Gate::Update, Gate::Candidate],
            CellKind::Miru1 => &[Gate::Reset, Gate::Candidate],
            CellKind::Miru2 => &[Gate::Candidate],
        }
    }

    pub fn has_lambda(self) -> bool {
        !matches!(self, CellKind::Gru)
    }

    pub fn has_beta(self) -> bool {
        matches!(self, CellKind::Miru2)
    }

    pub fn code(self) -> u8 {
        match self {
            CellKind::Gru => 0,
            CellKind::Miru1 => 1,
            CellKind::Miru2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "GRU",
            CellKind::Miru1 => "MiRU-1",
            CellKind::Miru2 => "MiRU-2",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "gru" => Ok(CellKind::Gru),
            "miru1" => Ok(CellKind::Miru1),
            "miru2" => Ok(CellKind::Miru2),
            _ => Err(Error::Config(format!("unknown cell kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Gate {
    Reset,
    Update,
    Candidate,
}

impl Gate {
    pub fn tag(self) -> &'static str {
        match self {
            Gate::Reset => "reset",
            Gate::Update => "update",
            Gate::Candidate => "candidate",
        }
    }
}

/// `W` (n_h × n_x), `U` (n_h × n_h) and `b` (n_h) of one gate or candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Real> {
    pub w: Matrix<T>,
    pub u: Matrix<T>,
    pub b: Vec<T>,
}

impl<T: Real> Block<T> {
    pub fn zeros(n_x: usize, n_h: usize) -> Self {
        Block {
            w: Matrix::zeros(n_h, n_x),
            u: Matrix::zeros(n_h, n_h),
            b: vec![T::zero(); n_h],
        }
    }
}

/// The learned blocks of a cell. Which entries are present is fixed by the
/// cell kind and checked at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Blocks<T: Real> {
    reset: Option<Block<T>>,
    update: Option<Block<T>>,
    candidate: Block<T>,
}

impl<T: Real> Blocks<T> {
    pub fn zeros(kind: CellKind, n_x: usize, n_h: usize) -> Self {
        let make = |g| kind.gates().contains(&g).then(|| Block::zeros(n_x, n_h));
        Blocks {
            reset: make(Gate::Reset),
            update: make(Gate::Update),
            candidate: Block::zeros(n_x, n_h),
        }
    }

    pub fn get(&self, gate: Gate) -> Option<&Block<T>> {
        match gate {
            Gate::Reset => self.reset.as_ref(),
            Gate::Update => self.update.as_ref(),
            Gate::Candidate => Some(&self.candidate),
        }
    }

    pub fn get_mut(&mut self, gate: Gate) -> Option<&mut Block<T>> {
        match gate {
            Gate::Reset => self.reset.as_mut(),
            Gate::Update => self.update.as_mut(),
            Gate::Candidate => Some(&mut self.candidate),
        }
    }

    /// Present blocks in canonical order (reset, update, candidate).
    pub fn iter(&self) -> impl Iterator<Item = (Gate, &Block<T>)> {
        [Gate::Reset, Gate::Update, Gate::Candidate]
            .into_iter()
            .filter_map(move |g| self.get(g).map(|b| (g, b)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Gate, &mut Block<T>)> {
        let Blocks {
            reset,
            update,
            candidate,
        } = self;
        reset
            .as_mut()
            .map(|b| (Gate::Reset, b))
            .into_iter()
            .chain(update.as_mut().map(|b| (Gate::Update, b)))
            .chain(std::iter::once((Gate::Candidate, candidate)))
    }

    fn gates(&self) -> Vec<Gate> {
        self.iter().map(|(g, _)| g).collect()
    }
}

/// How λ and β are set at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CoeffSpec {
    /// One value broadcast to every unit.
    Scalar { lambda: f64, beta: f64 },
    /// Independent per-unit draws from `uniform(0.1, 0.9)`.
    Random,
}

impl CoeffSpec {
    pub const RANDOM_RANGE: (f64, f64) = (0.1, 0.9);

    pub fn validate(&self) -> Result<()> {
        if let CoeffSpec::Scalar { lambda, beta } = *self {
            for (name, v) in [("lambda", lambda), ("beta", beta)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::contract(
                        "init_params",
                        format!("{name} = {v} is outside [0, 1]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellParams<T: Real> {
    kind: CellKind,
    n_x: usize,
    n_h: usize,
    blocks: Blocks<T>,
    lambda: Option<Vec<T>>,
    beta: Option<Vec<T>>,
}

impl<T: Real> CellParams<T> {
    /// Assembles a cell from explicit parts, auditing that the block set and
    /// coefficients match `kind` and that every shape agrees.
    pub fn from_parts(
        kind: CellKind,
        blocks: Blocks<T>,
        lambda: Option<Vec<T>>,
        beta: Option<Vec<T>>,
    ) -> Result<Self> {
        let (n_h, n_x) = blocks.candidate.w.shape();
        if blocks.gates() != kind.gates() {
            return Err(Error::contract(
                "CellParams",
                format!("{kind} needs blocks {:?}, got {:?}", kind.gates(), blocks.gates()),
            ));
        }
        for (g, b) in blocks.iter() {
            if b.w.shape() != (n_h, n_x) || b.u.shape() != (n_h, n_h) || b.b.len() != n_h {
                return Err(Error::contract(
                    "CellParams",
                    format!("{} block has inconsistent shapes", g.tag()),
                ));
            }
        }
        for (name, present, want, v) in [
            ("lambda", lambda.is_some(), kind.has_lambda(), &lambda),
            ("beta", beta.is_some(), kind.has_beta(), &beta),
        ] {
            if present != want {
                return Err(Error::contract(
                    "CellParams",
                    format!("{kind} {} {name}", if want { "requires" } else { "has no" }),
                ));
            }
            if let Some(v) = v {
                if v.len() != n_h || v.iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
                    return Err(Error::contract(
                        "CellParams",
                        format!("{name} must hold {n_h} values in [0, 1]"),
                    ));
                }
            }
        }
        Ok(CellParams {
            kind,
            n_x,
            n_h,
            blocks,
            lambda,
            beta,
        })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_h(&self) -> usize {
        self.n_h
    }

    pub fn blocks(&self) -> &Blocks<T> {
        &self.blocks
    }

    /// Mutable access to the learned blocks only; the coefficients stay
    /// read-only.
    pub fn blocks_mut(&mut self) -> &mut Blocks<T> {
        &mut self.blocks
    }

    pub fn lambda(&self) -> Option<&[T]> {
        self.lambda.as_deref()
    }

    pub fn beta(&self) -> Option<&[T]> {
        self.beta.as_deref()
    }

    /// Replaces λ (tests and analysis only; training never calls this).
    pub fn with_lambda(mut self, lambda: Vec<T>) -> Result<Self> {
        self.lambda = Some(lambda);
        let CellParams {
            kind,
            blocks,
            lambda,
            beta,
            ..
        } = self;
        Self::from_parts(kind, blocks, lambda, beta)
    }

    pub fn with_beta(mut self, beta: Vec<T>) -> Result<Self> {
        self.beta = Some(beta);
        let CellParams {
            kind,
            blocks,
            lambda,
            beta,
            ..
        } = self;
        Self::from_parts(kind, blocks, lambda, beta)
    }
}

/// Uniform fan-based bound `sqrt(6 / (fan_in + fan_out))`.
pub fn fan_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_params<T: Real>(
    kind: CellKind,
    n_x: usize,
    n_h: usize,
    coeffs: CoeffSpec,
    rng: &mut Rng,
) -> Result<CellParams<T>> {
    if n_x == 0 || n_h == 0 {
        return Err(Error::contract(
            "init_params",
            format!("n_x = {n_x}, n_h = {n_h}; both must be at least 1"),
        ));
    }
    coeffs.validate()?;
    let mut blocks = Blocks::zeros(kind, n_x, n_h);
    let sw = fan_bound(n_x, n_h);
    let su = fan_bound(n_h, n_h);
    for (_, block) in blocks.iter_mut() {
        rng.fill_uniform(block.w.data_mut(), -sw, sw)?;
        rng.fill_uniform(block.u.data_mut(), -su, su)?;
    }
    let mut coeff = |scalar: f64| -> Result<Vec<T>> {
        match coeffs {
            CoeffSpec::Scalar { .. } => Ok(vec![T::lit(scalar); n_h]),
            CoeffSpec::Random => {
                let (lo, hi) = CoeffSpec::RANDOM_RANGE;
                (0..n_h).map(|_| rng.uniform(lo, hi).map(T::lit)).collect()
            }
        }
    };
    let (ls, bs) = match coeffs {
        CoeffSpec::Scalar { lambda, beta } => (lambda, beta),
        CoeffSpec::Random => (0.0, 0.0),
    };
    let lambda = if kind.has_lambda() { Some(coeff(ls)?) } else { None };
    let beta = if kind.has_beta() { Some(coeff(bs)?) } else { None };
    CellParams::from_parts(kind, blocks, lambda, beta)
}

/// Cache of one forward step. `h` is the cell output before any inhibition
/// mask; `mask` is filled in by the network when inhibition is on.
#[derive(Clone, Debug)]
pub struct StepTrace<T: Real> {
    pub x: Matrix<T>,
    pub h_prev: Matrix<T>,
    pub r: Option<Matrix<T>>,
    pub z: Option<Matrix<T>>,
    pub h_tilde: Matrix<T>,
    /// Recurrent input of the candidate: `r⊙h_prev`, `β⊙h_prev`.
    pub cand_rec: Matrix<T>,
    pub h: Matrix<T>,
    pub mask: Option<Matrix<T>>,
}

impl<T: Real> StepTrace<T> {
    /// The state passed on to the next step and to the output layer.
    pub fn output(&self) -> Matrix<T> {
        match &self.mask {
            Some(m) => {
                let mut out = self.h.clone();
                out.data_mut()
                    .iter_mut()
                    .zip(m.data())
                    .for_each(|(v, &k)| *v = *v * k);
                out
            }
            None => self.h.clone(),
        }
    }
}

/// Input projections `W_g·x + b_g`, one `n_h × n_b` matrix per present gate.
pub(crate) struct Projections<T: Real> {
    pub reset: Option<Matrix<T>>,
    pub update: Option<Matrix<T>>,
    pub candidate: Matrix<T>,
}

fn check_step_shapes<T: Real>(
    op: &'static str,
    p: &CellParams<T>,
    x: &Matrix<T>,
    h_prev: &Matrix<T>,
) -> Result<()> {
    if x.rows() != p.n_x {
        return Err(Error::Shape {
            op,
            left: (p.n_h, p.n_x),
            right: x.shape(),
        });
    }
    if h_prev.shape() != (p.n_h, x.cols()) {
        return Err(Error::Shape {
            op,
            left: (p.n_h, x.cols()),
            right: h_prev.shape(),
        });
    }
    Ok(())
}

fn expect_kind<T: Real>(op: &'static str, p: &CellParams<T>, kind: CellKind) -> Result<()> {
    if p.kind != kind {
        return Err(Error::contract(op, format!("expects a {kind} cell, got {}", p.kind)));
    }
    Ok(())
}

pub(crate) fn project<T: Real>(p: &CellParams<T>, x: &Matrix<T>) -> Result<Projections<T>> {
    let n_b = x.cols();
    let proj = |block: &Block<T>| -> Result<Matrix<T>> {
        let mut out = Matrix::zeros(p.n_h, n_b);
        gemm_bias_into(block.w.view(), x.view(), &block.b, &mut out, false)?;
        Ok(out)
    };
    Ok(Projections {
        reset: p.blocks.reset.as_ref().map(proj).transpose()?,
        update: p.blocks.update.as_ref().map(proj).transpose()?,
        candidate: proj(&p.blocks.candidate)?,
    })
}

fn add_recurrent<T: Real>(pre: &mut Matrix<T>, u: &Matrix<T>, rec: &Matrix<T>) -> Result<()> {
    gemm(T::one(), u.view(), rec.view(), T::one(), pre)
}

/// `a ⊙ p + (1 − a) ⊙ q` with `a` given per element.
fn mix_elem<T: Real>(a: &Matrix<T>, p: &Matrix<T>, q: &Matrix<T>) -> Matrix<T> {
    let mut out = q.clone();
    out.data_mut()
        .iter_mut()
        .zip(a.data().iter().zip(p.data()))
        .for_each(|(o, (&a, &p))| *o = a * p + (T::one() - a) * *o);
    out
}

/// Same mix with `a` given per unit (row).
fn mix_rows<T: Real>(a: &[T], p: &Matrix<T>, q: &Matrix<T>) -> Matrix<T> {
    let cols = q.cols();
    let mut out = q.clone();
    for (r, &a) in a.iter().enumerate() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        row.iter_mut()
            .zip(p.row(r))
            .for_each(|(o, &p)| *o = a * p + (T::one() - a) * *o);
    }
    out
}

fn hadamard_unchecked<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut out = a.clone();
    out.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, &y)| *x = *x * y);
    out
}

fn scale_rows_unchecked<T: Real>(m: &Matrix<T>, v: &[T]) -> Matrix<T> {
    crate::numerics::scale_rows(m, v)
}

/// Forward step from precomputed input projections. Shapes are trusted.
pub(crate) fn step_projected<T: Real>(
    p: &CellParams<T>,
    x: Matrix<T>,
    mut pre: Projections<T>,
    h_prev: &Matrix<T>,
) -> Result<StepTrace<T>> {
    let squash = |m: &mut Matrix<T>| m.map_inplace(sigmoid);
    match p.kind {
        CellKind::Gru => {
            let (mut r, mut z) = (pre.reset.take().unwrap(), pre.update.take().unwrap());
            add_recurrent(&mut r, &p.blocks.reset.as_ref().unwrap().u, h_prev)?;
            add_recurrent(&mut z, &p.blocks.update.as_ref().unwrap().u, h_prev)?;
            squash(&mut r);
            squash(&mut z);
            let cand_rec = hadamard_unchecked(&r, h_prev);
            let mut h_tilde = pre.candidate;
            add_recurrent(&mut h_tilde, &p.blocks.candidate.u, &cand_rec)?;
            h_tilde.map_inplace(|v| v.tanh_act());
            let h = mix_elem(&z, h_prev, &h_tilde);
            Ok(StepTrace {
                x,
                h_prev: h_prev.clone(),
                r: Some(r),
                z: Some(z),
                h_tilde,
                cand_rec,
                h,
                mask: None,
            })
        }
        CellKind::Miru1 => {
            let mut r = pre.reset.take().unwrap();
            add_recurrent(&mut r, &p.blocks.reset.as_ref().unwrap().u, h_prev)?;
            squash(&mut r);
            let cand_rec = hadamard_unchecked(&r, h_prev);
            let mut h_tilde = pre.candidate;
            add_recurrent(&mut h_tilde, &p.blocks.candidate.u, &cand_rec)?;
            h_tilde.map_inplace(|v| v.tanh_act());
            let h = mix_rows(p.lambda.as_ref().unwrap(), h_prev, &h_tilde);
            Ok(StepTrace {
                x,
                h_prev: h_prev.clone(),
                r: Some(r),
                z: None,
                h_tilde,
                cand_rec,
                h,
                mask: None,
            })
        }
        CellKind::Miru2 => {
            let cand_rec = scale_rows_unchecked(h_prev, p.beta.as_ref().unwrap());
            let mut h_tilde = pre.candidate;
            add_recurrent(&mut h_tilde, &p.blocks.candidate.u, &cand_rec)?;
            h_tilde.map_inplace(|v| v.tanh_act());
            let h = mix_rows(p.lambda.as_ref().unwrap(), h_prev, &h_tilde);
            Ok(StepTrace {
                x,
                h_prev: h_prev.clone(),
                r: None,
                z: None,
                h_tilde,
                cand_rec,
                h,
                mask: None,
            })
        }
    }
}

/// One forward step of whichever cell `p` is.
pub fn step<T: Real>(p: &CellParams<T>, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<StepTrace<T>> {
    check_step_shapes("cell step", p, x, h_prev)?;
    let pre = project(p, x)?;
    step_projected(p, x.clone(), pre, h_prev)
}

/// `r = σ(W_r x + U_r h + b_r)`, `z = σ(W_z x + U_z h + b_z)`,
/// `h̃ = tanh(W_h x + U_h (r⊙h) + b_h)`, `h' = z⊙h + (1−z)⊙h̃`.
pub fn gru_step<T: Real>(p: &CellParams<T>, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<StepTrace<T>> {
    expect_kind("gru_step", p, CellKind::Gru)?;
    step(p, x, h_prev)
}

/// GRU with the update gate replaced by the fixed per-unit λ.
pub fn miru1_step<T: Real>(p: &CellParams<T>, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<StepTrace<T>> {
    expect_kind("miru1_step", p, CellKind::Miru1)?;
    step(p, x, h_prev)
}

/// No gates at all: `h̃ = tanh(W_h x + U_h (β⊙h) + b_h)`, `h' = λ⊙h + (1−λ)⊙h̃`.
pub fn miru2_step<T: Real>(p: &CellParams<T>, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<StepTrace<T>> {
    expect_kind("miru2_step", p, CellKind::Miru2)?;
    step(p, x, h_prev)
}

/// Gradients w.r.t. the pre-activations of each present block, plus the
/// gradient flowing into `h_prev`.
pub(crate) struct PreActGrads<T: Real> {
    pub reset: Option<Matrix<T>>,
    pub update: Option<Matrix<T>>,
    pub candidate: Matrix<T>,
    pub dh_prev: Matrix<T>,
}

impl<T: Real> PreActGrads<T> {
    pub fn get(&self, gate: Gate) -> Option<&Matrix<T>> {
        match gate {
            Gate::Reset => self.reset.as_ref(),
            Gate::Update => self.update.as_ref(),
            Gate::Candidate => Some(&self.candidate),
        }
    }
}

fn ut_times<T: Real>(u: &Matrix<T>, d: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(u.cols(), d.cols());
    gemm(T::one(), u.t(), d.view(), T::zero(), &mut out)?;
    Ok(out)
}

/// Core of the backward step, shared by [`cell_backward`] and the sequence
/// backward pass. `dh` is the gradient w.r.t. the unmasked cell output.
pub(crate) fn backward_preact<T: Real>(
    p: &CellParams<T>,
    tr: &StepTrace<T>,
    dh: &Matrix<T>,
) -> Result<PreActGrads<T>> {
    let one = T::one();
    // tanh' = 1 − h̃²
    let cand_grad = |dh_tilde: &mut Matrix<T>| {
        dh_tilde
            .data_mut()
            .iter_mut()
            .zip(tr.h_tilde.data())
            .for_each(|(d, &ht)| *d = *d * (one - ht * ht));
    };
    let sig_grad = |d: &mut Matrix<T>, s: &Matrix<T>| {
        d.data_mut()
            .iter_mut()
            .zip(s.data())
            .for_each(|(d, &s)| *d = *d * s * (one - s));
    };
    match p.kind {
        CellKind::Gru => {
            let (r, z) = (tr.r.as_ref().unwrap(), tr.z.as_ref().unwrap());
            let mut da_h = dh.clone();
            da_h.data_mut()
                .iter_mut()
                .zip(z.data())
                .for_each(|(d, &z)| *d = *d * (one - z));
            cand_grad(&mut da_h);
            let mut da_z = dh.clone();
            da_z.data_mut()
                .iter_mut()
                .zip(tr.h_prev.data().iter().zip(tr.h_tilde.data()))
                .for_each(|(d, (&hp, &ht))| *d = *d * (hp - ht));
            sig_grad(&mut da_z, z);
            let d_rh = ut_times(&p.blocks.candidate.u, &da_h)?;
            let mut da_r = hadamard_unchecked(&d_rh, &tr.h_prev);
            sig_grad(&mut da_r, r);
            // dh_prev = z⊙dh + r⊙d_rh + U_rᵀ da_r + U_zᵀ da_z
            let mut dh_prev = hadamard_unchecked(dh, z);
            dh_prev
                .data_mut()
                .iter_mut()
                .zip(d_rh.data().iter().zip(r.data()))
                .for_each(|(o, (&d, &r))| *o = *o + d * r);
            gemm(one, p.blocks.reset.as_ref().unwrap().u.t(), da_r.view(), one, &mut dh_prev)?;
            gemm(one, p.blocks.update.as_ref().unwrap().u.t(), da_z.view(), one, &mut dh_prev)?;
            Ok(PreActGrads {
                reset: Some(da_r),
                update: Some(da_z),
                candidate: da_h,
                dh_prev,
            })
        }
        CellKind::Miru1 => {
            let r = tr.r.as_ref().unwrap();
            let lambda = p.lambda.as_ref().unwrap();
            let one_minus: Vec<T> = lambda.iter().map(|&l| one - l).collect();
            let mut da_h = scale_rows_unchecked(dh, &one_minus);
            cand_grad(&mut da_h);
            let d_rh = ut_times(&p.blocks.candidate.u, &da_h)?;
            let mut da_r = hadamard_unchecked(&d_rh, &tr.h_prev);
            sig_grad(&mut da_r, r);
            let mut dh_prev = scale_rows_unchecked(dh, lambda);
            dh_prev
                .data_mut()
                .iter_mut()
                .zip(d_rh.data().iter().zip(r.data()))
                .for_each(|(o, (&d, &r))| *o = *o + d * r);
            gemm(one, p.blocks.reset.as_ref().unwrap().u.t(), da_r.view(), one, &mut dh_prev)?;
            Ok(PreActGrads {
                reset: Some(da_r),
                update: None,
                candidate: da_h,
                dh_prev,
            })
        }
        CellKind::Miru2 => {
            let lambda = p.lambda.as_ref().unwrap();
            let beta = p.beta.as_ref().unwrap();
            let one_minus: Vec<T> = lambda.iter().map(|&l| one - l).collect();
            let mut da_h = scale_rows_unchecked(dh, &one_minus);
            cand_grad(&mut da_h);
            let d_bh = ut_times(&p.blocks.candidate.u, &da_h)?;
            let mut dh_prev = scale_rows_unchecked(dh, lambda);
            let cols = dh_prev.cols();
            for (row, &b) in beta.iter().enumerate() {
                dh_prev.data_mut()[row * cols..(row + 1) * cols]
                    .iter_mut()
                    .zip(d_bh.row(row))
                    .for_each(|(o, &d)| *o = *o + b * d);
            }
            Ok(PreActGrads {
                reset: None,
                update: None,
                candidate: da_h,
                dh_prev,
            })
        }
    }
}

/// Gradients of the learned blocks. Mirrors [`Blocks`]; there is no slot for
/// λ or β.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrads<T: Real> {
    pub kind: CellKind,
    pub blocks: Blocks<T>,
}

impl<T: Real> CellGrads<T> {
    pub fn zeros(kind: CellKind, n_x: usize, n_h: usize) -> Self {
        CellGrads {
            kind,
            blocks: Blocks::zeros(kind, n_x, n_h),
        }
    }
}

/// Result of one backward step.
#[derive(Clone, Debug)]
pub struct StepGrads<T: Real> {
    pub params: CellGrads<T>,
    pub dh_prev: Matrix<T>,
    pub dx: Matrix<T>,
}

/// Recurrent input multiplied by `U_g` in the forward step.
pub(crate) fn recurrent_input<T: Real>(tr: &StepTrace<T>, gate: Gate) -> &Matrix<T> {
    match gate {
        Gate::Candidate => &tr.cand_rec,
        Gate::Reset | Gate::Update => &tr.h_prev,
    }
}

/// Exact gradients of one step given `dL/dh^t`. If the trace carries an
/// inhibition mask, `dh` is taken w.r.t. the masked output and the mask is
/// applied first.
pub fn cell_backward<T: Real>(p: &CellParams<T>, tr: &StepTrace<T>, dh: &Matrix<T>) -> Result<StepGrads<T>> {
    let trace_kind = match (&tr.r, &tr.z) {
        (Some(_), Some(_)) => CellKind::Gru,
        (Some(_), None) => CellKind::Miru1,
        (None, None) => CellKind::Miru2,
        (None, Some(_)) => {
            return Err(Error::contract("cell_backward", "trace has z but no r"));
        }
    };
    if trace_kind != p.kind {
        return Err(Error::contract(
            "cell_backward",
            format!("trace from a {trace_kind} step given to a {} cell", p.kind),
        ));
    }
    if dh.shape() != tr.h.shape() || tr.x.rows() != p.n_x || tr.h.rows() != p.n_h {
        return Err(Error::Shape {
            op: "cell_backward",
            left: tr.h.shape(),
            right: dh.shape(),
        });
    }
    let dh = match &tr.mask {
        Some(m) => hadamard_unchecked(dh, m),
        None => dh.clone(),
    };
    let pre = backward_preact(p, tr, &dh)?;
    let mut grads = CellGrads::zeros(p.kind, p.n_x, p.n_h);
    let mut dx = Matrix::zeros(p.n_x, dh.cols());
    for (gate, g) in grads.blocks.iter_mut() {
        let da = pre.get(gate).unwrap();
        gemm(T::one(), da.view(), tr.x.t(), T::zero(), &mut g.w)?;
        gemm(T::one(), da.view(), recurrent_input(tr, gate).t(), T::zero(), &mut g.u)?;
        g.b = da.row_sums();
        let w = &p.blocks.get(gate).unwrap().w;
        gemm(T::one(), w.t(), da.view(), T::one(), &mut dx)?;
    }
    Ok(StepGrads {
        params: grads,
        dh_prev: pre.dh_prev,
        dx,
    })
}
