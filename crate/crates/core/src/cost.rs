//! Analytical resource accounting: parameters, forward MACs, activation
//! counts, backward multiplications/additions and an inference energy
//! estimate built from per-operation energies.
//!
//! All counts are per hidden timestep plus one output pass unless a
//! sequence multiplier is set.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::network::ModelConfig;

/// Per-operation energies in picojoules (65 nm figures).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTable {
    pub multiplier: f64,
    pub adder: f64,
    pub accumulator: f64,
    pub mac: f64,
    pub tanh: f64,
    pub sigmoid: f64,
    pub sram_read: f64,
    pub sram_write: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        EnergyTable {
            multiplier: 0.11,
            adder: 0.013,
            accumulator: 0.235,
            mac: 0.376,
            tanh: 0.326,
            sigmoid: 0.228,
            sram_read: 5.893,
            sram_write: 6.628,
        }
    }
}

impl EnergyTable {
    pub fn zero() -> Self {
        EnergyTable {
            multiplier: 0.0,
            adder: 0.0,
            accumulator: 0.0,
            mac: 0.0,
            tanh: 0.0,
            sigmoid: 0.0,
            sram_read: 0.0,
            sram_write: 0.0,
        }
    }

    fn slot(&mut self, key: &str) -> Option<&mut f64> {
        Some(match key {
            "multiplier" => &mut self.multiplier,
            "adder" => &mut self.adder,
            "accumulator" => &mut self.accumulator,
            "mac" => &mut self.mac,
            "tanh" => &mut self.tanh,
            "sigmoid" => &mut self.sigmoid,
            "sram_read" => &mut self.sram_read,
            "sram_write" => &mut self.sram_write,
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.multiplier,
            self.adder,
            self.accumulator,
            self.mac,
            self.tanh,
            self.sigmoid,
            self.sram_read,
            self.sram_write,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("energy table entries must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `key = value` lines, `#` comments. Keys not given keep their
    /// default; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = EnergyTable::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("energy table line {}: expected key = value", no + 1)))?;
            let k = k.trim();
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("energy table line {}: bad number {:?}", no + 1, v.trim())))?;
            *t.slot(k)
                .ok_or_else(|| Error::Config(format!("energy table line {}: unknown key {k:?}", no + 1)))? = v;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasConvention {
    #[default]
    WithOutputBias,
    WithoutOutputBias,
}

impl fmt::Display for BiasConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasConvention::WithOutputBias => "with-output-bias",
            BiasConvention::WithoutOutputBias => "without-output-bias",
        })
    }
}

impl FromStr for BiasConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with-output-bias" | "bias-on" => Ok(BiasConvention::WithOutputBias),
            "without-output-bias" | "bias-off" => Ok(BiasConvention::WithoutOutputBias),
            _ => Err(Error::Config(format!("unknown bias convention {s:?}"))),
        }
    }
}

/// How backward work is counted.
///
/// `SingleStep`: one timestep's parameter-gradient work plus one output
/// pass, without propagating to `h_{t-1}`:
///
/// * output: `dW_y = dy hᵀ` (n_h·n_y mul), `dh = W_yᵀ dy` (n_h·n_y mul,
///   n_h·(n_y−1) add), `db_y = dy` (n_y add, counted as the bias update);
/// * per block: `dW = da xᵀ`, `dU = da recᵀ` (n_h·(n_x+n_h) mul);
/// * candidate: `da_h = (1−z)·dh·(1−h̃²)` (3 n_h mul, 1 n_h add for `1−h̃²`);
/// * GRU/MiRU-1 reset path: `d(r⊙h) = U_hᵀ da_h` (n_h² mul, n_h(n_h−1) add),
///   `da_r = d(r⊙h)·h·r(1−r)` (3 n_h mul, n_h add for `1−r`);
/// * GRU update path: `da_z = dh·(h−h̃)·z(1−z)` (3 n_h mul, 2 n_h add for
///   `h−h̃` and `1−z`).
///
/// `FullStep`: the same plus propagation to `h_{t-1}` (every `U_gᵀ da_g`
/// and the elementwise pass-through terms) and one accumulation add per cell
/// parameter, i.e. the steady-state cost of one BPTT step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackwardConvention {
    #[default]
    SingleStep,
    FullStep,
}

impl fmt::Display for BackwardConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackwardConvention::SingleStep => "single-step",
            BackwardConvention::FullStep => "full-step",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardCounts {
    pub macs: u64,
    pub tanh: u64,
    pub sigmoid: u64,
}

impl ForwardCounts {
    pub fn activations(&self) -> u64 {
        self.tanh + self.sigmoid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackwardCounts {
    pub mul: u64,
    pub add: u64,
}

fn dims(cfg: &ModelConfig) -> Result<(u64, u64, u64)> {
    if cfg.n_x == 0 || cfg.n_h == 0 || cfg.n_y == 0 {
        return Err(Error::contract("cost", format!("zero-size layer {}×{}×{}", cfg.n_x, cfg.n_h, cfg.n_y)));
    }
    Ok((cfg.n_x as u64, cfg.n_h as u64, cfg.n_y as u64))
}

fn blocks(kind: CellKind) -> u64 {
    kind.gates().len() as u64
}

/// Trainable parameters; λ and β are fixed and not counted.
pub fn count_parameters(cfg: &ModelConfig, convention: BiasConvention) -> Result<u64> {
    let (x, h, y) = dims(cfg)?;
    let bias = match convention {
        BiasConvention::WithOutputBias => y,
        BiasConvention::WithoutOutputBias => 0,
    };
    Ok(blocks(cfg.cell) * (h * x + h * h + h) + h * y + bias)
}

/// Bias adds count as MACs. One nonlinearity per gate/candidate unit and one
/// per output unit; the output activations are costed as sigmoids.
pub fn count_forward(cfg: &ModelConfig) -> Result<ForwardCounts> {
    let (x, h, y) = dims(cfg)?;
    let b = blocks(cfg.cell);
    Ok(ForwardCounts {
        macs: b * (h * x + h * h + h) + h * y,
        tanh: h,
        sigmoid: (b - 1) * h + y,
    })
}

/// See [`BackwardConvention`] for the terms counted.
pub fn count_backward(cfg: &ModelConfig, convention: BackwardConvention) -> Result<BackwardCounts> {
    let (x, h, y) = dims(cfg)?;
    let b = blocks(cfg.cell);
    let mut mul = 2 * h * y + b * h * (x + h) + 3 * h;
    let mut add = h * (y - 1) + y + h;
    let reset_gate = matches!(cfg.cell, CellKind::Gru | CellKind::Miru1);
    if reset_gate {
        mul += h * h + 3 * h;
        add += h * (h - 1) + h;
    }
    if cfg.cell == CellKind::Gru {
        mul += 3 * h;
        add += 2 * h;
    }
    if convention == BackwardConvention::FullStep {
        let gate_props = reset_gate as u64 + (cfg.cell == CellKind::Gru) as u64;
        match cfg.cell {
            // λ⊙dh and β⊙(U_hᵀ da_h)
            CellKind::Miru2 => {
                mul += h * h + 2 * h;
                add += h * (h - 1) + h;
            }
            // U_gᵀ da_g for the gates, then pass-through products and the sum
            _ => {
                mul += gate_props * h * h + 2 * h;
                add += gate_props * h * (h - 1) + (gate_props + 1) * h;
            }
        }
        // dh from the output plus dh from step t+1
        add += h;
        // running sums of the parameter gradients
        add += b * (h * x + h * h + h);
    }
    Ok(BackwardCounts { mul, add })
}

/// Inference energy in µJ: one SRAM read per parameter, one MAC energy per
/// MAC and one activation energy per nonlinearity.
pub fn estimate_energy(parameters: u64, fwd: &ForwardCounts, table: &EnergyTable) -> f64 {
    let pj = parameters as f64 * table.sram_read + fwd.macs as f64 * table.mac + fwd.tanh as f64 * table.tanh + fwd.sigmoid as f64 * table.sigmoid;
    pj * 1e-6
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostOptions {
    pub bias: BiasConvention,
    pub backward: BackwardConvention,
    /// Multiplies per-step work (MACs, activations, backward ops); 1 by
    /// default. Parameters and their reads are not multiplied.
    pub steps: u64,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            bias: BiasConvention::default(),
            backward: BackwardConvention::default(),
            steps: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub cell: CellKind,
    pub n_x: usize,
    pub n_h: usize,
    pub n_y: usize,
    pub bias_convention: BiasConvention,
    pub backward_convention: BackwardConvention,
    pub steps: u64,
    pub parameters: u64,
    pub macs: u64,
    pub tanh: u64,
    pub sigmoid: u64,
    pub activations: u64,
    pub backward_mul: u64,
    pub backward_add: u64,
    pub energy_uj: f64,
}

impl CostReport {
    pub fn new(cfg: &ModelConfig, opts: CostOptions, table: &EnergyTable) -> Result<Self> {
        if opts.steps == 0 {
            return Err(Error::contract("CostReport::new", "steps must be at least 1"));
        }
        let parameters = count_parameters(cfg, opts.bias)?;
        let one = count_forward(cfg)?;
        let fwd = ForwardCounts {
            macs: one.macs * opts.steps,
            tanh: one.tanh * opts.steps,
            sigmoid: one.sigmoid * opts.steps,
        };
        let bwd = count_backward(cfg, opts.backward)?;
        Ok(CostReport {
            cell: cfg.cell,
            n_x: cfg.n_x,
            n_h: cfg.n_h,
            n_y: cfg.n_y,
            bias_convention: opts.bias,
            backward_convention: opts.backward,
            steps: opts.steps,
            parameters,
            macs: fwd.macs,
            tanh: fwd.tanh,
            sigmoid: fwd.sigmoid,
            activations: fwd.activations(),
            backward_mul: bwd.mul * opts.steps,
            backward_add: bwd.add * opts.steps,
            energy_uj: estimate_energy(parameters, &fwd, table),
        })
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {}x{}x{} ({}, backward {}, steps {})", self.cell, self.n_x, self.n_h, self.n_y, self.bias_convention, self.backward_convention, self.steps)?;
        writeln!(f, "  parameters    {}", self.parameters)?;
        writeln!(f, "  forward MACs  {}", self.macs)?;
        writeln!(f, "  activations   {} ({} tanh, {} sigmoid)", self.activations, self.tanh, self.sigmoid)?;
        writeln!(f, "  backward mul  {}", self.backward_mul)?;
        writeln!(f, "  backward add  {}", self.backward_add)?;
        write!(f, "  energy        {:.4} uJ", self.energy_uj)
    }
}

/// Published figures for the 28×128×10 networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub parameters: u64,
    pub macs: u64,
    pub activations: u64,
    pub backward_mul: u64,
    pub backward_add: u64,
    pub energy_uj: f64,
}

pub fn reference(kind: CellKind) -> Reference {
    match kind {
        CellKind::Gru => Reference {
            parameters: 61_696,
            macs: 60_160,
            activations: 394,
            backward_mul: 96_768,
            backward_add: 34_816,
            energy_uj: 0.391,
        },
        CellKind::Miru1 => Reference {
            parameters: 41_472,
            macs: 41_477,
            activations: 266,
            backward_mul: 59_776,
            backward_add: 17_920,
            energy_uj: 0.263,
        },
        CellKind::Miru2 => Reference {
            parameters: 21_386,
            macs: 21_376,
            activations: 138,
            backward_mul: 23_040,
            backward_add: 1_408,
            energy_uj: 0.136,
        },
    }
}

/// Relative difference `(ours − theirs) / theirs`.
pub fn delta(ours: f64, theirs: f64) -> f64 {
    (ours - theirs) / theirs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub quantity: String,
    pub convention: String,
    pub ours: f64,
    pub reference: f64,
    pub delta: f64,
}

/// Side-by-side rows for a report at the reference size; `None` for other
/// sizes or step multipliers.
pub fn compare(report: &CostReport) -> Option<Vec<ComparisonRow>> {
    if (report.n_x, report.n_h, report.n_y, report.steps) != (28, 128, 10, 1) {
        return None;
    }
    let r = reference(report.cell);
    let row = |q: &str, conv: String, ours: f64, theirs: f64| ComparisonRow {
        quantity: q.into(),
        convention: conv,
        ours,
        reference: theirs,
        delta: delta(ours, theirs),
    };
    let bias = report.bias_convention.to_string();
    let bwd = report.backward_convention.to_string();
    Some(vec![
        row("parameters", bias.clone(), report.parameters as f64, r.parameters as f64),
        row("forward MACs", "bias-add-as-MAC + output pass".into(), report.macs as f64, r.macs as f64),
        row("activations", "gate units + outputs".into(), report.activations as f64, r.activations as f64),
        row("backward mul", bwd.clone(), report.backward_mul as f64, r.backward_mul as f64),
        row("backward add", bwd, report.backward_add as f64, r.backward_add as f64),
        row("energy (uJ)", bias, report.energy_uj, r.energy_uj),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mnist(kind: CellKind) -> ModelConfig {
        ModelConfig::mnist(kind, 128)
    }

    #[test]
    fn parameter_counts() {
        use BiasConvention::*;
        assert_eq!(count_parameters(&mnist(CellKind::Miru1), WithoutOutputBias).unwrap(), 41_472);
        assert_eq!(count_parameters(&mnist(CellKind::Miru2), WithOutputBias).unwrap(), 21_386);
        assert_eq!(count_parameters(&mnist(CellKind::Gru), WithoutOutputBias).unwrap(), 61_568);
        assert_eq!(count_parameters(&mnist(CellKind::Gru), WithOutputBias).unwrap(), 61_578);
    }

    #[test]
    fn parameter_count_matches_allocated_model() {
        use crate::cells::CoeffSpec;
        use crate::network::ModelParams;
        use crate::numerics::Rng;
        for kind in CellKind::ALL {
            let cfg = ModelConfig::new(kind, 5, 7, 3, 2);
            let p = ModelParams::<f32>::init(&cfg, CoeffSpec::Random, &mut Rng::new(0)).unwrap();
            let trainable: usize = p.tensors().iter().filter(|(n, _)| *n != "lambda" && *n != "beta").map(|(_, t)| t.len()).sum();
            assert_eq!(trainable as u64, count_parameters(&cfg, BiasConvention::WithOutputBias).unwrap(), "{kind}");
        }
    }

    #[test]
    fn forward_counts() {
        let m2 = count_forward(&mnist(CellKind::Miru2)).unwrap();
        assert_eq!(m2.macs, 19_968 + 128 + 1_280);
        assert_eq!(m2.activations(), 138);
        assert_eq!(count_forward(&mnist(CellKind::Gru)).unwrap().activations(), 394);
        assert_eq!(count_forward(&mnist(CellKind::Miru1)).unwrap().activations(), 266);
        let unit = ModelConfig::new(CellKind::Miru2, 1, 1, 1, 1);
        assert_eq!(count_forward(&unit).unwrap().macs, 4);
        let zero = ModelConfig::new(CellKind::Miru2, 1, 0, 1, 1);
        assert!(count_forward(&zero).is_err());
        assert!(count_backward(&zero, BackwardConvention::SingleStep).is_err());
    }

    /// Tallies the single-step formulas term by term from the listed
    /// operations instead of the grouped closed form.
    fn tally(kind: CellKind, x: u64, h: u64, y: u64) -> (u64, u64) {
        let outer = |rows: u64, cols: u64| rows * cols;
        let matvec = |rows: u64, cols: u64| (rows * cols, rows * (cols - 1));
        let (mut mul, mut add) = (0, 0);
        // output layer
        mul += outer(y, h);
        let (m, a) = matvec(h, y);
        mul += m;
        add += a + y;
        // candidate
        mul += outer(h, x) + outer(h, h) + 3 * h;
        add += h;
        if kind != CellKind::Miru2 {
            let (m, a) = matvec(h, h);
            mul += m + outer(h, x) + outer(h, h) + 3 * h;
            add += a + h;
        }
        if kind == CellKind::Gru {
            mul += outer(h, x) + outer(h, h) + 3 * h;
            add += 2 * h;
        }
        (mul, add)
    }

    #[test]
    fn single_step_backward_matches_tally() {
        for kind in CellKind::ALL {
            for (x, h, y) in [(28, 128, 10), (3, 5, 2), (1, 1, 1)] {
                let c = count_backward(&ModelConfig::new(kind, x, h, y, 1), BackwardConvention::SingleStep).unwrap();
                assert_eq!((c.mul, c.add), tally(kind, x as u64, h as u64, y as u64), "{kind} {x}x{h}x{y}");
            }
        }
        let m2 = count_backward(&mnist(CellKind::Miru2), BackwardConvention::SingleStep).unwrap();
        assert_eq!((m2.mul, m2.add), (22_912, 1_290));
        let g = count_backward(&mnist(CellKind::Gru), BackwardConvention::SingleStep).unwrap();
        assert_eq!((g.mul, g.add), (80_000, 17_930));
    }

    #[test]
    fn full_step_exceeds_single_step() {
        for kind in CellKind::ALL {
            let a = count_backward(&mnist(kind), BackwardConvention::SingleStep).unwrap();
            let b = count_backward(&mnist(kind), BackwardConvention::FullStep).unwrap();
            assert!(b.mul > a.mul && b.add > a.add);
        }
    }

    #[test]
    fn energy_examples() {
        let t = EnergyTable::default();
        let e = |k| CostReport::new(&mnist(k), CostOptions::default(), &t).unwrap().energy_uj;
        let want_m2 = (21_386.0 * 5.893 + 21_376.0 * 0.376 + 128.0 * 0.326 + 10.0 * 0.228) * 1e-6;
        assert!((e(CellKind::Miru2) - want_m2).abs() < 1e-12);
        assert!((e(CellKind::Miru2) - 0.1341).abs() < 1e-4);
        assert!((e(CellKind::Gru) - 0.3861).abs() < 1e-4);
        let r = e(CellKind::Gru) / e(CellKind::Miru2);
        assert!((2.7..=3.0).contains(&r), "{r}");
        let z = CostReport::new(&mnist(CellKind::Gru), CostOptions::default(), &EnergyTable::zero()).unwrap();
        assert_eq!(z.energy_uj, 0.0);
    }

    #[test]
    fn parameter_ratio() {
        let p = |k| count_parameters(&mnist(k), BiasConvention::WithOutputBias).unwrap() as f64;
        let r = p(CellKind::Gru) / p(CellKind::Miru2);
        assert!((2.8..=3.0).contains(&r), "{r}");
    }

    #[test]
    fn step_multiplier_scales_work_only() {
        let t = EnergyTable::default();
        let cfg = mnist(CellKind::Miru2);
        let one = CostReport::new(&cfg, CostOptions::default(), &t).unwrap();
        let opts = CostOptions { steps: 28, ..Default::default() };
        let seq = CostReport::new(&cfg, opts, &t).unwrap();
        assert_eq!(seq.parameters, one.parameters);
        assert_eq!(seq.macs, 28 * one.macs);
        assert_eq!(seq.backward_add, 28 * one.backward_add);
        assert!(compare(&seq).is_none());
        assert_eq!(compare(&one).unwrap().len(), 6);
        assert!(CostReport::new(&cfg, CostOptions { steps: 0, ..Default::default() }, &t).is_err());
    }

    #[test]
    fn energy_table_file() {
        let t = EnergyTable::parse("# custom\nmac = 1.0\n\nsram_read=2 # comment\n").unwrap();
        assert_eq!(t.mac, 1.0);
        assert_eq!(t.sram_read, 2.0);
        assert_eq!(t.tanh, 0.326);
        assert!(EnergyTable::parse("bogus = 1").is_err());
        assert!(EnergyTable::parse("mac 1").is_err());
        assert!(EnergyTable::parse("mac = -1").is_err());
        assert!(EnergyTable::parse("mac = x").is_err());
    }

    #[test]
    fn report_serializes() {
        let r = CostReport::new(&mnist(CellKind::Gru), CostOptions::default(), &EnergyTable::default()).unwrap();
        let back: CostReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_string().contains("61578"));
    }

    proptest! {
        #[test]
        fn monotone_in_every_dimension(kind in 0usize..3, x in 1usize..40, h in 1usize..40, y in 1usize..15, which in 0usize..3) {
            let kind = CellKind::ALL[kind];
            let t = EnergyTable::default();
            let base = ModelConfig::new(kind, x, h, y, 1);
            let mut big = base.clone();
            match which {
                0 => big.n_x += 1,
                1 => big.n_h += 1,
                _ => big.n_y += 1,
            }
            let a = CostReport::new(&base, CostOptions::default(), &t).unwrap();
            let b = CostReport::new(&big, CostOptions::default(), &t).unwrap();
            prop_assert!(b.parameters > a.parameters);
            prop_assert!(b.macs > a.macs);
            prop_assert!(b.energy_uj > a.energy_uj);
        }
    }
}
