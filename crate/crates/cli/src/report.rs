//! Data-free commands: gradcheck and resources.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use clap::Args;
use miru::cells::CellKind;
use miru::cost::{compare, BackwardConvention, BiasConvention, CostOptions, CostReport, EnergyTable};
use miru::gradcheck::{gradcheck as run_check, Corruption, GradcheckSpec, DEFAULT_EPS, DEFAULT_TOL};
use miru::network::ModelConfig;

use crate::{CmdResult, Failure};

fn parse_cells(list: &str) -> Result<Vec<CellKind>, Failure> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| CellKind::from_str(s).map_err(|e| Failure::Config(e.to_string())))
        .collect()
}

/// `NXxNHxNY`, e.g. `28x128x10`.
fn parse_size(s: &str) -> Result<(usize, usize, usize), Failure> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Config(format!("size {s:?} is not NXxNHxNY")))?;
    match parts[..] {
        [x, h, y] => Ok((x, h, y)),
        _ => Err(Failure::Config(format!("size {s:?} is not NXxNHxNY"))),
    }
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Comma-separated cell kinds.
    #[arg(long, default_value = "gru,miru1,miru2")]
    cells: String,
    /// Seeds 0..N per cell.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value = "5x7x3")]
    size: String,
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Check with k-WTA inhibition at this sparsity (masks held fixed).
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Negative control: add DELTA to analytic gradient TENSOR[INDEX].
    #[arg(long, value_name = "TENSOR:INDEX:DELTA")]
    corrupt: Option<String>,
    /// Print the full reports as JSON.
    #[arg(long)]
    json: bool,
}

fn parse_corruption(s: &str) -> Result<Corruption, Failure> {
    let bad = || Failure::Config(format!("--corrupt {s:?} is not TENSOR:INDEX:DELTA"));
    let mut it = s.rsplitn(3, ':');
    let delta = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let index = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let tensor = it.next().ok_or_else(bad)?.to_string();
    Ok(Corruption { tensor, index, delta })
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let cells = parse_cells(&a.cells)?;
    let (n_x, n_h, n_y) = parse_size(&a.size)?;
    let corrupt = a.corrupt.as_deref().map(parse_corruption).transpose()?;
    let t0 = Instant::now();
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for &cell in &cells {
        for seed in 0..a.seeds {
            let mut spec = GradcheckSpec::new(cell, n_x, n_h, n_y, a.steps, a.batch, seed);
            spec.model.sparsity = a.sparsity;
            spec.eps = a.eps;
            spec.tol = a.tol;
            let r = run_check(&spec, corrupt.as_ref())?;
            let worst = r.tensors.iter().max_by(|x, y| x.max_rel_err.total_cmp(&y.max_rel_err));
            println!(
                "{:<6} seed {seed}  max rel err {:.3e}  ({})  {}",
                cell.to_string(),
                r.max_rel_err,
                worst.map_or("-", |t| t.name.as_str()),
                if r.passed { "ok" } else { "FAIL" }
            );
            for t in r.failing() {
                println!(
                    "    {}[{}]: analytic {:.9e} numeric {:.9e} rel err {:.3e}",
                    t.name, t.worst_index, t.analytic, t.numeric, t.max_rel_err
                );
                failed.push(format!("{cell} seed {seed} {}", t.name));
            }
            reports.push(r);
        }
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports).expect("serializable"));
    }
    println!("{} checks in {:.2}s", reports.len(), t0.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Failed(format!("gradient check failed: {}", failed.join(", "))))
    }
}

#[derive(Args, Debug)]
pub struct ResourcesArgs {
    /// Comma-separated cell kinds; empty for none.
    #[arg(long, default_value = "gru,miru1,miru2")]
    cells: String,
    #[arg(long, default_value = "28x128x10")]
    size: String,
    /// with-output-bias | without-output-bias
    #[arg(long, default_value = "with-output-bias")]
    bias: String,
    /// single-step | full-step
    #[arg(long, default_value = "single-step")]
    backward: String,
    /// Multiply per-step work by this many timesteps.
    #[arg(long, default_value_t = 1)]
    steps: u64,
    /// Per-operation energies (`key = value` lines, picojoules).
    #[arg(long)]
    energy_table: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

pub fn resources(a: &ResourcesArgs) -> CmdResult {
    let cells = parse_cells(&a.cells)?;
    let (n_x, n_h, n_y) = parse_size(&a.size)?;
    let bias = BiasConvention::from_str(&a.bias)?;
    let backward = match a.backward.as_str() {
        "single-step" => BackwardConvention::SingleStep,
        "full-step" => BackwardConvention::FullStep,
        other => return Err(Failure::Config(format!("unknown backward convention {other:?}"))),
    };
    let table = match &a.energy_table {
        Some(p) => EnergyTable::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => EnergyTable::default(),
    };
    let opts = CostOptions { bias, backward, steps: a.steps };
    let reports = cells
        .iter()
        .map(|&c| CostReport::new(&ModelConfig::new(c, n_x, n_h, n_y, 1), opts, &table))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Config(e.to_string()))?;
    if a.json {
        let rows: Vec<_> = reports
            .iter()
            .map(|r| serde_json::json!({ "report": r, "reference": compare(r) }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&rows).expect("serializable"));
        return Ok(());
    }
    for r in &reports {
        println!("{r}");
        if let Some(rows) = compare(r) {
            println!("  {:<14} {:>12} {:>12} {:>9}  convention", "vs published", "ours", "published", "delta");
            for row in rows {
                println!(
                    "  {:<14} {:>12} {:>12} {:>+8.2}%  {}",
                    row.quantity,
                    fmt_num(row.ours),
                    fmt_num(row.reference),
                    100.0 * row.delta,
                    row.convention
                );
            }
        }
        println!();
    }
    if let (Some(g), Some(m)) = (
        reports.iter().find(|r| r.cell == CellKind::Gru),
        reports.iter().find(|r| r.cell == CellKind::Miru2),
    ) {
        println!(
            "GRU / MiRU-2: parameters {:.3}x, MACs {:.3}x, energy {:.3}x",
            g.parameters as f64 / m.parameters as f64,
            g.macs as f64 / m.macs as f64,
            g.energy_uj / m.energy_uj
        );
    }
    Ok(())
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}
