//! Permutation-invariance and positional-sensitivity checks over a grid of
//! model configurations.

use std::fmt::Write as _;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::Eval;
use crate::mivpg::{csa_update, embed_bag, mivpg_forward, Bag, MivpgConfig, MivpgParams, Scenario};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Bags with at most this many rows are checked under every permutation.
pub const EXHAUSTIVE_LIMIT: usize = 5;
pub const RANDOM_TRIALS: usize = 100;
pub const INVARIANCE_TOL: f64 = 1e-9;
pub const SENSITIVITY_TOL: f64 = 1e-6;
/// Positional sensitivity is "detected" when at least this many of
/// [`RANDOM_TRIALS`] nontrivial permutations move the output.
pub const SENSITIVITY_MIN_CHANGED: usize = 99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub scenario: Scenario,
    pub use_csa: bool,
    pub use_ppeg: bool,
}

/// CSA on/off x PPEG on/off x scenarios 1-3.
pub fn default_grid() -> Vec<GridCell> {
    let mut grid = Vec::new();
    for scenario in [Scenario::Flat, Scenario::Images, Scenario::ImagesWithPatches] {
        for use_csa in [false, true] {
            for use_ppeg in [false, true] {
                grid.push(GridCell {
                    scenario,
                    use_csa,
                    use_ppeg,
                });
            }
        }
    }
    grid
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CellSpec {
    scenario: u8,
    use_csa: bool,
    use_ppeg: bool,
}

/// Parses a JSON array of `{"scenario", "use_csa", "use_ppeg"}` objects.
pub fn parse_grid(text: &str) -> Result<Vec<GridCell>> {
    let cells: Vec<CellSpec> =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))?;
    if cells.is_empty() {
        return Err(Error::Config("grid is empty".into()));
    }
    cells
        .into_iter()
        .map(|c| {
            Ok(GridCell {
                scenario: Scenario::from_number(c.scenario)?,
                use_csa: c.use_csa,
                use_ppeg: c.use_ppeg,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invariant {
    /// Reordering the rows the blocks see (flat instances or images).
    InstancePermutation,
    /// Reordering patches inside an image.
    PatchPermutation,
    CsaEquivariance,
    PositionalSensitivity,
}

impl Invariant {
    pub const ALL: [Invariant; 4] = [
        Invariant::InstancePermutation,
        Invariant::PatchPermutation,
        Invariant::CsaEquivariance,
        Invariant::PositionalSensitivity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Invariant::InstancePermutation => "instance_permutation",
            Invariant::PatchPermutation => "patch_permutation",
            Invariant::CsaEquivariance => "csa_equivariance",
            Invariant::PositionalSensitivity => "positional_sensitivity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub cell: GridCell,
    pub invariant: Invariant,
    pub expected: &'static str,
    pub observed: &'static str,
    pub max_abs_diff: Option<f64>,
    pub trials: usize,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.status != Status::Fail)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status == Status::Fail).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("scenario,use_csa,use_ppeg,invariant,expected,observed,max_abs_diff,trials,status\n");
        for r in &self.rows {
            let diff = r.max_abs_diff.map(|d| format!("{d:.3e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.cell.scenario.number(),
                r.cell.use_csa,
                r.cell.use_ppeg,
                r.invariant.name(),
                r.expected,
                r.observed,
                diff,
                r.trials,
                r.status.name()
            )
            .unwrap();
        }
        out
    }
}

/// Model used for every grid cell.
pub fn suite_config(cell: GridCell) -> MivpgConfig {
    MivpgConfig {
        num_blocks: 2,
        num_queries: 4,
        model_dim: 8,
        heads: 2,
        cross_attn_every: 1,
        use_csa: cell.use_csa,
        use_ppeg: cell.use_ppeg,
        ffn_hidden: Some(16),
        instance_dim: Some(6),
        abmil_hidden: 5,
        ..MivpgConfig::desk()
    }
}

/// Every permutation of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
    out
}

/// All permutations for small `n`, otherwise `trials` random ones.
pub fn permutations_for(n: usize, trials: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    if n <= EXHAUSTIVE_LIMIT {
        all_permutations(n)
    } else {
        (0..trials).map(|_| rng.permutation(n)).collect()
    }
}

/// Random bag of the cell's scenario with five block-level rows.
pub fn suite_bag(scenario: Scenario, instance_dim: usize, rng: &mut Rng) -> Result<Bag> {
    let mut t = |rows: usize| Tensor::randn(&[rows, instance_dim], 1.0, rng);
    match scenario {
        Scenario::Flat => Bag::flat(t(5)),
        Scenario::Images => Bag::hierarchical((0..5).map(|_| t(1)).collect()),
        Scenario::ImagesWithPatches => Bag::hierarchical([3, 5, 2, 4, 3].iter().map(|&p| t(p)).collect()),
    }
}

fn queries(bag: &Bag, config: &MivpgConfig, params: &MivpgParams<Tensor>) -> Result<Tensor> {
    Ok(mivpg_forward(&mut Eval, bag, config, params)?.queries)
}

/// Output change under each of `perms`, applied to the block-level rows.
pub fn instance_permutation_diff(
    bag: &Bag,
    config: &MivpgConfig,
    params: &MivpgParams<Tensor>,
    perms: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let base = queries(bag, config, params)?;
    perms
        .iter()
        .map(|p| Ok(queries(&bag.permute_instances(p)?, config, params)?.max_abs_diff(&base)))
        .collect()
}

pub fn run_invariant_suite(grid: &[GridCell], seed: u64) -> Result<SuiteReport> {
    let mut root = Rng::new(seed);
    let mut rows = Vec::with_capacity(grid.len() * Invariant::ALL.len());
    for (i, &cell) in grid.iter().enumerate() {
        let mut rng = root.fork(i as u64);
        let config = suite_config(cell);
        let params = MivpgParams::new(&config, &mut rng)?;
        let bag = suite_bag(cell.scenario, config.instance_dim(), &mut rng)?;
        for inv in Invariant::ALL {
            rows.push(check(cell, inv, &bag, &config, &params, &mut rng)?);
        }
    }
    Ok(SuiteReport { rows })
}

fn row(cell: GridCell, invariant: Invariant, expected: &'static str) -> SuiteRow {
    SuiteRow {
        cell,
        invariant,
        expected,
        observed: "skipped",
        max_abs_diff: None,
        trials: 0,
        status: Status::Skipped,
    }
}

fn max_of(diffs: &[f64]) -> f64 {
    diffs.iter().cloned().fold(0.0, f64::max)
}

fn check(
    cell: GridCell,
    invariant: Invariant,
    bag: &Bag,
    config: &MivpgConfig,
    params: &MivpgParams<Tensor>,
    rng: &mut Rng,
) -> Result<SuiteRow> {
    let rows_seen = match bag {
        Bag::Flat(t) => t.rows(),
        Bag::Hierarchical(imgs) => imgs.len(),
    };
    let judge = |mut r: SuiteRow, diffs: &[f64], ok: bool, good: &'static str, bad: &'static str| {
        r.max_abs_diff = Some(max_of(diffs));
        r.trials = diffs.len();
        r.observed = if ok { good } else { bad };
        r.status = if r.observed == r.expected { Status::Pass } else { Status::Fail };
        r
    };
    Ok(match invariant {
        Invariant::InstancePermutation => {
            let r = row(cell, invariant, "invariant");
            if cell.use_ppeg {
                // Positional encoding is order-dependent by design.
                return Ok(SuiteRow { expected: "skipped", ..r });
            }
            let perms = permutations_for(rows_seen, RANDOM_TRIALS, rng);
            let diffs = instance_permutation_diff(bag, config, params, &perms)?;
            let ok = max_of(&diffs) < INVARIANCE_TOL;
            judge(r, &diffs, ok, "invariant", "violated")
        }
        Invariant::PatchPermutation => {
            let r = row(cell, invariant, "invariant");
            if cell.scenario != Scenario::ImagesWithPatches {
                return Ok(SuiteRow { expected: "skipped", ..r });
            }
            let base = queries(bag, config, params)?;
            let mut diffs = Vec::new();
            for (image, img) in bag.groups().iter().enumerate() {
                for p in permutations_for(img.rows(), RANDOM_TRIALS, rng) {
                    let q = queries(&bag.permute_patches(image, &p)?, config, params)?;
                    diffs.push(q.max_abs_diff(&base));
                }
            }
            let ok = max_of(&diffs) < INVARIANCE_TOL;
            judge(r, &diffs, ok, "invariant", "violated")
        }
        Invariant::CsaEquivariance => {
            let r = row(cell, invariant, "equivariant");
            let Some(csa) = params.blocks[0].csa.as_ref().filter(|_| cell.use_csa) else {
                return Ok(SuiteRow { expected: "skipped", ..r });
            };
            let (instances, _) = embed_bag(&mut Eval, bag, config, params)?;
            let base = csa_update(&mut Eval, &instances, &params.queries, csa)?;
            let mut diffs = Vec::new();
            for p in permutations_for(instances.rows(), RANDOM_TRIALS, rng) {
                let shuffled = instances.gather_rows(&p)?;
                let out = csa_update(&mut Eval, &shuffled, &params.queries, csa)?;
                diffs.push(out.max_abs_diff(&base.gather_rows(&p)?));
            }
            let ok = max_of(&diffs) < INVARIANCE_TOL;
            judge(r, &diffs, ok, "equivariant", "violated")
        }
        Invariant::PositionalSensitivity => {
            let expected = if cell.use_ppeg { "detected" } else { "none" };
            let r = row(cell, invariant, expected);
            let perms: Vec<Vec<usize>> = (0..RANDOM_TRIALS)
                .map(|_| rng.nontrivial_permutation(rows_seen))
                .collect();
            let diffs = instance_permutation_diff(bag, config, params, &perms)?;
            let changed = diffs.iter().filter(|&&d| d > SENSITIVITY_TOL).count();
            let observed = if changed >= SENSITIVITY_MIN_CHANGED {
                "detected"
            } else if max_of(&diffs) < INVARIANCE_TOL {
                "none"
            } else {
                "partial"
            };
            judge(r, &diffs, true, observed, observed)
        }
    })
}
