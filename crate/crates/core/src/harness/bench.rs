//! Wall-clock and MAC-count scaling of the bag-correlation mechanisms.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::graph::Eval;
use crate::macs::{self, MacCount};
use crate::mivpg::{csa_update, full_self_attention, low_rank_self_attention, LowRankParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    FullSa,
    LowRankSa,
    Csa,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::FullSa, Mechanism::LowRankSa, Mechanism::Csa];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::FullSa => "full_sa",
            Mechanism::LowRankSa => "low_rank_sa",
            Mechanism::Csa => "csa",
        }
    }

    /// Closed-form MAC count for a bag of `m` rows of width `d` with `r`
    /// queries (or probe rows).
    pub fn expected_macs(self, m: u64, r: u64, d: u64) -> MacCount {
        match self {
            Mechanism::FullSa => MacCount {
                projection: 4 * m * d * d,
                correlation: 2 * m * m * d,
            },
            Mechanism::LowRankSa => MacCount {
                projection: 4 * (m + r) * d * d,
                correlation: 4 * m * r * d,
            },
            Mechanism::Csa => MacCount {
                projection: 2 * (m + r) * d * d,
                correlation: 2 * m * r * d,
            },
        }
    }

    /// Rough peak working set in bytes: inputs plus the two largest
    /// per-head score buffers alive at once.
    pub fn peak_bytes(self, m: u64, r: u64, d: u64) -> u64 {
        let scores = match self {
            Mechanism::FullSa => m * m,
            Mechanism::LowRankSa | Mechanism::Csa => m * r,
        };
        8 * (2 * scores + 6 * (m + r) * d)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mechanism `{s}`; use full_sa, low_rank_sa or csa")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub dim: usize,
    pub heads: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Rows whose estimated working set exceeds this are recorded as capped.
    pub memory_cap_bytes: u64,
    /// Count MACs only; skip the timed repeats.
    pub macs_only: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            dim: 64,
            heads: 4,
            repeats: MIN_REPEATS,
            seed: 0,
            memory_cap_bytes: 3 << 30,
            macs_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub m: usize,
    /// Median over the timed repeats; `None` in MAC-only mode or when capped.
    pub median_seconds: Option<f64>,
    /// Counted MACs; `None` when capped.
    pub macs: Option<MacCount>,
}

impl BenchRow {
    pub fn capped(&self) -> bool {
        self.macs.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub mechanism: Mechanism,
    pub r: usize,
    pub dim: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log time on log M over timed rows.
    pub slope: Option<f64>,
}

impl BenchResult {
    pub fn row(&self, m: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.m == m)
    }

    /// Correlation-MAC ratio between each pair of consecutive counted rows.
    pub fn correlation_ratios(&self) -> Vec<f64> {
        let counted: Vec<u64> = self.rows.iter().filter_map(|r| r.macs.map(|c| c.correlation)).collect();
        counted.windows(2).map(|w| w[1] as f64 / w[0] as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("mechanism,m,r,d,median_seconds,projection_macs,correlation_macs,status\n");
        for row in &self.rows {
            let time = row.median_seconds.map(|t| format!("{t:.6e}")).unwrap_or_else(|| "-".into());
            let (proj, corr) = match row.macs {
                Some(c) => (c.projection.to_string(), c.correlation.to_string()),
                None => ("-".into(), "-".into()),
            };
            let status = if row.capped() { "capped" } else { "ok" };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                self.mechanism, row.m, self.r, self.dim, time, proj, corr, status
            )
            .unwrap();
        }
        out
    }
}

/// Least-squares slope of `y` on `x`; `None` for fewer than two distinct `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn bench_complexity(
    mechanism: Mechanism,
    m_list: &[usize],
    r: usize,
    options: &BenchOptions,
) -> Result<BenchResult> {
    if m_list.is_empty() || m_list.contains(&0) || m_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("M list must be non-empty, positive and strictly ascending".into()));
    }
    if options.repeats < MIN_REPEATS {
        return Err(Error::Config(format!("repeats must be at least {MIN_REPEATS}")));
    }
    if r == 0 {
        return Err(Error::Config("r must be at least 1".into()));
    }
    let d = options.dim;
    let mut rng = Rng::new(options.seed);
    let attn = AttentionParams::new(d, options.heads, &mut rng)?;
    let low_rank = LowRankParams::new(d, options.heads, &mut rng)?;
    let queries = Tensor::randn(&[r, d], 1.0, &mut rng);

    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        if mechanism.peak_bytes(m as u64, r as u64, d as u64) > options.memory_cap_bytes {
            rows.push(BenchRow {
                m,
                median_seconds: None,
                macs: None,
            });
            continue;
        }
        let bag = Tensor::randn(&[m, d], 1.0, &mut rng.fork(m as u64));
        let run = || -> Result<Tensor> {
            match mechanism {
                Mechanism::FullSa => full_self_attention(&mut Eval, &bag, &attn),
                Mechanism::LowRankSa => low_rank_self_attention(&mut Eval, &bag, &queries, &low_rank),
                Mechanism::Csa => csa_update(&mut Eval, &bag, &queries, &attn),
            }
        };
        let (out, count) = macs::measure(run);
        out?;
        let median_seconds = if options.macs_only {
            None
        } else {
            let mut times = Vec::with_capacity(options.repeats);
            for _ in 0..options.repeats {
                let start = Instant::now();
                std::hint::black_box(run()?);
                times.push(start.elapsed().as_secs_f64());
            }
            Some(median(times))
        };
        rows.push(BenchRow {
            m,
            median_seconds,
            macs: Some(count),
        });
    }

    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|row| row.median_seconds.map(|t| ((row.m as f64).ln(), t.ln())))
        .collect();
    Ok(BenchResult {
        mechanism,
        r,
        dim: d,
        rows,
        slope: fit_slope(&points),
    })
}
