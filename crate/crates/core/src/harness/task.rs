//! Synthetic witness-detection MIL task.
//!
//! A bag is positive iff one of its instances lies within `epsilon` of a fixed
//! witness vector. Background instances are standard normal. Negative bags
//! carry `decoys` scaled-down copies of the witness that sum to it, so the
//! first moment of every bag is the same in expectation for both classes and
//! mean pooling alone cannot separate them.

use crate::error::{Error, Result};
use crate::mivpg::{Bag, Scenario};
use crate::rng::Rng;
use crate::tensor::Tensor;

const BALANCE_RANGE: (f64, f64) = (0.4, 0.6);
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub scenario: Scenario,
    pub instance_dim: usize,
    pub num_bags: usize,
    /// Image count range (scenarios 2 and 3).
    pub images: (usize, usize),
    /// Patches per image (scenario 3) or instances per bag (scenario 1).
    pub patches: (usize, usize),
    pub epsilon: f64,
    pub witness_norm: f64,
    /// Witness fragments planted in each negative bag; 0 disables them.
    pub decoys: usize,
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// 1000 bags of 2..=8 images with 4..=16 patches of width 32.
    pub fn standard(scenario: Scenario, seed: u64) -> Self {
        SyntheticTaskSpec {
            scenario,
            instance_dim: 32,
            num_bags: 1000,
            images: (2, 8),
            patches: (4, 16),
            epsilon: 1.0,
            witness_norm: 10.0,
            decoys: 3,
            label_noise: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.instance_dim == 0 || self.num_bags == 0 {
            return bad("instance_dim and num_bags must be positive");
        }
        for (name, (lo, hi)) in [("images", self.images), ("patches", self.patches)] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("invalid {name} range {lo}..={hi}")));
            }
        }
        if self.decoys == 1 {
            return bad("a single decoy equals the witness; use 0 or at least 2");
        }
        if !(self.epsilon >= 0.0 && self.witness_norm > 0.0) {
            return bad("epsilon must be non-negative and witness_norm positive");
        }
        let decoy_gap = self.witness_norm * (1.0 - 1.0 / self.decoys.max(1) as f64);
        if self.decoys > 0 && self.epsilon >= decoy_gap {
            return bad("epsilon is large enough to admit decoys as witnesses");
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 0.5]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub bag: Bag,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub witness: Vec<f64>,
    pub epsilon: f64,
    pub examples: Vec<Example>,
}

pub struct Split<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub test: &'a [Example],
}

impl Dataset {
    /// Contiguous 70/10/20 split in generation order.
    pub fn split(&self) -> Split<'_> {
        let n = self.examples.len();
        let train = (n as f64 * 0.7).round() as usize;
        let val = ((n as f64 * 0.1).round() as usize).min(n - train);
        Split {
            train: &self.examples[..train],
            val: &self.examples[train..train + val],
            test: &self.examples[train + val..],
        }
    }

    pub fn positive_fraction(&self) -> f64 {
        let pos = self.examples.iter().filter(|e| e.label).count();
        pos as f64 / self.examples.len() as f64
    }
}

/// Membership test: does any instance lie within `epsilon` of the witness?
pub fn oracle_label(bag: &Bag, witness: &[f64], epsilon: f64) -> bool {
    bag.groups().iter().any(|g| {
        (0..g.rows()).any(|i| {
            let d2: f64 = g.row(i).iter().zip(witness).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() <= epsilon
        })
    })
}

pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut root = Rng::new(spec.seed);
    let mut witness_rng = root.fork(1);
    let mut label_rng = root.fork(2);
    let mut bag_rng = root.fork(3);

    let witness = random_direction(spec.instance_dim, &mut witness_rng)
        .into_iter()
        .map(|v| v * spec.witness_norm)
        .collect::<Vec<_>>();

    let (truth, observed) = draw_labels(spec, &mut label_rng)?;
    let mut examples = Vec::with_capacity(spec.num_bags);
    for (&positive, &label) in truth.iter().zip(&observed) {
        let bag = (0..MAX_ATTEMPTS)
            .map(|_| sample_bag(spec, &witness, positive, &mut bag_rng))
            .find(|bag| match bag {
                Ok(b) => oracle_label(b, &witness, spec.epsilon) == positive,
                Err(_) => true,
            })
            .ok_or_else(|| {
                Error::Generation("background instances keep landing near the witness".into())
            })??;
        examples.push(Example { bag, label });
    }
    Ok(Dataset {
        witness,
        epsilon: spec.epsilon,
        examples,
    })
}

fn draw_labels(spec: &SyntheticTaskSpec, rng: &mut Rng) -> Result<(Vec<bool>, Vec<bool>)> {
    for _ in 0..MAX_ATTEMPTS {
        let truth: Vec<bool> = (0..spec.num_bags).map(|_| rng.bernoulli(0.5)).collect();
        let observed: Vec<bool> = truth
            .iter()
            .map(|&t| t ^ rng.bernoulli(spec.label_noise))
            .collect();
        let frac = observed.iter().filter(|&&l| l).count() as f64 / spec.num_bags as f64;
        if (BALANCE_RANGE.0..=BALANCE_RANGE.1).contains(&frac) {
            return Ok((truth, observed));
        }
    }
    Err(Error::Generation(format!(
        "no label draw of {} bags within the {:?} balance range",
        spec.num_bags, BALANCE_RANGE
    )))
}

fn random_direction(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_bag(spec: &SyntheticTaskSpec, witness: &[f64], positive: bool, rng: &mut Rng) -> Result<Bag> {
    let d = spec.instance_dim;
    let sizes: Vec<usize> = match spec.scenario {
        Scenario::Flat => vec![rng.range_inclusive(spec.patches.0, spec.patches.1)],
        Scenario::Images => vec![1; rng.range_inclusive(spec.images.0, spec.images.1)],
        Scenario::ImagesWithPatches => {
            let n = rng.range_inclusive(spec.images.0, spec.images.1);
            (0..n)
                .map(|_| rng.range_inclusive(spec.patches.0, spec.patches.1))
                .collect()
        }
    };
    let mut images: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&p| (0..p * d).map(|_| rng.normal()).collect())
        .collect();

    // Flat index over every instance of the bag, as (image, row).
    let slots: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &p)| (0..p).map(move |r| (i, r)))
        .collect();
    let mut put = |slot: (usize, usize), row: &[f64]| {
        images[slot.0][slot.1 * d..(slot.1 + 1) * d].copy_from_slice(row);
    };

    if positive {
        let slot = slots[rng.below(slots.len())];
        let mut row = witness.to_vec();
        if spec.epsilon > 0.0 {
            let dir = random_direction(d, rng);
            for (r, u) in row.iter_mut().zip(dir) {
                *r += 0.5 * spec.epsilon * u;
            }
        }
        put(slot, &row);
    } else if spec.decoys > 0 {
        let k = spec.decoys.min(slots.len());
        let mut order: Vec<usize> = (0..slots.len()).collect();
        rng.shuffle(&mut order);
        let fragment: Vec<f64> = witness.iter().map(|w| w / spec.decoys as f64).collect();
        for &idx in &order[..k] {
            put(slots[idx], &fragment);
        }
    }

    let tensors = images
        .into_iter()
        .zip(&sizes)
        .map(|(data, &p)| Tensor::matrix(p, d, data))
        .collect::<Result<Vec<_>>>()?;
    match spec.scenario {
        Scenario::Flat => Bag::flat(tensors.into_iter().next().expect("one image")),
        _ => Bag::hierarchical(tensors),
    }
}
