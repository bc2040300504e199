//! Binary differential evolution over fixed-length bit masks.
//!
//! The engine minimises a caller-supplied fitness. Each generation builds one
//! trial per population member from three distinct donors (difference vector,
//! mutation, crossover) and keeps the trial only when its fitness is strictly
//! lower than the incumbent's. Fitness values are memoised per mask, so the
//! fitness function must be deterministic.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeError {
    #[error("masks differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("dimensionality must be at least 1")]
    EmptyDimension,
    #[error("population size {0} is below the minimum of 4")]
    PopulationTooSmall(usize),
    #[error("initial population has {got} masks, configured size is {expected}")]
    PopulationSize { expected: usize, got: usize },
    #[error("generations must be at least 1")]
    NoGenerations,
    #[error("crossover rate {0} outside (0, 1]")]
    CrossoverRate(f64),
    #[error("invalid mask character {0:?}")]
    InvalidMaskChar(char),
    #[error("fitness returned a non-finite value for mask {0}")]
    NonFiniteFitness(String),
}

/// A feature subset: bit `d` selects feature column `d`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask(Vec<bool>);

impl BitMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn none_set(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }

    /// Indices of set bits, ascending.
    pub fn selected(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

impl fmt::Display for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitMask({self})")
    }
}

impl FromStr for BitMask {
    type Err = DeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(DeError::InvalidMaskChar(other)),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(BitMask)
    }
}

fn check_len(a: &BitMask, b: &BitMask) -> Result<(), DeError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(DeError::LengthMismatch(a.len(), b.len()))
    }
}

/// Zero where `a` and `b` agree, `a`'s bit where they differ.
pub fn difference_vector(a: &BitMask, b: &BitMask) -> Result<BitMask, DeError> {
    check_len(a, b)?;
    Ok(BitMask(
        a.0.iter()
            .zip(&b.0)
            .map(|(&x, &y)| if x == y { false } else { x })
            .collect(),
    ))
}

/// One where the difference vector is set, the donor's bit elsewhere.
pub fn mutate(diff: &BitMask, donor: &BitMask) -> Result<BitMask, DeError> {
    check_len(diff, donor)?;
    Ok(BitMask(
        diff.0.iter().zip(&donor.0).map(|(&d, &p)| d || p).collect(),
    ))
}

/// Builds the trial vector: each bit comes from `mutant` when a fresh uniform
/// draw is `<= cr`, or at one forced random position; otherwise from `current`.
///
/// Always consumes one index draw plus one uniform draw per bit, independent of
/// `cr`.
pub fn crossover<R: Rng + ?Sized>(
    mutant: &BitMask,
    current: &BitMask,
    cr: f64,
    rng: &mut R,
) -> Result<BitMask, DeError> {
    check_len(mutant, current)?;
    if !(cr > 0.0 && cr <= 1.0) {
        return Err(DeError::CrossoverRate(cr));
    }
    if mutant.is_empty() {
        return Ok(BitMask::zeros(0));
    }
    let forced = rng.random_range(0..mutant.len());
    Ok(BitMask(
        (0..mutant.len())
            .map(|d| {
                let gamma: f64 = rng.random();
                if gamma <= cr || d == forced {
                    mutant.0[d]
                } else {
                    current.0[d]
                }
            })
            .collect(),
    ))
}

/// Strict-improvement rule: the trial survives only if it is better.
pub fn trial_wins(current_fitness: f64, trial_fitness: f64) -> bool {
    trial_fitness < current_fitness
}

/// A mask together with its fitness.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub mask: BitMask,
    pub fitness: f64,
}

/// Evaluates `trial` and returns the survivor plus the number of fitness
/// evaluations used (always one).
pub fn select<F, E>(current: &Member, trial: BitMask, mut fitness: F) -> Result<(Member, usize), E>
where
    F: FnMut(&BitMask) -> Result<f64, E>,
{
    let trial_fitness = fitness(&trial)?;
    if trial_wins(current.fitness, trial_fitness) {
        Ok((
            Member {
                mask: trial,
                fitness: trial_fitness,
            },
            1,
        ))
    } else {
        Ok((current.clone(), 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeConfig {
    pub pop_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub seed: u64,
    /// Record every donor draw in [`RunHistory::donors`].
    pub trace_donors: bool,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            pop_size: 20,
            generations: 100,
            crossover_rate: 1.0,
            seed: 0,
            trace_donors: false,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<(), DeError> {
        if self.pop_size < 4 {
            return Err(DeError::PopulationTooSmall(self.pop_size));
        }
        if self.generations < 1 {
            return Err(DeError::NoGenerations);
        }
        if !(self.crossover_rate > 0.0 && self.crossover_rate <= 1.0) {
            return Err(DeError::CrossoverRate(self.crossover_rate));
        }
        Ok(())
    }
}

/// Uniform random masks: every bit is an independent fair coin.
pub fn init_population<R: Rng + ?Sized>(
    cfg: &DeConfig,
    dim: usize,
    rng: &mut R,
) -> Result<Vec<BitMask>, DeError> {
    cfg.validate()?;
    if dim == 0 {
        return Err(DeError::EmptyDimension);
    }
    Ok((0..cfg.pop_size)
        .map(|_| BitMask((0..dim).map(|_| rng.random::<bool>()).collect()))
        .collect())
}

/// Three pairwise distinct indices in `0..pop_size`, none equal to `target`.
/// Partial Fisher-Yates over the non-target indices.
pub fn sample_donors<R: Rng + ?Sized>(pop_size: usize, target: usize, rng: &mut R) -> [usize; 3] {
    debug_assert!(pop_size >= 4 && target < pop_size);
    let mut pool: Vec<usize> = (0..pop_size).filter(|&i| i != target).collect();
    for slot in 0..3 {
        let j = rng.random_range(slot..pool.len());
        pool.swap(slot, j);
    }
    [pool[0], pool[1], pool[2]]
}

#[derive(Debug, Clone)]
pub struct Population {
    pub masks: Vec<BitMask>,
    pub fitness: Vec<f64>,
    pub generation: usize,
}

impl Population {
    /// Lowest fitness, first index on ties.
    pub fn best(&self) -> Member {
        let mut best = 0;
        for (i, &f) in self.fitness.iter().enumerate() {
            if f < self.fitness[best] {
                best = i;
            }
        }
        Member {
            mask: self.masks[best].clone(),
            fitness: self.fitness[best],
        }
    }
}

/// One donor draw: `[generation, target, u1, u2, u3]`.
pub type DonorDraw = [usize; 5];

#[derive(Debug, Clone, Default)]
pub struct RunHistory {
    /// Best fitness after each generation; index 0 is the initial population.
    pub best_fitness: Vec<f64>,
    /// Cumulative fitness evaluations after each generation.
    pub evaluations: Vec<usize>,
    pub best_mask: Option<BitMask>,
    pub donors: Vec<DonorDraw>,
}

impl RunHistory {
    pub fn total_evaluations(&self) -> usize {
        self.evaluations.last().copied().unwrap_or(0)
    }

    /// CSV with columns `generation,best_fitness,evaluations`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "generation,best_fitness,evaluations")?;
        for (g, (f, e)) in self.best_fitness.iter().zip(&self.evaluations).enumerate() {
            writeln!(w, "{g},{f:.6},{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DeOutcome {
    pub best: Member,
    pub history: RunHistory,
    pub population: Population,
}

#[derive(Debug, Error)]
pub enum RunError<E> {
    #[error(transparent)]
    Config(#[from] DeError),
    #[error("fitness evaluation failed after {} generations", history.best_fitness.len().saturating_sub(1))]
    Fitness {
        #[source]
        source: E,
        history: RunHistory,
    },
}

/// Runs the optimiser, calling `fitness` sequentially.
pub fn run<F, E>(cfg: &DeConfig, dim: usize, mut fitness: F) -> Result<DeOutcome, RunError<E>>
where
    F: FnMut(&BitMask) -> Result<f64, E>,
{
    run_with(cfg, Start::Random(dim), |masks: &[BitMask]| {
        masks.iter().map(&mut fitness).collect()
    })
}

/// Like [`run`], starting from `initial` instead of a random population.
pub fn run_from<F, E>(
    cfg: &DeConfig,
    initial: Vec<BitMask>,
    mut fitness: F,
) -> Result<DeOutcome, RunError<E>>
where
    F: FnMut(&BitMask) -> Result<f64, E>,
{
    run_with(cfg, Start::Given(initial), |masks: &[BitMask]| {
        masks.iter().map(&mut fitness).collect()
    })
}

/// Runs the optimiser, evaluating the uncached trials of each generation in
/// parallel. The result is identical to [`run`] for a pure fitness.
pub fn run_parallel<F, E>(cfg: &DeConfig, dim: usize, fitness: F) -> Result<DeOutcome, RunError<E>>
where
    F: Fn(&BitMask) -> Result<f64, E> + Sync,
    E: Send,
{
    run_with(cfg, Start::Random(dim), |masks: &[BitMask]| {
        masks.par_iter().map(&fitness).collect()
    })
}

enum Start {
    Random(usize),
    Given(Vec<BitMask>),
}

enum EvalFailure<E> {
    Fitness(E),
    NonFinite(String),
}

struct Evaluator<B> {
    batch: B,
    cache: HashMap<BitMask, f64>,
    evaluations: usize,
}

impl<B> Evaluator<B> {
    fn evaluate<E>(&mut self, masks: &[BitMask]) -> Result<Vec<f64>, EvalFailure<E>>
    where
        B: FnMut(&[BitMask]) -> Vec<Result<f64, E>>,
    {
        let mut pending: Vec<BitMask> = Vec::new();
        for m in masks {
            if !self.cache.contains_key(m) && !pending.contains(m) {
                pending.push(m.clone());
            }
        }
        if !pending.is_empty() {
            let results = (self.batch)(&pending);
            for (mask, r) in pending.into_iter().zip(results) {
                let value = r.map_err(EvalFailure::Fitness)?;
                if !value.is_finite() {
                    return Err(EvalFailure::NonFinite(mask.to_string()));
                }
                self.evaluations += 1;
                self.cache.insert(mask, value);
            }
        }
        Ok(masks.iter().map(|m| self.cache[m]).collect())
    }
}

fn run_with<B, E>(cfg: &DeConfig, start: Start, batch: B) -> Result<DeOutcome, RunError<E>>
where
    B: FnMut(&[BitMask]) -> Vec<Result<f64, E>>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masks = match start {
        Start::Random(dim) => init_population(cfg, dim, &mut rng)?,
        Start::Given(masks) => {
            if masks.len() != cfg.pop_size {
                return Err(DeError::PopulationSize {
                    expected: cfg.pop_size,
                    got: masks.len(),
                }
                .into());
            }
            let dim = masks[0].len();
            if dim == 0 {
                return Err(DeError::EmptyDimension.into());
            }
            if let Some(bad) = masks.iter().find(|m| m.len() != dim) {
                return Err(DeError::LengthMismatch(bad.len(), dim).into());
            }
            masks
        }
    };
    let mut eval = Evaluator {
        batch,
        cache: HashMap::new(),
        evaluations: 0,
    };
    let mut history = RunHistory::default();

    macro_rules! evaluate {
        ($masks:expr) => {
            match eval.evaluate($masks) {
                Ok(v) => v,
                Err(EvalFailure::Fitness(source)) => {
                    return Err(RunError::Fitness { source, history })
                }
                Err(EvalFailure::NonFinite(mask)) => {
                    return Err(RunError::Config(DeError::NonFiniteFitness(mask)))
                }
            }
        };
    }

    let fitness = evaluate!(&masks);
    let mut pop = Population {
        masks,
        fitness,
        generation: 0,
    };
    let record = |history: &mut RunHistory, pop: &Population, evaluations: usize| {
        let best = pop.best();
        history.best_fitness.push(best.fitness);
        history.evaluations.push(evaluations);
        history.best_mask = Some(best.mask);
    };
    record(&mut history, &pop, eval.evaluations);

    for generation in 1..=cfg.generations {
        let mut trials = Vec::with_capacity(cfg.pop_size);
        for k in 0..cfg.pop_size {
            let [u1, u2, u3] = sample_donors(cfg.pop_size, k, &mut rng);
            if cfg.trace_donors {
                history.donors.push([generation, k, u1, u2, u3]);
            }
            let diff = difference_vector(&pop.masks[u1], &pop.masks[u2])?;
            let mutant = mutate(&diff, &pop.masks[u3])?;
            trials.push(crossover(
                &mutant,
                &pop.masks[k],
                cfg.crossover_rate,
                &mut rng,
            )?);
        }
        let trial_fitness = evaluate!(&trials);
        for (k, (trial, f)) in trials.into_iter().zip(trial_fitness).enumerate() {
            if trial_wins(pop.fitness[k], f) {
                pop.masks[k] = trial;
                pop.fitness[k] = f;
            }
        }
        pop.generation = generation;
        record(&mut history, &pop, eval.evaluations);
    }

    Ok(DeOutcome {
        best: pop.best(),
        history,
        population: pop,
    })
}
