//! Client task distributions and their data.
//!
//! Two families are provided:
//!
//! * sine regression, where every client fits `a * sin(b * x + c)` with its
//!   own `(a, b, c)`;
//! * synthetic few-shot classification, where every client sees `M` classes
//!   drawn from a fixed universe of `C` prototype vectors and labels them
//!   `0..M` in its own order.
//!
//! Data are produced by seeded generators. A [`SampleStream`] hands out one
//! sample at a time, either lazily from a generator (a "sensor" that never
//! stores history) or by walking a materialized [`SupportQuerySplit`] in a
//! shuffled order.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Sample;
use crate::seeds;

const SUPPORT_TAG: u64 = 0x5355_5050;
const QUERY_TAG: u64 = 0x5155_4552;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("cannot draw {ways} classes from a universe of {classes}")]
    TooManyWays { ways: usize, classes: usize },
    #[error("a task needs at least one class")]
    NoClasses,
    #[error("invalid range for {name}: [{lo}, {hi}]")]
    InvalidRange { name: &'static str, lo: f64, hi: f64 },
    #[error("query set must hold at least one sample")]
    EmptyQuery,
}

/// Closed sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn validate(&self, name: &'static str) -> Result<(), TaskError> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(TaskError::InvalidRange {
                name,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }
}

/// Parameter and input ranges of the sine family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SineRanges {
    pub amplitude: Range,
    pub frequency: Range,
    pub phase: Range,
    pub x: Range,
}

impl Default for SineRanges {
    fn default() -> Self {
        Self {
            amplitude: Range::new(0.1, 5.0),
            frequency: Range::new(0.8, 1.2),
            phase: Range::new(0.0, 2.0 * PI),
            x: Range::new(-5.0, 5.0),
        }
    }
}

impl SineRanges {
    pub fn validate(&self) -> Result<(), TaskError> {
        self.amplitude.validate("amplitude")?;
        self.frequency.validate("frequency")?;
        self.phase.validate("phase")?;
        self.x.validate("x")
    }
}

/// `f(x) = a * sin(b * x + c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineTask {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SineTask {
    pub fn eval(&self, x: f64) -> f64 {
        self.a * (self.b * x + self.c).sin()
    }
}

/// Draws a task uniformly over `ranges`.
pub fn sample_sine_task(ranges: &SineRanges, seed: u64) -> SineTask {
    let mut rng = seeds::rng(seed);
    SineTask {
        a: ranges.amplitude.sample(&mut rng),
        b: ranges.frequency.sample(&mut rng),
        c: ranges.phase.sample(&mut rng),
    }
}

/// Support of `support` points and query of `query` points, drawn from
/// independent generators so that growing the support never changes the
/// query and smaller supports are prefixes of larger ones.
pub fn realize_sine_data(
    task: &SineTask,
    ranges: &SineRanges,
    support: usize,
    query: usize,
    seed: u64,
) -> Result<SupportQuerySplit, TaskError> {
    if query == 0 {
        return Err(TaskError::EmptyQuery);
    }
    Ok(SupportQuerySplit {
        support: SampleStream::sine(task, ranges, support, seeds::derive(seed, SUPPORT_TAG))
            .collect(),
        query: SampleStream::sine(task, ranges, query, seeds::derive(seed, QUERY_TAG)).collect(),
    })
}

/// Fixed universe of class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    dim: usize,
    prototypes: Vec<Vec<f32>>,
}

impl PrototypeBank {
    /// `classes` standard-normal vectors of length `dim`.
    pub fn generate(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seeds::rng(seed);
        let prototypes = (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .map(|v: f64| v as f32)
                    .collect()
            })
            .collect();
        Self { dim, prototypes }
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototype(&self, id: usize) -> &[f32] {
        &self.prototypes[id]
    }

    /// Index of the prototype nearest to `x` among `candidates` (Euclidean,
    /// lowest index on ties).
    pub fn nearest(&self, candidates: &[usize], x: &[f32]) -> usize {
        let dist = |id: usize| -> f64 {
            self.prototypes[id]
                .iter()
                .zip(x)
                .map(|(p, v)| (*p as f64 - *v as f64).powi(2))
                .sum()
        };
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (pos, &id) in candidates.iter().enumerate() {
            let d = dist(id);
            if d < best_d {
                best = pos;
                best_d = d;
            }
        }
        best
    }
}

/// The classes one client has to tell apart. Position `j` in `class_ids` is
/// presented to the model as label `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotClassTask {
    pub class_ids: Vec<usize>,
}

impl FewShotClassTask {
    pub fn ways(&self) -> usize {
        self.class_ids.len()
    }
}

/// Draws `ways` distinct ids out of `classes`.
pub fn sample_fewshot_task(
    ways: usize,
    classes: usize,
    seed: u64,
) -> Result<FewShotClassTask, TaskError> {
    if ways == 0 {
        return Err(TaskError::NoClasses);
    }
    if ways > classes {
        return Err(TaskError::TooManyWays { ways, classes });
    }
    let mut rng = seeds::rng(seed);
    let class_ids = rand::seq::index::sample(&mut rng, classes, ways).into_vec();
    Ok(FewShotClassTask { class_ids })
}

/// `shots` samples per class in the support, `query` samples in the query
/// (classes cycled). Inputs are prototypes plus Gaussian noise of standard
/// deviation `noise`; targets are one-hot over local labels.
pub fn realize_fewshot_data(
    task: &FewShotClassTask,
    bank: &PrototypeBank,
    noise: f64,
    shots: usize,
    query: usize,
    seed: u64,
) -> Result<SupportQuerySplit, TaskError> {
    if query == 0 {
        return Err(TaskError::EmptyQuery);
    }
    let support = shots * task.ways();
    Ok(SupportQuerySplit {
        support: SampleStream::fewshot(task, bank, noise, support, seeds::derive(seed, SUPPORT_TAG))
            .collect(),
        query: SampleStream::fewshot(task, bank, noise, query, seeds::derive(seed, QUERY_TAG))
            .collect(),
    })
}

/// A task's few training samples and its held-out scoring samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupportQuerySplit {
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

impl SupportQuerySplit {
    /// One pass over the support in a seed-determined shuffled order.
    pub fn stream(&self, seed: u64) -> SampleStream<'_> {
        let mut order: Vec<usize> = (0..self.support.len()).collect();
        order.shuffle(&mut seeds::rng(seed));
        SampleStream {
            remaining: self.support.len(),
            source: Source::Stored {
                samples: &self.support,
                order,
                next: 0,
            },
        }
    }

    /// Writes `set,x0..,y0..` rows for both halves.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let first = self.support.first().or_else(|| self.query.first());
        let (dx, dy) = first.map_or((0, 0), |s| (s.x.len(), s.y.len()));
        let mut header = vec!["set".to_string()];
        header.extend((0..dx).map(|i| format!("x{i}")));
        header.extend((0..dy).map(|i| format!("y{i}")));
        w.write_record(&header)?;
        for (set, samples) in [("support", &self.support), ("query", &self.query)] {
            for s in samples {
                let mut row = vec![set.to_string()];
                row.extend(s.x.iter().chain(&s.y).map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One-pass, single-consumer source of support samples.
///
/// At most one sample is materialized at a time beyond whatever backs the
/// stream; there is no way to rewind.
#[derive(Debug)]
pub struct SampleStream<'a> {
    remaining: usize,
    source: Source<'a>,
}

#[derive(Debug)]
enum Source<'a> {
    Stored {
        samples: &'a [Sample],
        order: Vec<usize>,
        next: usize,
    },
    Sine {
        task: SineTask,
        x: Range,
        rng: ChaCha8Rng,
    },
    FewShot {
        task: &'a FewShotClassTask,
        bank: &'a PrototypeBank,
        noise: f64,
        rng: ChaCha8Rng,
        cycle: Vec<usize>,
        next: usize,
    },
}

impl<'a> SampleStream<'a> {
    /// Lazily generates `len` sine samples.
    pub fn sine(task: &SineTask, ranges: &SineRanges, len: usize, seed: u64) -> Self {
        Self {
            remaining: len,
            source: Source::Sine {
                task: *task,
                x: ranges.x,
                rng: seeds::rng(seed),
            },
        }
    }

    /// Lazily generates `len` noisy prototype samples. Each consecutive block
    /// of `ways` samples covers every class once, in a fresh random order.
    pub fn fewshot(
        task: &'a FewShotClassTask,
        bank: &'a PrototypeBank,
        noise: f64,
        len: usize,
        seed: u64,
    ) -> Self {
        let cycle = (0..task.ways()).collect();
        Self {
            remaining: len,
            source: Source::FewShot {
                task,
                bank,
                noise,
                rng: seeds::rng(seed),
                cycle,
                next: task.ways(),
            },
        }
    }

    pub fn empty() -> Self {
        Self {
            remaining: 0,
            source: Source::Stored {
                samples: &[],
                order: Vec::new(),
                next: 0,
            },
        }
    }
}

impl Iterator for SampleStream<'_> {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let sample = match &mut self.source {
            Source::Stored {
                samples,
                order,
                next,
            } => {
                let s = samples[order[*next]].clone();
                *next += 1;
                s
            }
            Source::Sine { task, x, rng } => {
                let xv = x.sample(rng) as f32;
                let yv = task.eval(xv as f64) as f32;
                Sample::new(vec![xv], vec![yv])
            }
            Source::FewShot {
                task,
                bank,
                noise,
                rng,
                cycle,
                next,
            } => {
                if *next == cycle.len() {
                    cycle.shuffle(rng);
                    *next = 0;
                }
                let label = cycle[*next];
                *next += 1;
                let proto = bank.prototype(task.class_ids[label]);
                let x = proto
                    .iter()
                    .map(|&p| {
                        let e: f64 = StandardNormal.sample(rng);
                        (p as f64 + *noise * e) as f32
                    })
                    .collect();
                let mut y = vec![0.0; cycle.len()];
                y[label] = 1.0;
                Sample::new(x, y)
            }
        };
        Some(sample)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for SampleStream<'_> {}

/// Where a client's data come from.
#[derive(Debug, Clone)]
pub enum TaskFamily {
    Sine(SineRanges),
    FewShot {
        bank: Arc<PrototypeBank>,
        ways: usize,
        noise: f64,
    },
}

/// A client's concrete task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    Sine(SineTask),
    FewShot(FewShotClassTask),
}

impl TaskFamily {
    pub fn sample_task(&self, seed: u64) -> Result<TaskSpec, TaskError> {
        match self {
            TaskFamily::Sine(r) => Ok(TaskSpec::Sine(sample_sine_task(r, seed))),
            TaskFamily::FewShot { bank, ways, .. } => {
                sample_fewshot_task(*ways, bank.classes(), seed).map(TaskSpec::FewShot)
            }
        }
    }

    /// Lazy stream of `len` fresh samples from `task`.
    pub fn stream<'a>(&'a self, task: &'a TaskSpec, len: usize, seed: u64) -> SampleStream<'a> {
        match (self, task) {
            (TaskFamily::Sine(r), TaskSpec::Sine(t)) => SampleStream::sine(t, r, len, seed),
            (TaskFamily::FewShot { bank, noise, .. }, TaskSpec::FewShot(t)) => {
                SampleStream::fewshot(t, bank, *noise, len, seed)
            }
            _ => panic!("task does not belong to this family"),
        }
    }

    /// `support` is a sample count for sine and a shot count for few-shot
    /// tasks (`support * ways` samples).
    pub fn realize(
        &self,
        task: &TaskSpec,
        support: usize,
        query: usize,
        seed: u64,
    ) -> Result<SupportQuerySplit, TaskError> {
        match (self, task) {
            (TaskFamily::Sine(r), TaskSpec::Sine(t)) => realize_sine_data(t, r, support, query, seed),
            (TaskFamily::FewShot { bank, noise, .. }, TaskSpec::FewShot(t)) => {
                realize_fewshot_data(t, bank, *noise, support, query, seed)
            }
            _ => panic!("task does not belong to this family"),
        }
    }

    /// Samples in a support set of the given size parameter.
    pub fn support_len(&self, support: usize) -> usize {
        match self {
            TaskFamily::Sine(_) => support,
            TaskFamily::FewShot { ways, .. } => support * ways,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskFamily::FewShot { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_task_is_deterministic_and_in_range() {
        let r = SineRanges::default();
        assert_eq!(sample_sine_task(&r, 4), sample_sine_task(&r, 4));
        for seed in 0..10_000 {
            let t = sample_sine_task(&r, seed);
            assert!(r.amplitude.contains(t.a));
            assert!(r.frequency.contains(t.b));
            assert!(r.phase.contains(t.c));
        }
    }

    #[test]
    fn sine_targets_reconstruct() {
        let r = SineRanges::default();
        let t = sample_sine_task(&r, 1);
        let split = realize_sine_data(&t, &r, 8, 32, 9).unwrap();
        assert_eq!(split.support.len(), 8);
        assert_eq!(split.query.len(), 32);
        for s in split.support.iter().chain(&split.query) {
            assert!(r.x.contains(s.x[0] as f64));
            assert!((s.y[0] as f64 - t.eval(s.x[0] as f64)).abs() < 1e-6);
        }
        for s in &split.support {
            assert!(!split.query.contains(s));
        }
    }

    #[test]
    fn zero_shot_split_has_query_only() {
        let r = SineRanges::default();
        let t = sample_sine_task(&r, 1);
        let split = realize_sine_data(&t, &r, 0, 5, 2).unwrap();
        assert!(split.support.is_empty());
        assert_eq!(split.query.len(), 5);
        assert_eq!(
            realize_sine_data(&t, &r, 3, 0, 2),
            Err(TaskError::EmptyQuery)
        );
    }

    #[test]
    fn supports_are_nested_and_query_is_stable() {
        let r = SineRanges::default();
        let t = sample_sine_task(&r, 1);
        let small = realize_sine_data(&t, &r, 2, 16, 5).unwrap();
        let large = realize_sine_data(&t, &r, 8, 16, 5).unwrap();
        assert_eq!(small.query, large.query);
        assert_eq!(small.support[..], large.support[..2]);
    }

    #[test]
    fn fewshot_task_sampling() {
        let full = sample_fewshot_task(6, 6, 3).unwrap();
        let mut ids = full.class_ids.clone();
        ids.sort();
        assert_eq!(ids, (0..6).collect::<Vec<_>>());

        assert_eq!(sample_fewshot_task(1, 10, 3).unwrap().ways(), 1);
        assert_eq!(
            sample_fewshot_task(7, 6, 3),
            Err(TaskError::TooManyWays { ways: 7, classes: 6 })
        );
        assert_eq!(sample_fewshot_task(0, 6, 3), Err(TaskError::NoClasses));

        let t = sample_fewshot_task(5, 100, 11).unwrap();
        let mut distinct = t.class_ids.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn different_seeds_give_different_class_sets() {
        let differing = (0..100)
            .filter(|&i| {
                let a = sample_fewshot_task(5, 100, 2 * i).unwrap();
                let b = sample_fewshot_task(5, 100, 2 * i + 1).unwrap();
                a != b
            })
            .count();
        assert!(differing >= 1);
    }

    #[test]
    fn noiseless_samples_are_prototypes() {
        let bank = PrototypeBank::generate(20, 8, 1);
        let task = sample_fewshot_task(4, 20, 2).unwrap();
        let split = realize_fewshot_data(&task, &bank, 0.0, 3, 10, 7).unwrap();
        assert_eq!(split.support.len(), 12);
        for s in split.support.iter().chain(&split.query) {
            let label = s.y.iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(s.y.iter().sum::<f32>(), 1.0);
            assert_eq!(s.x, bank.prototype(task.class_ids[label]));
        }
        let one_shot = realize_fewshot_data(&task, &bank, 0.1, 1, 10, 7).unwrap();
        assert_eq!(one_shot.support.len(), 4);
    }

    #[test]
    fn stream_is_a_permutation_of_the_support() {
        let r = SineRanges::default();
        let t = sample_sine_task(&r, 1);
        let split = realize_sine_data(&t, &r, 10, 4, 3).unwrap();
        let a: Vec<Sample> = split.stream(1).collect();
        let b: Vec<Sample> = split.stream(1).collect();
        assert_eq!(a, b);
        let key = |s: &Sample| s.x[0].to_bits();
        let mut sorted_stream: Vec<u32> = a.iter().map(key).collect();
        let mut sorted_support: Vec<u32> = split.support.iter().map(key).collect();
        sorted_stream.sort();
        sorted_support.sort();
        assert_eq!(sorted_stream, sorted_support);

        let differs = (2..20).any(|s| split.stream(s).collect::<Vec<_>>() != a);
        assert!(differs);

        let empty = SupportQuerySplit::default();
        assert_eq!(empty.stream(0).count(), 0);
        assert_eq!(SampleStream::empty().len(), 0);
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let r = SineRanges::default();
        let t = sample_sine_task(&r, 1);
        let split = realize_sine_data(&t, &r, 2, 3, 3).unwrap();
        let mut buf = Vec::new();
        split.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "set,x0,y0");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("support,"));
        assert!(lines[5].starts_with("query,"));
    }
}
