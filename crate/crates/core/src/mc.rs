//! Replicate scheduling, deterministic merging and checkpointing.
//!
//! Every replicate is a pure function of its index and its stream seed
//! `stream_seed(master, index)`. Results are collected in index order and
//! statistics are merged over a fixed binary tree, so the output does not
//! depend on the number of worker threads.
//!
//! Checkpoint files are append-only: a header (magic, master seed, replicate
//! count, experiment id, CRC) followed by records
//! `[u64 index][u32 len][payload][u32 crc32(index ‖ len ‖ payload)]`, all
//! little-endian. A torn or corrupt tail is truncated on resume.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_seed;

const MAGIC: &[u8; 8] = b"RWRPCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub experiment_id: String,
    pub estimator: String,
    pub replicates: usize,
    pub master_seed: u64,
    /// Worker threads; 0 lets the pool pick the core count.
    pub workers: usize,
    /// Replicates per checkpoint flush; 0 disables checkpointing.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl RunPlan {
    pub fn new(experiment_id: impl Into<String>, replicates: usize, master_seed: u64) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            estimator: String::new(),
            replicates,
            master_seed,
            workers: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_estimator(mut self, estimator: impl Into<String>) -> Self {
        self.estimator = estimator.into();
        self
    }

    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>, every: usize) -> Self {
        self.checkpoint_path = Some(path.into());
        self.checkpoint_every = every;
        self
    }

    pub fn stream_seed(&self, index: usize) -> u64 {
        stream_seed(self.master_seed, index as u64)
    }
}

/// Running count, mean, sum of squared deviations and range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamingStats {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for StreamingStats {
    fn default() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl StreamingStats {
    pub fn from_value(x: f64) -> Self {
        Self {
            count: 1,
            mean: x,
            m2: 0.0,
            min: x,
            max: x,
        }
    }

    pub fn push(&mut self, x: f64) {
        *self = self.merge(&Self::from_value(x));
    }

    /// Chan et al. parallel combination.
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let n = self.count + other.count;
        let (na, nb) = (self.count as f64, other.count as f64);
        let delta = other.mean - self.mean;
        let mean = if na == nb {
            0.5 * (self.mean + other.mean)
        } else {
            self.mean + delta * nb / n as f64
        };
        Self {
            count: n,
            mean,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n as f64,
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    /// Unbiased sample variance (0 for fewer than two values).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        (self.variance() / self.count as f64).sqrt()
    }
}

/// Merges `values` over the balanced binary tree that splits at the midpoint.
pub fn merge_tree(values: &[f64]) -> StreamingStats {
    match values.len() {
        0 => StreamingStats::default(),
        1 => StreamingStats::from_value(values[0]),
        n => {
            let (a, b) = values.split_at(n / 2);
            merge_tree(a).merge(&merge_tree(b))
        }
    }
}

/// Pairwise sum in the same fixed tree order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// A Monte Carlo value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub replicates: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            std_error: 0.0,
            replicates: 0,
        }
    }

    pub fn from_stats(stats: &StreamingStats) -> Self {
        Self {
            value: stats.mean,
            std_error: stats.std_error(),
            replicates: stats.count as usize,
        }
    }
}

/// Ratio `Σa / Σb` with a delete-one-block jackknife standard error.
pub fn jackknife_ratio(num: &[f64], den: &[f64], blocks: usize) -> (f64, f64) {
    assert_eq!(num.len(), den.len());
    let n = num.len();
    let total_a = pairwise_sum(num);
    let total_b = pairwise_sum(den);
    let ratio = total_a / total_b;
    let k = blocks.min(n);
    if k < 2 {
        return (ratio, f64::NAN);
    }
    let mut partial = Vec::with_capacity(k);
    for j in 0..k {
        let (lo, hi) = (j * n / k, (j + 1) * n / k);
        let a = total_a - pairwise_sum(&num[lo..hi]);
        let b = total_b - pairwise_sum(&den[lo..hi]);
        partial.push(a / b);
    }
    let mean = partial.iter().sum::<f64>() / k as f64;
    let ss: f64 = partial.iter().map(|t| (t - mean) * (t - mean)).sum();
    (ratio, ((k - 1) as f64 / k as f64 * ss).sqrt())
}

/// Binary encoding of replicate results for the checkpoint log.
pub trait Payload: Sized {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(input: &mut &[u8]) -> Result<Self>;
}

fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if input.len() < n {
        return Err(Error::Checkpoint("payload shorter than expected".into()));
    }
    let (head, tail) = input.split_at(n);
    *input = tail;
    Ok(head)
}

impl Payload for f64 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bits().to_le_bytes());
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        let b = take(input, 8)?;
        Ok(f64::from_bits(u64::from_le_bytes(b.try_into().expect("8 bytes"))))
    }
}

impl Payload for f32 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_bits().to_le_bytes());
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        let b = take(input, 4)?;
        Ok(f32::from_bits(u32::from_le_bytes(b.try_into().expect("4 bytes"))))
    }
}

impl Payload for u64 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        let b = take(input, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

impl Payload for bool {
    fn encode(&self, out: &mut Vec<u8>) {
        out.push(*self as u8);
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        Ok(take(input, 1)?[0] != 0)
    }
}

impl<T: Payload> Payload for Vec<T> {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for x in self {
            x.encode(out);
        }
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        let b = take(input, 4)?;
        let n = u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        (0..n).map(|_| T::decode(input)).collect()
    }
}

impl<A: Payload, B: Payload> Payload for (A, B) {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
        self.1.encode(out);
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        Ok((A::decode(input)?, B::decode(input)?))
    }
}

impl<A: Payload, B: Payload, C: Payload> Payload for (A, B, C) {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
        self.1.encode(out);
        self.2.encode(out);
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        Ok((A::decode(input)?, B::decode(input)?, C::decode(input)?))
    }
}

fn header_bytes(plan: &RunPlan) -> Vec<u8> {
    let mut h = Vec::new();
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&plan.master_seed.to_le_bytes());
    h.extend_from_slice(&(plan.replicates as u64).to_le_bytes());
    let id = plan.experiment_id.as_bytes();
    h.extend_from_slice(&(id.len() as u32).to_le_bytes());
    h.extend_from_slice(id);
    let crc = crc32fast::hash(&h);
    h.extend_from_slice(&crc.to_le_bytes());
    h
}

fn record_bytes(index: usize, payload: &[u8]) -> Vec<u8> {
    let mut r = Vec::with_capacity(payload.len() + 16);
    r.extend_from_slice(&(index as u64).to_le_bytes());
    r.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    r.extend_from_slice(payload);
    let crc = crc32fast::hash(&r);
    r.extend_from_slice(&crc.to_le_bytes());
    r
}

/// Opens (or creates) the checkpoint log and returns the valid records.
fn open_checkpoint<T: Payload>(plan: &RunPlan, path: &PathBuf) -> Result<(File, Vec<Option<T>>)> {
    let header = header_bytes(plan);
    let mut done: Vec<Option<T>> = (0..plan.replicates).map(|_| None).collect();
    let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(path)?;
    let mut bytes = Vec::new();
    BufReader::new(&mut file).read_to_end(&mut bytes)?;

    if bytes.len() < header.len() {
        file.set_len(0)?;
        file.seek(SeekFrom::Start(0))?;
        file.write_all(&header)?;
        file.sync_data()?;
        return Ok((file, done));
    }
    if bytes[..header.len()] != header[..] {
        return Err(Error::Checkpoint(format!(
            "{} belongs to a different run (seed, replicate count or experiment id differ)",
            path.display()
        )));
    }
    let mut pos = header.len();
    loop {
        let rest = &bytes[pos..];
        if rest.len() < 12 {
            break;
        }
        let index = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let len = u32::from_le_bytes(rest[8..12].try_into().expect("4 bytes")) as usize;
        if rest.len() < 12 + len + 4 {
            break;
        }
        let body = &rest[..12 + len];
        let crc = u32::from_le_bytes(rest[12 + len..16 + len].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc || index >= plan.replicates {
            break;
        }
        let mut payload = &rest[12..12 + len];
        let Ok(value) = T::decode(&mut payload) else { break };
        done[index] = Some(value);
        pos += 16 + len;
    }
    // drop any torn tail so new records append after the last valid one
    file.set_len(pos as u64)?;
    file.seek(SeekFrom::End(0))?;
    Ok((file, done))
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))
}

/// Evaluates `task(index, stream_seed)` for every replicate and returns the
/// results in index order.
pub fn run_replicates<T, G>(plan: &RunPlan, task: G) -> Result<Vec<T>>
where
    T: Payload + Send,
    G: Fn(usize, u64) -> Result<T> + Sync,
{
    if plan.replicates == 0 {
        return Err(Error::Invalid("replicate count must be at least 1".into()));
    }
    let pool = build_pool(plan.workers)?;
    let eval = |indices: &[usize]| -> Vec<(usize, Result<T>)> {
        pool.install(|| {
            indices
                .par_iter()
                .map(|&i| (i, task(i, plan.stream_seed(i))))
                .collect()
        })
    };
    let fail = |index: usize, e: Error| Error::ReplicateFailed {
        index,
        stream_seed: plan.stream_seed(index),
        source: Box::new(e),
    };

    let Some(path) = plan.checkpoint_path.as_ref().filter(|_| plan.checkpoint_every > 0) else {
        let all: Vec<usize> = (0..plan.replicates).collect();
        return eval(&all)
            .into_iter()
            .map(|(i, r)| r.map_err(|e| fail(i, e)))
            .collect();
    };

    let (mut file, mut done) = open_checkpoint::<T>(plan, path)?;
    let missing: Vec<usize> = (0..plan.replicates).filter(|&i| done[i].is_none()).collect();
    for chunk in missing.chunks(plan.checkpoint_every) {
        let mut log = Vec::new();
        for (i, r) in eval(chunk) {
            let value = r.map_err(|e| fail(i, e))?;
            let mut payload = Vec::new();
            value.encode(&mut payload);
            log.extend_from_slice(&record_bytes(i, &payload));
            done[i] = Some(value);
        }
        file.write_all(&log)?;
        file.sync_data()?;
    }
    Ok(done.into_iter().map(|v| v.expect("every replicate evaluated")).collect())
}

/// Runs a scalar-valued task and merges the results deterministically.
pub fn run<G>(plan: &RunPlan, task: G) -> Result<StreamingStats>
where
    G: Fn(u64) -> Result<f64> + Sync,
{
    let values = run_replicates(plan, |_, seed| task(seed))?;
    Ok(merge_tree(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn noisy(seed: u64) -> Result<f64> {
        let mut rng = crate::rng::stream_rng(seed);
        Ok(rng.random::<f64>() * 10.0 - 3.0)
    }

    #[test]
    fn single_and_constant() {
        let s = run(&RunPlan::new("one", 1, 3), |_| Ok(2.5)).unwrap();
        assert_eq!((s.count, s.mean, s.min, s.max), (1, 2.5, 2.5, 2.5));
        let s = run(&RunPlan::new("const", 100, 3), |_| Ok(0.1)).unwrap();
        assert_eq!(s.variance(), 0.0);
        assert_eq!(s.mean, 0.1);
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let base = RunPlan::new("det", 1000, 11);
        let a = run(&base.clone().with_workers(1), noisy).unwrap();
        let b = run(&base.clone().with_workers(8), noisy).unwrap();
        let c = run(&base.with_workers(3), noisy).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.m2.to_bits(), b.m2.to_bits());
        assert_eq!(a, c);
    }

    #[test]
    fn matches_two_pass_statistics() {
        let xs: Vec<f64> = (0..257).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let s = merge_tree(&xs);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.variance() - var).abs() < 1e-10);
        assert_eq!(s.min, 0.0);
        assert_eq!(s.max, 100.0 / 7.0);
    }

    #[test]
    fn failure_names_index_and_seed() {
        let plan = RunPlan::new("fail", 50, 9);
        let err = run(&plan, |seed| {
            if seed == plan.stream_seed(17) || seed == plan.stream_seed(30) {
                Err(Error::Underflow("boom".into()))
            } else {
                Ok(1.0)
            }
        })
        .unwrap_err();
        match err {
            Error::ReplicateFailed { index, stream_seed, .. } => {
                assert_eq!(index, 17);
                assert_eq!(stream_seed, plan.stream_seed(17));
            }
            other => panic!("{other:?}"),
        }
        assert!(run(&RunPlan::new("empty", 0, 1), |_| Ok(0.0)).is_err());
    }

    #[test]
    fn checkpoint_resume_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let plan = RunPlan::new("resume", 40, 5).with_checkpoint(&path, 8);
        let full = run(&RunPlan::new("resume", 40, 5), noisy).unwrap();

        // first attempt dies at replicate 21
        let err = run(&plan, |seed| {
            if seed == plan.stream_seed(21) {
                Err(Error::Invalid("crash".into()))
            } else {
                noisy(seed)
            }
        });
        assert!(err.is_err());
        // simulate a torn write
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[1, 2, 3, 4, 5]).unwrap();
        drop(f);

        let calls = std::sync::atomic::AtomicUsize::new(0);
        let resumed = run(&plan, |seed| {
            calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            noisy(seed)
        })
        .unwrap();
        assert_eq!(resumed, full);
        assert_eq!(calls.into_inner(), 24);

        let other = RunPlan::new("different", 40, 5).with_checkpoint(&path, 8);
        assert!(matches!(run(&other, noisy), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn payload_round_trip() {
        let v: (f64, Vec<f32>, bool) = (1.5, vec![0.25, -3.0], true);
        let mut buf = Vec::new();
        v.encode(&mut buf);
        let mut cur = buf.as_slice();
        assert_eq!(<(f64, Vec<f32>, bool)>::decode(&mut cur).unwrap(), v);
        assert!(cur.is_empty());
        let mut short = &buf[..3];
        assert!(f64::decode(&mut short).is_err());
    }

    #[test]
    fn jackknife_on_exact_ratio() {
        let a = vec![2.0; 100];
        let b = vec![1.0; 100];
        let (r, se) = jackknife_ratio(&a, &b, 50);
        assert_eq!(r, 2.0);
        assert!(se.abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tree_merge_agrees_with_sequential(xs in prop::collection::vec(-1e3f64..1e3, 1..200)) {
            let tree = merge_tree(&xs);
            let mut seq = StreamingStats::default();
            for &x in &xs {
                seq.push(x);
            }
            prop_assert_eq!(tree.count, seq.count);
            prop_assert!((tree.mean - seq.mean).abs() <= 1e-9 * (1.0 + seq.mean.abs()));
            prop_assert!((tree.m2 - seq.m2).abs() <= 1e-7 * (1.0 + seq.m2.abs()));
        }
    }
}
