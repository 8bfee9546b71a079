//! Mergeable accumulators and a deterministic sharded path runner.
//!
//! Paths are grouped into fixed-size shards. Each shard folds its paths in
//! index order into a fresh accumulator; shards are then merged in shard
//! order. The result therefore depends only on `(n_paths, shard_size)`,
//! never on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SHARD_SIZE: u64 = 1024;

/// Neumaier-compensated sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Count, mean and variance of a scalar sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanAccumulator {
    pub n: u64,
    sum: CompensatedSum,
    sum_sq: CompensatedSum,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum.add(x);
        self.sum_sq.add(x * x);
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        self.n += other.n;
        self.sum.merge(&other.sum);
        self.sum_sq.merge(&other.sum_sq);
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        self.sum.value() / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let m = self.sum.value() / n;
        ((self.sum_sq.value() - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Anything that can absorb per-path samples and be merged.
pub trait Accumulator: Send {
    fn merge_from(&mut self, other: Self);
}

impl Accumulator for MeanAccumulator {
    fn merge_from(&mut self, other: Self) {
        self.merge(&other);
    }
}

impl<T: Send> Accumulator for Vec<T> {
    fn merge_from(&mut self, mut other: Self) {
        self.append(&mut other);
    }
}

/// Runs `path` for indices `0..n_paths` in shards of `shard_size` on at
/// most `threads` workers (`0` = rayon default). The first error in index
/// order wins.
pub fn run_sharded<A, E, F, M>(
    n_paths: u64,
    shard_size: u64,
    threads: usize,
    make: M,
    path: F,
) -> Result<A, E>
where
    A: Accumulator,
    E: Send,
    M: Fn() -> A + Sync,
    F: Fn(u64, &mut A) -> Result<(), E> + Sync,
{
    let shard_size = shard_size.max(1);
    let n_shards = n_paths.div_ceil(shard_size);
    let work = || {
        (0..n_shards)
            .into_par_iter()
            .map(|s| {
                let mut acc = make();
                let lo = s * shard_size;
                let hi = (lo + shard_size).min(n_paths);
                for i in lo..hi {
                    path(i, &mut acc)?;
                }
                Ok(acc)
            })
            .collect::<Vec<Result<A, E>>>()
    };
    let shards = if threads == 0 {
        work()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(work),
            Err(_) => work(),
        }
    };
    let mut total = make();
    for shard in shards {
        total.merge_from(shard?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let mut s = CompensatedSum::default();
        for x in [1e16, 1.0, -1e16, 1.0] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn mean_and_error() {
        let mut m = MeanAccumulator::default();
        for x in [1.0, 2.0, 3.0, 4.0] {
            m.push(x);
        }
        assert_eq!(m.mean(), 2.5);
        assert!((m.variance() - 5.0 / 3.0).abs() < 1e-15);
        assert!((m.std_error() - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let run = |threads| {
            run_sharded::<MeanAccumulator, (), _, _>(10_000, 97, threads, MeanAccumulator::default, |i, acc| {
                acc.push(((i as f64) * 0.37).sin() * 1e3);
                Ok(())
            })
            .unwrap()
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.mean().to_bits(), b.mean().to_bits());
        assert_eq!(a.n, 10_000);
    }

    #[test]
    fn first_error_in_index_order() {
        let r = run_sharded::<MeanAccumulator, u64, _, _>(100, 10, 2, MeanAccumulator::default, |i, _| {
            if i == 37 || i == 81 {
                Err(i)
            } else {
                Ok(())
            }
        });
        assert_eq!(r.unwrap_err(), 37);
    }

    proptest! {
        #[test]
        fn merge_grouping_is_associative(xs in prop::collection::vec(-1e6f64..1e6, 1..200), cut1 in 0usize..200, cut2 in 0usize..200) {
            let n = xs.len();
            let (c1, c2) = (cut1 % (n + 1), cut2 % (n + 1));
            let (lo, hi) = (c1.min(c2), c1.max(c2));
            let fold = |s: &[f64]| {
                let mut m = MeanAccumulator::default();
                s.iter().for_each(|&x| m.push(x));
                m
            };
            let whole = fold(&xs);
            let mut left = fold(&xs[..lo]);
            let mut right = fold(&xs[hi..]);
            right.merge(&fold(&xs[lo..hi]));
            left.merge(&right);
            let scale = whole.mean().abs().max(1.0);
            prop_assert!((whole.mean() - left.mean()).abs() <= 1e-12 * scale);
            prop_assert_eq!(whole.n, left.n);
        }
    }
}
