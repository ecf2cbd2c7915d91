//! Ordered map over independent work items.
//!
//! Both strategies return results in index order, so callers get bit-identical
//! output regardless of scheduling. The rayon strategy is only compiled with
//! the `parallel` feature.

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Exec {
    #[default]
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Exec {
    /// Parallel when the feature is compiled in and `jobs > 1`.
    pub fn from_jobs(jobs: usize) -> Self {
        #[cfg(feature = "parallel")]
        if jobs > 1 {
            return Exec::Parallel;
        }
        let _ = jobs;
        Exec::Sequential
    }

    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
        }
    }

    pub fn try_map_indexed<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_preserves_order() {
        let v = Exec::Sequential.map_indexed(5, |i| i * i);
        assert_eq!(v, vec![0, 1, 4, 9, 16]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let f = |i: usize| ((i as f64).sin() * 1e6).to_bits();
        assert_eq!(
            Exec::Parallel.map_indexed(10_000, f),
            Exec::Sequential.map_indexed(10_000, f)
        );
    }

    #[test]
    fn jobs_one_is_sequential() {
        assert_eq!(Exec::from_jobs(1), Exec::Sequential);
        assert_eq!(Exec::from_jobs(0), Exec::Sequential);
    }
}
