//! Serial/parallel execution switch.
//!
//! Work is always split into the same chunks and reduced in the same order,
//! so results do not depend on the execution mode or the thread count.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

impl Execution {
    /// `Serial` when `deterministic` is requested or the crate was built
    /// without the `parallel` feature.
    pub fn from_flag(deterministic: bool) -> Self {
        if deterministic || !cfg!(feature = "parallel") {
            Execution::Serial
        } else {
            Execution::Parallel
        }
    }

    /// `(0..n).map(f).collect()`, possibly on the rayon pool. Output order is
    /// always index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Maps `f` over the items of `items`, preserving order.
    pub fn map_slice<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.map_range(items.len(), |i| f(&items[i]))
    }
}
