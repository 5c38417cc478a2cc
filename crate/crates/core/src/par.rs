//! Per-instance data parallelism.
//!
//! Every batch loop in the crate goes through [`map`], which preserves input
//! order. Reductions are always performed afterwards on the calling thread in
//! index order, so results do not depend on the number of worker threads.
//!
//! With the `parallel` feature (default) the work runs on the current rayon
//! pool. Without it, or inside [`with_mode`]`(ExecMode::Sequential, ..)`, it
//! runs as a plain iterator.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

thread_local! {
    static MODE: Cell<ExecMode> = const { Cell::new(default_mode()) };
}

const fn default_mode() -> ExecMode {
    if cfg!(feature = "parallel") {
        ExecMode::Parallel
    } else {
        ExecMode::Sequential
    }
}

/// Mode used by [`map`] on the calling thread.
pub fn current_mode() -> ExecMode {
    MODE.with(|m| m.get())
}

/// Runs `f` with the given execution mode on this thread, restoring the
/// previous mode afterwards.
pub fn with_mode<R>(mode: ExecMode, f: impl FnOnce() -> R) -> R {
    struct Restore(ExecMode);
    impl Drop for Restore {
        fn drop(&mut self) {
            MODE.with(|m| m.set(self.0));
        }
    }
    let prev = MODE.with(|m| m.replace(mode));
    let _restore = Restore(prev);
    f()
}

/// Order-preserving map over a slice.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match current_mode() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Order-preserving map over `0..n`.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match current_mode() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = with_mode(ExecMode::Sequential, || map(&xs, |x| x * x));
        let par = with_mode(ExecMode::Parallel, || map(&xs, |x| x * x));
        assert_eq!(seq, par);
        assert_eq!(seq[999], 999 * 999);
    }

    #[test]
    fn with_mode_restores() {
        let before = current_mode();
        with_mode(ExecMode::Sequential, || {
            assert_eq!(current_mode(), ExecMode::Sequential)
        });
        assert_eq!(current_mode(), before);
    }
}
