//! Tiny deterministic worker pool: results are collected by item index, so
//! the output is independent of the thread count.

use sfsa_core::error::Result;

/// Runs `f(0..n)` across at most `threads` scoped workers and returns the
/// results in index order. `threads == 1` degenerates to a plain loop.
pub fn parallel_map<T, F>(threads: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let workers = threads.min(n);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_ref = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots_ref.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}
