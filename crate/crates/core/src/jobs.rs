//! Deterministic fan-out of independent work units.
//!
//! Each unit owns a derived seed, so the output is a pure function of the
//! input and results are collected in index order: running with 1 worker or
//! 16 produces identical bytes.

/// Run `f` over `0..n` with up to `workers` OS threads and return results in
/// index order. `workers <= 1` (and wasm targets, which have no threads)
/// runs inline.
pub fn run_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if n == 0 {
        return Vec::new();
    }
    #[cfg(target_arch = "wasm32")]
    {
        return (0..n).map(f).collect();
    }
    #[cfg(not(target_arch = "wasm32"))]
    {
        let workers = workers.max(1).min(n);
        if workers == 1 {
            return (0..n).map(f).collect();
        }
        let next = std::sync::atomic::AtomicUsize::new(0);
        let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
        let slot_ptr = SendPtr(slots.as_mut_ptr());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let next = &next;
                let f = &f;
                let slot_ptr = &slot_ptr;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let out = f(i);
                    // Safety: each index is claimed by exactly one worker and
                    // the vector outlives the scope.
                    unsafe { *slot_ptr.0.add(i) = Some(out) };
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("job completed"))
            .collect()
    }
}

#[cfg(not(target_arch = "wasm32"))]
struct SendPtr<T>(*mut Option<T>);
#[cfg(not(target_arch = "wasm32"))]
unsafe impl<T: Send> Sync for SendPtr<T> {}
#[cfg(not(target_arch = "wasm32"))]
unsafe impl<T: Send> Send for SendPtr<T> {}
