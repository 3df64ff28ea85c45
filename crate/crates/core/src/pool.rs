//! Bounded, order-preserving parallel map over scoped threads.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

/// Applies `work` to every item with at most `max_in_flight` invocations
/// running at once, and hands results to `sink` strictly in input order as
/// soon as each prefix is complete.
pub fn ordered_for_each<T, R, W, S>(items: &[T], max_in_flight: NonZeroUsize, work: W, mut sink: S)
where
    T: Sync,
    R: Send,
    W: Fn(usize, &T) -> R + Sync,
    S: FnMut(usize, R),
{
    if items.is_empty() {
        return;
    }
    let workers = max_in_flight.get().min(items.len());
    if workers == 1 {
        for (i, item) in items.iter().enumerate() {
            sink(i, work(i, item));
        }
        return;
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let work = &work;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, work(i, &items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut emit = 0;
        for (i, r) in rx {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&emit) {
                sink(emit, r);
                emit += 1;
            }
        }
    });
}

/// Collecting form of [`ordered_for_each`].
pub fn ordered_map<T, R, W>(items: &[T], max_in_flight: NonZeroUsize, work: W) -> Vec<R>
where
    T: Sync,
    R: Send,
    W: Fn(usize, &T) -> R + Sync,
{
    let mut out = Vec::with_capacity(items.len());
    ordered_for_each(items, max_in_flight, work, |_, r| out.push(r));
    out
}
