use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};

/// Runs `work` over `items` on up to `workers` threads and hands each result
/// to `done` on the calling thread, one at a time. `done` returns false to
/// stop handing out further items; items already running still finish and
/// are still handed to `done`.
pub(crate) fn run_pool<T, R, W, D>(items: Vec<T>, workers: usize, work: W, mut done: D)
where
    T: Send,
    R: Send,
    W: Fn(T) -> R + Sync,
    D: FnMut(R) -> bool,
{
    let queue = Mutex::new(items.into_iter().collect::<VecDeque<T>>());
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..workers.max(1) {
            let tx = tx.clone();
            let (queue, stop, work) = (&queue, &stop, &work);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Some(item) = queue.lock().unwrap().pop_front() else { break };
                if tx.send(work(item)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for r in rx {
            if !done(r) {
                stop.store(true, Ordering::SeqCst);
            }
        }
    });
}
