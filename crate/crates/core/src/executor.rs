//! Local work-queue executor.
//!
//! Every parallel stage hands the executor a slice of independent tasks and
//! gets results back in task order, so reductions that follow are identical
//! for any worker count. Stages are separated by barriers: `map` returns only
//! after every task of the call has finished.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Wall-clock span of one executed task, relative to executor creation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpan {
    pub stage: String,
    pub index: usize,
    pub start: Duration,
    pub end: Duration,
}

#[derive(Debug)]
pub struct Executor {
    n_workers: usize,
    origin: Instant,
    tasks_run: AtomicUsize,
    stage: Mutex<String>,
    spans: Option<Mutex<Vec<TaskSpan>>>,
}

impl Default for Executor {
    fn default() -> Self {
        Self::new(1)
    }
}

impl Executor {
    pub fn new(n_workers: usize) -> Self {
        Self {
            n_workers: n_workers.max(1),
            origin: Instant::now(),
            tasks_run: AtomicUsize::new(0),
            stage: Mutex::new(String::new()),
            spans: None,
        }
    }

    /// Like `new`, but records a `TaskSpan` for every task.
    pub fn with_task_log(n_workers: usize) -> Self {
        Self {
            spans: Some(Mutex::new(Vec::new())),
            ..Self::new(n_workers)
        }
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    /// Labels subsequent task spans.
    pub fn set_stage(&self, stage: &str) {
        *self.stage.lock().unwrap() = stage.to_string();
    }

    /// Number of tasks executed since the last call.
    pub fn take_task_count(&self) -> usize {
        self.tasks_run.swap(0, Ordering::Relaxed)
    }

    pub fn elapsed(&self) -> Duration {
        self.origin.elapsed()
    }

    pub fn task_spans(&self) -> Vec<TaskSpan> {
        self.spans
            .as_ref()
            .map(|s| s.lock().unwrap().clone())
            .unwrap_or_default()
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync,
    {
        self.map_range(items.len(), |i| f(i, &items[i]))
    }

    /// Runs `f(0..n)` on the worker pool; results come back in index order.
    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        self.tasks_run.fetch_add(n, Ordering::Relaxed);
        let stage = self.spans.as_ref().map(|_| self.stage.lock().unwrap().clone());
        let run = |i: usize| -> R {
            let start = self.origin.elapsed();
            let r = f(i);
            if let (Some(spans), Some(stage)) = (&self.spans, &stage) {
                let end = self.origin.elapsed();
                spans.lock().unwrap().push(TaskSpan {
                    stage: stage.clone(),
                    index: i,
                    start,
                    end,
                });
            }
            r
        };

        let workers = self.n_workers.min(n);
        if workers <= 1 {
            return (0..n).map(run).collect();
        }

        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    scope.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= n {
                                break;
                            }
                            done.push((i, run(i)));
                        }
                        done
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("executor worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|r| r.expect("every task index is claimed once"))
            .collect()
    }
}
