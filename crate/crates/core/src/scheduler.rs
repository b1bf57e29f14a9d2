//! Dependency-driven task execution over a bounded worker pool.

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Condvar, Mutex};

use crate::error::{Error, Result};

/// Intra-task thread cap; operators that split work by row ranges stay below it.
pub const DEFAULT_INTRA_TASK_THREADS: usize = 4;

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Message,
    SplitEval,
    Absorb,
    ResidualUpdate,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskState {
    Pending,
    Ready,
    Running,
    Done,
    Failed,
    Cancelled,
}

type TaskFn<'a> = Box<dyn FnOnce() -> Result<()> + Send + 'a>;

pub struct TaskNode<'a> {
    pub id: usize,
    pub kind: TaskKind,
    pub deps: Vec<usize>,
    reads: Vec<String>,
    writes: Vec<String>,
    run: TaskFn<'a>,
}

impl<'a> TaskNode<'a> {
    pub fn new(id: usize, kind: TaskKind, deps: Vec<usize>, run: impl FnOnce() -> Result<()> + Send + 'a) -> Self {
        TaskNode {
            id,
            kind,
            deps,
            reads: Vec::new(),
            writes: Vec::new(),
            run: Box::new(run),
        }
    }

    /// Declares a resource read by this task, for the exclusion monitor.
    pub fn reads(mut self, resource: impl Into<String>) -> Self {
        self.reads.push(resource.into());
        self
    }

    pub fn writes(mut self, resource: impl Into<String>) -> Self {
        self.writes.push(resource.into());
        self
    }
}

impl std::fmt::Debug for TaskNode<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskNode")
            .field("id", &self.id)
            .field("kind", &self.kind)
            .field("deps", &self.deps)
            .finish()
    }
}

#[derive(Debug)]
pub struct DagReport {
    /// Task ids in completion order.
    pub completion_order: Vec<usize>,
    /// Task ids in dispatch order.
    pub start_order: Vec<usize>,
    pub states: HashMap<usize, TaskState>,
    /// Times a task started while a conflicting reader or writer was running.
    pub exclusion_violations: usize,
    pub max_concurrency: usize,
    pub error: Option<Error>,
}

impl DagReport {
    pub fn into_result(self) -> Result<DagReport> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(DagReport { error: None, ..self }),
        }
    }
}

struct Shared<'a> {
    queue: VecDeque<usize>,
    runs: Vec<Option<TaskFn<'a>>>,
    remaining_deps: Vec<usize>,
    dependents: Vec<Vec<usize>>,
    state: Vec<TaskState>,
    running: usize,
    finished: usize,
    failed: bool,
    error: Option<Error>,
    completion: Vec<usize>,
    starts: Vec<usize>,
    readers: HashMap<String, usize>,
    writers: HashMap<String, usize>,
    violations: usize,
    max_concurrency: usize,
}

/// Runs every task once, after its dependencies. Returns the first error.
pub fn execute_dag(tasks: Vec<TaskNode<'_>>, workers: usize) -> Result<DagReport> {
    run_dag(tasks, workers)?.into_result()
}

/// Like [`execute_dag`] but returns the report even when a task fails.
/// Submission errors (cycles, unknown ids) are returned directly.
pub fn run_dag(tasks: Vec<TaskNode<'_>>, workers: usize) -> Result<DagReport> {
    if workers == 0 {
        return Err(Error::Param("workers must be at least 1".into()));
    }
    let n = tasks.len();
    let mut pos: HashMap<usize, usize> = HashMap::with_capacity(n);
    for (i, t) in tasks.iter().enumerate() {
        if pos.insert(t.id, i).is_some() {
            return Err(Error::Param(format!("duplicate task id {}", t.id)));
        }
    }
    let mut dependents = vec![Vec::new(); n];
    let mut remaining = vec![0usize; n];
    for (i, t) in tasks.iter().enumerate() {
        for d in &t.deps {
            let &j = pos.get(d).ok_or(Error::UnknownTask(t.id, *d))?;
            dependents[j].push(i);
            remaining[i] += 1;
        }
    }
    check_acyclic(&tasks, &dependents, &remaining)?;

    let ids: Vec<usize> = tasks.iter().map(|t| t.id).collect();
    let mut reads = Vec::with_capacity(n);
    let mut writes = Vec::with_capacity(n);
    let mut runs = Vec::with_capacity(n);
    for t in tasks {
        reads.push(t.reads);
        writes.push(t.writes);
        runs.push(Some(t.run));
    }
    let queue: VecDeque<usize> = (0..n).filter(|&i| remaining[i] == 0).collect();
    let mut state = vec![TaskState::Pending; n];
    for &i in &queue {
        state[i] = TaskState::Ready;
    }
    let shared = Mutex::new(Shared {
        queue,
        runs,
        remaining_deps: remaining,
        dependents,
        state,
        running: 0,
        finished: 0,
        failed: false,
        error: None,
        completion: Vec::with_capacity(n),
        starts: Vec::with_capacity(n),
        readers: HashMap::new(),
        writers: HashMap::new(),
        violations: 0,
        max_concurrency: 0,
    });
    let cv = Condvar::new();
    let ctx = Worker {
        shared: &shared,
        cv: &cv,
        ids: &ids,
        reads: &reads,
        writes: &writes,
        total: n,
    };
    if workers == 1 || n <= 1 {
        ctx.work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers.min(n) {
                s.spawn(|| ctx.work());
            }
        });
    }
    let mut sh = shared.into_inner().unwrap_or_else(|p| p.into_inner());
    for st in sh.state.iter_mut() {
        if matches!(st, TaskState::Pending | TaskState::Ready) {
            *st = TaskState::Cancelled;
        }
    }
    Ok(DagReport {
        completion_order: sh.completion.iter().map(|&i| ids[i]).collect(),
        start_order: sh.starts.iter().map(|&i| ids[i]).collect(),
        states: sh.state.iter().enumerate().map(|(i, s)| (ids[i], *s)).collect(),
        exclusion_violations: sh.violations,
        max_concurrency: sh.max_concurrency,
        error: sh.error.take(),
    })
}

fn check_acyclic(tasks: &[TaskNode<'_>], dependents: &[Vec<usize>], remaining: &[usize]) -> Result<()> {
    let mut indeg = remaining.to_vec();
    let mut queue: VecDeque<usize> = (0..tasks.len()).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop_front() {
        seen += 1;
        for &d in &dependents[i] {
            indeg[d] -= 1;
            if indeg[d] == 0 {
                queue.push_back(d);
            }
        }
    }
    if seen == tasks.len() {
        return Ok(());
    }
    let mut stuck: Vec<usize> = (0..tasks.len()).filter(|&i| indeg[i] > 0).map(|i| tasks[i].id).collect();
    stuck.sort_unstable();
    Err(Error::TaskCycle(stuck))
}

struct Worker<'s, 'a> {
    shared: &'s Mutex<Shared<'a>>,
    cv: &'s Condvar,
    ids: &'s [usize],
    reads: &'s [Vec<String>],
    writes: &'s [Vec<String>],
    total: usize,
}

impl Worker<'_, '_> {
    fn work(&self) {
        let mut guard = self.shared.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if guard.finished == self.total || (guard.failed && guard.running == 0) {
                self.cv.notify_all();
                return;
            }
            if guard.failed {
                guard = self.cv.wait(guard).unwrap_or_else(|p| p.into_inner());
                continue;
            }
            let Some(i) = guard.queue.pop_front() else {
                guard = self.cv.wait(guard).unwrap_or_else(|p| p.into_inner());
                continue;
            };
            let run = guard.runs[i].take().expect("task runs once");
            guard.state[i] = TaskState::Running;
            guard.running += 1;
            guard.max_concurrency = guard.max_concurrency.max(guard.running);
            guard.starts.push(i);
            self.acquire(&mut guard, i);
            drop(guard);

            let outcome = match catch_unwind(AssertUnwindSafe(run)) {
                Ok(r) => r,
                Err(panic) => {
                    let message = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "panic".to_string());
                    Err(Error::Task { id: self.ids[i], message })
                }
            };

            guard = self.shared.lock().unwrap_or_else(|p| p.into_inner());
            self.release(&mut guard, i);
            guard.running -= 1;
            guard.finished += 1;
            match outcome {
                Ok(()) => {
                    guard.state[i] = TaskState::Done;
                    guard.completion.push(i);
                    if !guard.failed {
                        let deps = guard.dependents[i].clone();
                        let mut ready = Vec::new();
                        for d in deps {
                            guard.remaining_deps[d] -= 1;
                            if guard.remaining_deps[d] == 0 {
                                ready.push(d);
                            }
                        }
                        ready.sort_by_key(|&d| self.ids[d]);
                        for d in ready {
                            guard.state[d] = TaskState::Ready;
                            guard.queue.push_back(d);
                        }
                    }
                }
                Err(e) => {
                    guard.state[i] = TaskState::Failed;
                    if !guard.failed {
                        guard.failed = true;
                        guard.error = Some(e);
                        guard.queue.clear();
                    }
                }
            }
            self.cv.notify_all();
        }
    }

    fn acquire(&self, sh: &mut Shared<'_>, i: usize) {
        for r in &self.writes[i] {
            if sh.readers.get(r).copied().unwrap_or(0) > 0 || sh.writers.get(r).copied().unwrap_or(0) > 0 {
                sh.violations += 1;
            }
            *sh.writers.entry(r.clone()).or_default() += 1;
        }
        for r in &self.reads[i] {
            if sh.writers.get(r).copied().unwrap_or(0) > 0 && !self.writes[i].contains(r) {
                sh.violations += 1;
            }
            *sh.readers.entry(r.clone()).or_default() += 1;
        }
    }

    fn release(&self, sh: &mut Shared<'_>, i: usize) {
        for r in &self.writes[i] {
            *sh.writers.get_mut(r).unwrap() -= 1;
        }
        for r in &self.reads[i] {
            *sh.readers.get_mut(r).unwrap() -= 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex as StdMutex;
    use std::time::Duration;

    #[test]
    fn chain_runs_in_order() {
        let log = StdMutex::new(Vec::new());
        let tasks = vec![
            TaskNode::new(2, TaskKind::Absorb, vec![1], || {
                log.lock().unwrap().push('C');
                Ok(())
            }),
            TaskNode::new(0, TaskKind::Message, vec![], || {
                log.lock().unwrap().push('A');
                Ok(())
            }),
            TaskNode::new(1, TaskKind::Message, vec![0], || {
                log.lock().unwrap().push('B');
                Ok(())
            }),
        ];
        let report = execute_dag(tasks, 4).unwrap();
        assert_eq!(report.completion_order, vec![0, 1, 2]);
        assert_eq!(log.into_inner().unwrap(), vec!['A', 'B', 'C']);
    }

    #[test]
    fn diamond_finishes_with_sink() {
        let tasks: Vec<TaskNode> = vec![
            TaskNode::new(0, TaskKind::Message, vec![], || Ok(())),
            TaskNode::new(1, TaskKind::Message, vec![0], || {
                std::thread::sleep(Duration::from_millis(20));
                Ok(())
            }),
            TaskNode::new(2, TaskKind::Message, vec![0], || {
                std::thread::sleep(Duration::from_millis(20));
                Ok(())
            }),
            TaskNode::new(3, TaskKind::SplitEval, vec![1, 2], || Ok(())),
        ];
        let report = execute_dag(tasks, 2).unwrap();
        assert_eq!(report.completion_order[0], 0);
        assert_eq!(*report.completion_order.last().unwrap(), 3);
        assert_eq!(report.max_concurrency, 2);
    }

    #[test]
    fn rejects_cycles_and_unknown_deps() {
        let tasks = vec![
            TaskNode::new(0, TaskKind::Message, vec![1], || Ok(())),
            TaskNode::new(1, TaskKind::Message, vec![0], || Ok(())),
            TaskNode::new(2, TaskKind::Message, vec![], || Ok(())),
        ];
        match execute_dag(tasks, 2) {
            Err(Error::TaskCycle(ids)) => assert_eq!(ids, vec![0, 1]),
            other => panic!("{other:?}"),
        }
        let tasks = vec![TaskNode::new(0, TaskKind::Message, vec![7], || Ok(()))];
        assert!(matches!(execute_dag(tasks, 1), Err(Error::UnknownTask(0, 7))));
    }

    #[test]
    fn failure_cancels_dependents() {
        let ran = AtomicUsize::new(0);
        let tasks = vec![
            TaskNode::new(0, TaskKind::Message, vec![], || Err(Error::Param("boom".into()))),
            TaskNode::new(1, TaskKind::SplitEval, vec![0], || {
                ran.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }),
            TaskNode::new(2, TaskKind::Message, vec![], || panic!("second")),
        ];
        let report = run_dag(tasks, 1).unwrap();
        assert!(matches!(report.error, Some(Error::Param(_))));
        assert_eq!(report.states[&1], TaskState::Cancelled);
        assert_eq!(report.states[&2], TaskState::Cancelled);
        assert_eq!(ran.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn panics_become_errors() {
        let tasks = vec![TaskNode::new(5, TaskKind::Sample, vec![], || panic!("bad sample"))];
        match execute_dag(tasks, 1) {
            Err(Error::Task { id, message }) => {
                assert_eq!(id, 5);
                assert!(message.contains("bad sample"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn declared_writers_never_overlap_readers() {
        let mut tasks = Vec::new();
        for i in 0..8 {
            tasks.push(
                TaskNode::new(i, TaskKind::SplitEval, vec![], || {
                    std::thread::sleep(Duration::from_millis(2));
                    Ok(())
                })
                .reads("fact.s"),
            );
        }
        tasks.push(TaskNode::new(8, TaskKind::ResidualUpdate, (0..8).collect(), || Ok(())).writes("fact.s"));
        let report = execute_dag(tasks, 4).unwrap();
        assert_eq!(report.exclusion_violations, 0);

        let tasks = vec![
            TaskNode::new(0, TaskKind::SplitEval, vec![], || {
                std::thread::sleep(Duration::from_millis(50));
                Ok(())
            })
            .reads("fact.s"),
            TaskNode::new(1, TaskKind::ResidualUpdate, vec![], || {
                std::thread::sleep(Duration::from_millis(50));
                Ok(())
            })
            .writes("fact.s"),
        ];
        let report = execute_dag(tasks, 2).unwrap();
        assert_eq!(report.exclusion_violations, 1);
    }

    #[test]
    fn single_worker_matches_many() {
        let make = |sink: &'static StdMutex<Vec<usize>>| -> Vec<TaskNode<'static>> {
            (0..20)
                .map(|i| {
                    let deps = if i >= 4 { vec![i - 4] } else { vec![] };
                    TaskNode::new(i, TaskKind::Message, deps, move || {
                        sink.lock().unwrap().push(i * i);
                        Ok(())
                    })
                })
                .collect()
        };
        static A: StdMutex<Vec<usize>> = StdMutex::new(Vec::new());
        static B: StdMutex<Vec<usize>> = StdMutex::new(Vec::new());
        let one = execute_dag(make(&A), 1).unwrap();
        execute_dag(make(&B), 8).unwrap();
        assert_eq!(one.completion_order, (0..20).collect::<Vec<_>>());
        let mut a = A.lock().unwrap().clone();
        let mut b = B.lock().unwrap().clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
}
