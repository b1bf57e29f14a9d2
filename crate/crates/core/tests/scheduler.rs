use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use factorboost::scheduler::{execute_dag, run_dag, TaskKind, TaskNode, TaskState};
use factorboost::Error;

fn diamond_chain(levels: usize, width: usize, log: &Mutex<Vec<usize>>) -> Vec<TaskNode<'_>> {
    let mut tasks = Vec::new();
    for l in 0..levels {
        for w in 0..width {
            let id = l * width + w;
            let deps = if l == 0 { vec![] } else { ((l - 1) * width..l * width).collect() };
            tasks.push(TaskNode::new(id, TaskKind::Message, deps, move || {
                log.lock().unwrap().push(id);
                Ok(())
            }));
        }
    }
    tasks
}

#[test]
fn every_task_runs_after_its_dependencies() {
    for workers in [1, 2, 8] {
        let log = Mutex::new(Vec::new());
        let report = execute_dag(diamond_chain(5, 6, &log), workers).unwrap();
        let order = log.into_inner().unwrap();
        assert_eq!(order.len(), 30);
        let pos = |id: usize| order.iter().position(|&x| x == id).unwrap();
        for id in 6..30 {
            let level = id / 6;
            for dep in (level - 1) * 6..level * 6 {
                assert!(pos(dep) < pos(id), "{dep} ran after {id} with {workers} workers");
            }
        }
        assert!(report.states.values().all(|s| *s == TaskState::Done));
        assert!(report.max_concurrency <= workers.min(6));
    }
}

fn rw_tasks(hits: &AtomicUsize, ordered: bool) -> Vec<TaskNode<'_>> {
    // Every fourth task writes; with `ordered`, each task depends on the
    // writer before it and each writer on every task since the previous one.
    (0..40)
        .map(|id| {
            let deps = if !ordered || id == 0 {
                vec![]
            } else if id % 4 == 0 {
                (id - 4..id).collect()
            } else {
                vec![id - id % 4]
            };
            let node = TaskNode::new(id, TaskKind::ResidualUpdate, deps, move || {
                hits.fetch_add(1, Ordering::Relaxed);
                std::thread::sleep(std::time::Duration::from_micros(500));
                Ok(())
            });
            if id % 4 == 0 {
                node.writes("F.pred")
            } else {
                node.reads("F.pred")
            }
        })
        .collect()
}

#[test]
fn ordered_writers_never_overlap_readers() {
    let hits = AtomicUsize::new(0);
    let report = execute_dag(rw_tasks(&hits, true), 8).unwrap();
    assert_eq!(hits.load(Ordering::Relaxed), 40);
    assert_eq!(report.exclusion_violations, 0);
    assert!(report.max_concurrency > 1);
}

#[test]
fn unordered_conflicts_are_reported() {
    let hits = AtomicUsize::new(0);
    let report = execute_dag(rw_tasks(&hits, false), 8).unwrap();
    assert_eq!(hits.load(Ordering::Relaxed), 40);
    assert!(report.exclusion_violations > 0);
}

#[test]
fn a_failure_stops_dispatch() {
    let tasks = vec![
        TaskNode::new(0, TaskKind::SplitEval, vec![], || Err(Error::Param("boom".into()))),
        TaskNode::new(1, TaskKind::Absorb, vec![0], || Ok(())),
        TaskNode::new(2, TaskKind::Sample, vec![1], || Ok(())),
    ];
    let report = run_dag(tasks, 2).unwrap();
    assert!(matches!(report.error, Some(Error::Param(_))));
    assert_eq!(report.states[&0], TaskState::Failed);
    assert_eq!(report.states[&1], TaskState::Cancelled);
    assert_eq!(report.states[&2], TaskState::Cancelled);
    assert!(report.completion_order.is_empty());
}

#[test]
fn cycles_are_rejected_before_running() {
    let ran = AtomicUsize::new(0);
    let tasks = vec![
        TaskNode::new(0, TaskKind::Message, vec![1], || {
            ran.fetch_add(1, Ordering::Relaxed);
            Ok(())
        }),
        TaskNode::new(1, TaskKind::Message, vec![0], || {
            ran.fetch_add(1, Ordering::Relaxed);
            Ok(())
        }),
    ];
    assert!(run_dag(tasks, 2).is_err());
    assert_eq!(ran.load(Ordering::Relaxed), 0);
}
