use crashqc_core::backend::{BackendError, ErrorCategory};
use crashqc_core::ensemble::{aggregate, BackendResult, EnsemblePolicy, Outcome};
use crashqc_core::llm::{Answer, Verdict};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Cell {
    Yes,
    No,
    Err,
}

const CELLS: [Cell; 3] = [Cell::Yes, Cell::No, Cell::Err];

fn result(id: &str, c: Cell) -> BackendResult {
    let verdict = |answer| {
        BackendResult::Verdict(Verdict {
            backend_id: id.into(),
            record_id: "R1".into(),
            answer,
            probability: 0.5,
            explanation: "x".into(),
            latency_ms: 1,
            prompt_version: "v3".into(),
            raw_response: String::new(),
        })
    };
    match c {
        Cell::Yes => verdict(Answer::Yes),
        Cell::No => verdict(Answer::No),
        Cell::Err => BackendResult::Error(BackendError::new(id, ErrorCategory::Parse, "bad json")),
    }
}

fn combos(k: usize) -> Vec<Vec<Cell>> {
    let mut out = vec![vec![]];
    for _ in 0..k {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                CELLS.iter().map(move |c| {
                    let mut p = prefix.clone();
                    p.push(*c);
                    p
                })
            })
            .collect();
    }
    out
}

/// The documented rules, written out independently.
fn expected(cells: &[Cell], policy: &EnsemblePolicy, ids: &[&str]) -> Outcome {
    if cells.contains(&Cell::Err) {
        return Outcome::Flagged;
    }
    let yes = cells.iter().filter(|c| **c == Cell::Yes).count();
    let no = cells.len() - yes;
    let auto = |c: Cell| {
        if c == Cell::Yes {
            Outcome::AutoYes
        } else {
            Outcome::AutoNo
        }
    };
    match policy {
        EnsemblePolicy::Unanimous => {
            if no == 0 {
                Outcome::AutoYes
            } else if yes == 0 {
                Outcome::AutoNo
            } else {
                Outcome::Flagged
            }
        }
        EnsemblePolicy::Majority { quorum } => match (yes >= *quorum, no >= *quorum) {
            (true, false) => Outcome::AutoYes,
            (false, true) => Outcome::AutoNo,
            _ => Outcome::Flagged,
        },
        EnsemblePolicy::PrimaryWithVerifiers { primary_backend_id } => {
            let p = ids.iter().position(|id| id == primary_backend_id).unwrap();
            if cells.iter().all(|c| *c == cells[p]) {
                auto(cells[p])
            } else {
                Outcome::Flagged
            }
        }
    }
}

fn policies(ids: &[&str]) -> Vec<EnsemblePolicy> {
    let mut p = vec![EnsemblePolicy::Unanimous];
    p.extend((1..=ids.len()).map(|quorum| EnsemblePolicy::Majority { quorum }));
    p.extend(ids.iter().map(|id| EnsemblePolicy::PrimaryWithVerifiers {
        primary_backend_id: id.to_string(),
    }));
    p
}

fn check_panel(ids: &[&str]) -> usize {
    let mut cases = 0;
    for policy in policies(ids) {
        for cells in combos(ids.len()) {
            let results: Vec<BackendResult> = ids
                .iter()
                .zip(&cells)
                .map(|(id, c)| result(id, *c))
                .collect();
            let want = expected(&cells, &policy, ids);
            let got = aggregate(&results, &policy).unwrap();
            assert_eq!(got.outcome, want, "{policy:?} {cells:?}: {}", got.reason);
            assert!(!got.reason.is_empty());
            // verdicts come back sorted by backend id whatever the input order
            let order: Vec<&str> = got.verdicts.iter().map(|v| v.backend_id()).collect();
            let mut sorted = ids.to_vec();
            sorted.sort();
            assert_eq!(order, sorted);
            let mut reversed = results.clone();
            reversed.reverse();
            assert_eq!(aggregate(&reversed, &policy).unwrap(), got);
            cases += 1;
        }
    }
    cases
}

#[test]
fn two_backend_truth_table() {
    // 3^2 answer combinations x (unanimous + 2 quorums + 2 primaries)
    assert_eq!(check_panel(&["llama", "roberta"]), 9 * 5);
}

#[test]
fn three_backend_truth_table() {
    assert_eq!(check_panel(&["logreg", "llama", "roberta"]), 27 * 7);
}

#[test]
fn majority_two_of_three_examples() {
    let ids = ["a", "b", "c"];
    let r: Vec<BackendResult> = ids
        .iter()
        .zip([Cell::Yes, Cell::Yes, Cell::No])
        .map(|(id, c)| result(id, c))
        .collect();
    let d = aggregate(&r, &EnsemblePolicy::Majority { quorum: 2 }).unwrap();
    assert_eq!(d.outcome, Outcome::AutoYes);
    let d = aggregate(&r, &EnsemblePolicy::Unanimous).unwrap();
    assert_eq!(d.outcome, Outcome::Flagged);
}
