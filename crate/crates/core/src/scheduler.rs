//! Combinatorial partial supervision: which three heads are trained on a
//! given iteration.
//!
//! The schedule walks through all `C(5,3) = 10` head triples once per pass,
//! in an order re-shuffled at the start of every pass. Over any `10m`
//! consecutive calls starting at a pass boundary each triple appears
//! exactly `m` times and each head exactly `6m` times.

use std::fmt;

use rand::seq::SliceRandom;

use crate::model::Task;
use crate::seed::{self, stream};

pub const SUBSET_SIZE: usize = 3;
pub const SUBSET_COUNT: usize = 10;

/// Three distinct tasks in canonical (enum) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActiveSubset([Task; SUBSET_SIZE]);

impl ActiveSubset {
    /// Sorts the tasks into canonical order; `None` if any repeat.
    pub fn new(mut tasks: [Task; SUBSET_SIZE]) -> Option<Self> {
        tasks.sort();
        if tasks[0] == tasks[1] || tasks[1] == tasks[2] {
            return None;
        }
        Some(Self(tasks))
    }

    pub fn tasks(&self) -> [Task; SUBSET_SIZE] {
        self.0
    }

    pub fn contains(&self, task: Task) -> bool {
        self.0.contains(&task)
    }

    /// Product of the class counts, i.e. the joint table size.
    pub fn joint_size(&self) -> usize {
        self.0.iter().map(|t| t.class_count()).product()
    }
}

impl fmt::Display for ActiveSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.0;
        write!(f, "{{{a},{b},{c}}}")
    }
}

/// All three-head subsets in lexicographic order.
pub fn enumerate_subsets() -> Vec<ActiveSubset> {
    let mut out = Vec::with_capacity(SUBSET_COUNT);
    for i in 0..Task::COUNT {
        for j in i + 1..Task::COUNT {
            for k in j + 1..Task::COUNT {
                out.push(ActiveSubset([Task::ALL[i], Task::ALL[j], Task::ALL[k]]));
            }
        }
    }
    out
}

/// Cycles through every subset once per pass in a seeded order.
#[derive(Debug, Clone)]
pub struct SubsetSchedule {
    cycle: Vec<ActiveSubset>,
    order: Vec<usize>,
    cursor: usize,
    pass: u64,
    permutation_seed: u64,
}

impl SubsetSchedule {
    pub fn new(permutation_seed: u64) -> Self {
        Self {
            cycle: enumerate_subsets(),
            order: Vec::new(),
            cursor: 0,
            pass: 0,
            permutation_seed,
        }
    }

    /// Completed passes so far.
    pub fn passes(&self) -> u64 {
        self.pass
    }

    pub fn next_subset(&mut self) -> ActiveSubset {
        if self.cursor == 0 {
            self.order = (0..self.cycle.len()).collect();
            let mut rng = seed::rng(self.permutation_seed, &[stream::SCHEDULE, self.pass]);
            self.order.shuffle(&mut rng);
        }
        let subset = self.cycle[self.order[self.cursor]];
        self.cursor += 1;
        if self.cursor == self.cycle.len() {
            self.cursor = 0;
            self.pass += 1;
        }
        subset
    }
}

impl Iterator for SubsetSchedule {
    type Item = ActiveSubset;

    fn next(&mut self) -> Option<ActiveSubset> {
        Some(self.next_subset())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, HashMap};

    use super::*;

    #[test]
    fn ten_subsets_each_task_in_six() {
        let subsets = enumerate_subsets();
        assert_eq!(subsets.len(), 10);
        for t in Task::ALL {
            assert_eq!(subsets.iter().filter(|s| s.contains(t)).count(), 6);
        }
    }

    #[test]
    fn matches_bitmask_enumeration() {
        // every 5-bit mask with exactly three bits set, in lexicographic order
        let mut brute: Vec<Vec<usize>> = (0u32..32)
            .filter(|m| m.count_ones() == 3)
            .map(|m| (0..5).filter(|b| m & (1 << b) != 0).collect())
            .collect();
        brute.sort();
        let ours: Vec<Vec<usize>> = enumerate_subsets()
            .iter()
            .map(|s| s.tasks().iter().map(|t| t.index()).collect())
            .collect();
        assert_eq!(ours, brute);
    }

    #[test]
    fn one_pass_has_no_repeats() {
        let mut s = SubsetSchedule::new(3);
        let seen: BTreeSet<_> = (0..10).map(|_| s.next_subset()).collect();
        assert_eq!(seen.len(), 10);
        assert_eq!(s.passes(), 1);
    }

    #[test]
    fn thirty_calls_eighteen_each() {
        let mut counts = HashMap::new();
        for subset in SubsetSchedule::new(11).take(30) {
            for t in subset.tasks() {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        for t in Task::ALL {
            assert_eq!(counts[&t], 18);
        }
    }

    #[test]
    fn deterministic_and_reshuffled() {
        let a: Vec<_> = SubsetSchedule::new(5).take(40).collect();
        let b: Vec<_> = SubsetSchedule::new(5).take(40).collect();
        assert_eq!(a, b);
        let c: Vec<_> = SubsetSchedule::new(6).take(40).collect();
        assert_ne!(a, c);
        // passes are drawn independently, so at least one differs from the first
        assert!((1..4).any(|p| a[p * 10..(p + 1) * 10] != a[..10]));
    }

    #[test]
    fn subset_canonicalizes() {
        let s = ActiveSubset::new([Task::Ap, Task::Who4, Task::Hs]).unwrap();
        assert_eq!(s.tasks(), [Task::Who4, Task::Hs, Task::Ap]);
        assert_eq!(s.joint_size(), 4 * 4 * 3);
        assert!(ActiveSubset::new([Task::Ap, Task::Ap, Task::Hs]).is_none());
    }
}
