//! Static activation-buffer reuse plan.
//!
//! Given every activation of one forward pass with its size and live interval
//! (inclusive step indices), assigns each to a preallocated arena so that no
//! two simultaneously live tensors share one. Greedy interval coloring in
//! order of definition reaches the maximum number of overlapping intervals,
//! which is the minimum arena count.

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TensorLifetime {
    pub name: String,
    pub numel: usize,
    /// Step that produces the tensor.
    pub first: usize,
    /// Last step that reads it.
    pub last: usize,
}

impl TensorLifetime {
    pub fn overlaps(&self, other: &TensorLifetime) -> bool {
        self.first <= other.last && other.first <= self.last
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BufferPlan {
    /// Capacity of each arena, in elements.
    pub arena_sizes: Vec<usize>,
    /// Arena index for each input tensor, in input order.
    pub assignment: Vec<usize>,
}

impl BufferPlan {
    pub fn arena_count(&self) -> usize {
        self.arena_sizes.len()
    }

    pub fn planned_elements(&self) -> usize {
        self.arena_sizes.iter().sum()
    }
}

/// Elements needed with one allocation per tensor.
pub fn naive_elements(tensors: &[TensorLifetime]) -> usize {
    tensors.iter().map(|t| t.numel).sum()
}

pub fn buffer_plan(tensors: &[TensorLifetime]) -> BufferPlan {
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    order.sort_by_key(|&i| (tensors[i].first, std::cmp::Reverse(tensors[i].numel), i));

    let mut arena_sizes: Vec<usize> = Vec::new();
    let mut busy_until: Vec<usize> = Vec::new();
    let mut assignment = vec![usize::MAX; tensors.len()];
    for i in order {
        let t = &tensors[i];
        let free = (0..arena_sizes.len()).filter(|&a| busy_until[a] < t.first);
        // Smallest free arena that already fits, else the largest free one (grown).
        let fitting = free.clone().filter(|&a| arena_sizes[a] >= t.numel).min_by_key(|&a| arena_sizes[a]);
        let chosen = fitting.or_else(|| free.max_by_key(|&a| arena_sizes[a]));
        let a = match chosen {
            Some(a) => a,
            None => {
                arena_sizes.push(0);
                busy_until.push(0);
                arena_sizes.len() - 1
            }
        };
        arena_sizes[a] = arena_sizes[a].max(t.numel);
        busy_until[a] = t.last;
        assignment[i] = a;
    }
    BufferPlan { arena_sizes, assignment }
}
