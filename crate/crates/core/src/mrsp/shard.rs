use std::ops::Range;

use crate::error::{invalid, Result};

/// Contiguous, balanced assignment of `n` items to `k` workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    ranges: Vec<Range<usize>>,
}

impl ShardPlan {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn sp_degree(&self) -> usize {
        self.ranges.len()
    }

    pub fn num_items(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    pub(crate) fn expect_items(&self, n: usize, what: &str) -> Result<()> {
        if self.num_items() != n {
            return Err(invalid!("shard plan covers {} items but the {what} has {n}", self.num_items()));
        }
        Ok(())
    }
}

/// The first `n mod k` ranges get `⌈n/k⌉` items, the rest `⌊n/k⌋`.
pub fn plan_shards(n_items: usize, sp_degree: usize) -> Result<ShardPlan> {
    if sp_degree == 0 {
        return Err(invalid!("sp_degree must be at least 1"));
    }
    let base = n_items / sp_degree;
    let extra = n_items % sp_degree;
    let mut start = 0;
    let ranges = (0..sp_degree)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect();
    Ok(ShardPlan { ranges })
}
