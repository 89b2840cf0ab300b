//! Fenwick tree over per-sub-bag free counts, for uniform choice among all
//! free slots of a bag in logarithmic time.

use alloc::vec::Vec;

#[derive(Debug, Default)]
pub(crate) struct Fenwick {
    // 1-based; tree[0] unused.
    tree: Vec<u64>,
}

impl Fenwick {
    pub(crate) fn new() -> Self {
        Fenwick { tree: alloc::vec![0] }
    }

    pub(crate) fn len(&self) -> usize {
        self.tree.len() - 1
    }

    fn prefix(&self, mut i: usize) -> u64 {
        let mut sum = 0;
        while i > 0 {
            sum += self.tree[i];
            i &= i - 1;
        }
        sum
    }

    /// Appends an element with the given value.
    pub(crate) fn push(&mut self, value: u64) {
        let n = self.tree.len();
        let low = n & n.wrapping_neg();
        let covered = self.prefix(n - 1) - self.prefix(n - low);
        self.tree.push(value + covered);
    }

    pub(crate) fn add(&mut self, index: usize, delta: i64) {
        let mut i = index + 1;
        while i < self.tree.len() {
            self.tree[i] = self.tree[i].wrapping_add(delta as u64);
            i += i & i.wrapping_neg();
        }
    }

    /// Element index holding the `k`-th unit (0-based) and the rank of that
    /// unit within the element. `k` must be below the total.
    pub(crate) fn find(&self, mut k: u64) -> (usize, u64) {
        let n = self.len();
        let mut pos = 0;
        let mut step = if n == 0 { 0 } else { 1usize << (usize::BITS - 1 - n.leading_zeros()) };
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= k {
                pos = next;
                k -= self.tree[next];
            }
            step >>= 1;
        }
        (pos, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn find_matches_linear_scan() {
        let values = [3u64, 0, 5, 1, 0, 0, 7, 2, 9, 4, 0, 1];
        let mut fw = Fenwick::new();
        for &v in &values {
            fw.push(v);
        }
        fw.add(3, 2);
        fw.add(0, -1);
        let mut vals = values;
        vals[3] += 2;
        vals[0] -= 1;
        let total: u64 = vals.iter().sum();
        let mut k = 0;
        for (i, &v) in vals.iter().enumerate() {
            for rank in 0..v {
                assert_eq!(fw.find(k), (i, rank));
                k += 1;
            }
        }
        assert_eq!(k, total);
    }
}
