//! Exact 0/1 knapsack by dynamic programming.
//!
//! The table runs over item suffixes: `best_i(c)` is the best value reachable
//! with items `i..n` and capacity `c`. Scanning items from last to first with
//! a rolling `(capacity + 1)`-wide array, a choice bit records whether taking
//! item `i` is optimal at `(i, c)`; ties favour taking. The backtrace then
//! walks items in increasing index order, so among equally valued optima the
//! one that takes lower indices wins.

/// Selects a value-maximizing subset of `(value, cost)` items whose total
/// cost fits in `capacity`. Returns the chosen indices in increasing order.
///
/// Values must be finite and nonnegative; costs must be at least 1.
pub fn solve(values: &[f64], costs: &[usize], capacity: usize) -> Vec<usize> {
    assert_eq!(values.len(), costs.len(), "one cost per value");
    let n = values.len();
    if n == 0 || capacity == 0 {
        return Vec::new();
    }
    // no solution can use more than the total cost, so trim the table
    let total_cost: usize = costs.iter().fold(0usize, |a, &c| a.saturating_add(c));
    let cap = capacity.min(total_cost);
    let width = cap + 1;

    let mut best = vec![0.0f64; width];
    let mut choice = BitMatrix::new(n, width);
    for i in (0..n).rev() {
        let (v, w) = (values[i], costs[i]);
        debug_assert!(w >= 1, "item {i} has zero cost");
        if w > cap {
            continue;
        }
        for c in (w..width).rev() {
            let take = v + best[c - w];
            if take >= best[c] {
                best[c] = take;
                choice.set(i, c);
            }
        }
    }

    let mut picked = Vec::new();
    let mut c = cap;
    for (i, &cost) in costs.iter().enumerate().take(n) {
        if choice.get(i, c) {
            picked.push(i);
            c -= cost;
        }
    }
    picked
}

/// Row-per-item bitset, `n · width` bits.
struct BitMatrix {
    width: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    fn new(rows: usize, width: usize) -> Self {
        Self {
            width,
            words: vec![0; (rows * width).div_ceil(64)],
        }
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize) {
        let k = r * self.width + c;
        self.words[k / 64] |= 1 << (k % 64);
    }

    #[inline]
    fn get(&self, r: usize, c: usize) -> bool {
        let k = r * self.width + c;
        self.words[k / 64] >> (k % 64) & 1 == 1
    }
}
