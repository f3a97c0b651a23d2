use crate::tabular::Interval;

/// A stored column range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalEntry {
    pub range: Interval,
    pub dataset: u32,
    pub column: u32,
}

/// Static interval tree: entries sorted by `lo` form an implicit balanced
/// BST (midpoint of each index range is the node), each node annotated with
/// the largest `hi` in its subtree.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IntervalTree {
    entries: Vec<IntervalEntry>,
    max_hi: Vec<f64>,
}

impl IntervalTree {
    pub fn new(mut entries: Vec<IntervalEntry>) -> Self {
        entries.sort_by(|a, b| {
            a.range
                .lo
                .total_cmp(&b.range.lo)
                .then(a.range.hi.total_cmp(&b.range.hi))
                .then(a.dataset.cmp(&b.dataset))
                .then(a.column.cmp(&b.column))
        });
        let mut max_hi = vec![f64::NEG_INFINITY; entries.len()];
        fill_max(&entries, &mut max_hi, 0, entries.len());
        IntervalTree { entries, max_hi }
    }

    pub fn entries(&self) -> &[IntervalEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Longest root-to-leaf path.
    pub fn height(&self) -> usize {
        fn h(l: usize, r: usize) -> usize {
            if l >= r {
                0
            } else {
                let m = l + (r - l) / 2;
                1 + h(l, m).max(h(m + 1, r))
            }
        }
        h(0, self.entries.len())
    }

    /// Every entry whose closed range intersects `probe`.
    pub fn overlapping(&self, probe: Interval) -> Vec<&IntervalEntry> {
        let mut out = Vec::new();
        self.visit(0, self.entries.len(), probe, &mut out);
        out
    }

    fn visit<'a>(&'a self, l: usize, r: usize, probe: Interval, out: &mut Vec<&'a IntervalEntry>) {
        if l >= r {
            return;
        }
        let m = l + (r - l) / 2;
        if self.max_hi[m] < probe.lo {
            return;
        }
        self.visit(l, m, probe, out);
        let e = &self.entries[m];
        if e.range.lo <= probe.hi {
            if e.range.hi >= probe.lo {
                out.push(e);
            }
            self.visit(m + 1, r, probe, out);
        }
    }
}

fn fill_max(entries: &[IntervalEntry], max_hi: &mut [f64], l: usize, r: usize) -> f64 {
    if l >= r {
        return f64::NEG_INFINITY;
    }
    let m = l + (r - l) / 2;
    let v = entries[m]
        .range
        .hi
        .max(fill_max(entries, max_hi, l, m))
        .max(fill_max(entries, max_hi, m + 1, r));
    max_hi[m] = v;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(lo: f64, hi: f64, d: u32) -> IntervalEntry {
        IntervalEntry {
            range: Interval { lo, hi },
            dataset: d,
            column: 0,
        }
    }

    #[test]
    fn disjoint_probe_is_empty() {
        let t = IntervalTree::new(vec![entry(1.0, 6.0, 0), entry(10.0, 20.0, 1)]);
        assert!(t.overlapping(Interval { lo: 7.0, hi: 9.0 }).is_empty());
        assert_eq!(t.overlapping(Interval { lo: 6.0, hi: 10.0 }).len(), 2);
        assert_eq!(t.overlapping(Interval::everything()).len(), 2);
    }

    #[test]
    fn balanced_height() {
        let t = IntervalTree::new((0..1000).map(|i| entry(i as f64, i as f64 + 3.0, i)).collect());
        assert!(t.height() <= 10);
    }

    proptest! {
        #[test]
        fn matches_linear_scan(
            raw in prop::collection::vec((-50.0f64..50.0, 0.0f64..30.0), 0..80),
            lo in -60.0f64..60.0,
            w in 0.0f64..40.0,
        ) {
            let entries: Vec<_> = raw.iter().enumerate().map(|(i, &(a, len))| entry(a, a + len, i as u32)).collect();
            let t = IntervalTree::new(entries.clone());
            let probe = Interval { lo, hi: lo + w };
            let mut got: Vec<u32> = t.overlapping(probe).iter().map(|e| e.dataset).collect();
            got.sort_unstable();
            let want: Vec<u32> = entries.iter().filter(|e| e.range.overlaps(&probe)).map(|e| e.dataset).collect();
            prop_assert_eq!(got, want);
        }
    }
}
