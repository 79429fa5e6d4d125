use std::cmp::Ordering;

/// Compressed neighbor lists: row `i` is `neighbors[offsets[i]..offsets[i+1]]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Neighborhood {
    pub offsets: Vec<usize>,
    pub neighbors: Vec<usize>,
}

impl Neighborhood {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for l in lists {
            neighbors.extend_from_slice(l);
            offsets.push(neighbors.len());
        }
        Neighborhood { offsets, neighbors }
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Each list prefixed with its own index.
    pub fn with_self(&self) -> Self {
        let lists: Vec<Vec<usize>> = (0..self.len())
            .map(|i| std::iter::once(i).chain(self.of(i).iter().copied()).collect())
            .collect();
        Self::from_lists(&lists)
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Exact k nearest neighbors of every point, excluding the point itself,
/// ordered by (distance, index).
pub fn knn(positions: &[[f64; 3]], k: usize) -> Neighborhood {
    let n = positions.len();
    let k = k.min(n.saturating_sub(1));
    let mut lists = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(&positions[i], &positions[j]), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
        };
        if k > 0 && k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let mut top: Vec<(f64, usize)> = cand.iter().take(k).copied().collect();
        top.sort_by(cmp);
        lists.push(top.into_iter().map(|(_, j)| j).collect::<Vec<_>>());
    }
    Neighborhood::from_lists(&lists)
}

/// Undirected version of a neighbor graph, each list sorted ascending.
pub fn symmetric_adjacency(nb: &Neighborhood) -> Neighborhood {
    let n = nb.len();
    let mut lists = vec![Vec::new(); n];
    for i in 0..n {
        for &j in nb.of(i) {
            lists[i].push(j);
            lists[j].push(i);
        }
    }
    for l in &mut lists {
        l.sort_unstable();
        l.dedup();
    }
    Neighborhood::from_lists(&lists)
}
