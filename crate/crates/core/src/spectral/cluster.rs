use super::CorrelationMatrix;

/// Leaf order of an average-linkage agglomerative clustering of the
/// features under the distance `1 - |C_ij|`.
///
/// Ties are broken toward the pair whose smallest original indices come
/// first, and each merged node lists the child holding the smaller original
/// index first, so the identity correlation yields the identity order.
pub fn cluster_reorder(c: &CorrelationMatrix) -> Vec<usize> {
    let d = c.dim();
    if d == 0 {
        return Vec::new();
    }
    let dist = |i: usize, j: usize| 1.0 - c.get(i, j).abs();

    // Active clusters, kept sorted by their smallest member index.
    struct Node {
        leaves: Vec<usize>,
    }
    let mut active: Vec<Node> = (0..d).map(|i| Node { leaves: vec![i] }).collect();
    // Pairwise average-linkage distances between active clusters (by position).
    let mut link: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| dist(i, j)).collect())
        .collect();

    while active.len() > 1 {
        let k = active.len();
        let mut best = (0, 1);
        let mut best_d = f64::INFINITY;
        for a in 0..k {
            for b in (a + 1)..k {
                if link[a][b] < best_d {
                    best_d = link[a][b];
                    best = (a, b);
                }
            }
        }
        let (a, b) = best;
        let (na, nb) = (active[a].leaves.len() as f64, active[b].leaves.len() as f64);
        // Lance-Williams update for average linkage.
        for x in 0..k {
            if x == a || x == b {
                continue;
            }
            let v = (na * link[a][x] + nb * link[b][x]) / (na + nb);
            link[a][x] = v;
            link[x][a] = v;
        }
        let right = active.remove(b);
        link.remove(b);
        for row in &mut link {
            row.remove(b);
        }
        // `a < b` and clusters are sorted by min index, so `a` holds the smaller one.
        active[a].leaves.extend(right.leaves);
    }
    active.pop().expect("one cluster remains").leaves
}
