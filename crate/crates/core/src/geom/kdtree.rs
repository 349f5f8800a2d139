//! Exact k-nearest-neighbor search over 3D points.
//!
//! Results are ordered by `(squared distance, index)`, so ties are always
//! broken towards the lower point index and the output is identical to a
//! brute-force scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Point3;
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a borrowed point slice.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Point3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point3]) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = Point3::repeat(f64::INFINITY);
        let mut hi = Point3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        (hi - lo).imax()
    }

    /// The `k` nearest points to `query`, nearest first, skipping `exclude`.
    /// Returns `(index, squared distance)` pairs.
    pub fn nearest_k(&self, query: &Point3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    /// Nearest point to `query` as `(index, squared distance)`.
    pub fn nearest(&self, query: &Point3) -> Option<(usize, f64)> {
        self.nearest_k(query, 1, None).into_iter().next()
    }

    fn search(
        &self,
        node: usize,
        query: &Point3,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &index in &self.order[start..end] {
                    if Some(index) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        dist2: (self.points[index] - query).norm_squared(),
                        index,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, heap);
                // Equal plane distance can still hold a lower-index tie.
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").dist2 {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }
}

/// Row `i` lists the `k` nearest neighbors of point `i`, itself excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    k: usize,
    indices: Vec<usize>,
}

impl NeighborGraph {
    /// Builds a graph from explicit rows, checking the invariants.
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let m = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || k >= m {
            return Err(Error::Size(format!("neighbor count {k} invalid for {m} points")));
        }
        let mut indices = Vec::with_capacity(m * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Shape(format!("row {i} has {} entries, expected {k}", row.len())));
            }
            if row.iter().any(|&j| j >= m || j == i) {
                return Err(Error::Size(format!("row {i} contains an invalid neighbor index")));
            }
            indices.extend_from_slice(row);
        }
        Ok(Self { k, indices })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Disjoint union of `graphs`; indices of later graphs are offset by the
    /// point counts before them.
    pub fn stack(graphs: &[&NeighborGraph]) -> Result<Self> {
        let k = graphs.first().map_or(0, |g| g.k);
        if k == 0 || graphs.iter().any(|g| g.k != k) {
            return Err(Error::Shape("stacked neighbor graphs need one common k".into()));
        }
        let mut indices = Vec::with_capacity(graphs.iter().map(|g| g.indices.len()).sum());
        let mut offset = 0;
        for g in graphs {
            indices.extend(g.indices.iter().map(|&j| j + offset));
            offset += g.num_points();
        }
        Ok(Self { k, indices })
    }

    pub fn num_points(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// All rows concatenated, row-major.
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

/// Exact k-nearest-neighbor graph; ties go to the lower index.
pub fn knn(points: &[Point3], k: usize) -> Result<NeighborGraph> {
    let m = points.len();
    if k == 0 || k >= m {
        return Err(Error::Size(format!(
            "knn needs 0 < k < number of points (k = {k}, points = {m})"
        )));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::Numeric("knn input contains non-finite coordinates".into()));
    }
    let tree = KdTree::new(points);
    let mut indices = Vec::with_capacity(m * k);
    for (i, p) in points.iter().enumerate() {
        indices.extend(tree.nearest_k(p, k, Some(i)).into_iter().map(|(j, _)| j));
    }
    Ok(NeighborGraph { k, indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(points: &[Point3], k: usize) -> Vec<Vec<usize>> {
        (0..points.len())
            .map(|i| {
                let mut d: Vec<(f64, usize)> = (0..points.len())
                    .filter(|&j| j != i)
                    .map(|j| ((points[i] - points[j]).norm_squared(), j))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn collinear_example() {
        let pts = [Point3::zeros(), Point3::new(1.0, 0.0, 0.0), Point3::new(3.0, 0.0, 0.0)];
        let g = knn(&pts, 1).unwrap();
        assert_eq!(g.row(0), &[1]);
        assert_eq!(g.row(1), &[0]);
        assert_eq!(g.row(2), &[1]);
    }

    #[test]
    fn square_corners_pick_edge_neighbors() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let g = knn(&pts, 2).unwrap();
        assert_eq!(g.row(0), &[1, 3]);
        assert_eq!(g.row(1), &[0, 2]);
        assert_eq!(g.row(2), &[1, 3]);
        assert_eq!(g.row(3), &[0, 2]);
    }

    #[test]
    fn matches_brute_force_on_1024_points() {
        let pts = random_points(1024, 11);
        let g = knn(&pts, 20).unwrap();
        let oracle = brute_force(&pts, 20);
        for (i, row) in oracle.iter().enumerate() {
            assert_eq!(g.row(i), row.as_slice(), "row {i}");
        }
    }

    #[test]
    fn ties_go_to_lower_index_on_grid() {
        // Integer grid: lots of exactly equal distances.
        let mut pts = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..3 {
                    pts.push(Point3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        let g = knn(&pts, 7).unwrap();
        let oracle = brute_force(&pts, 7);
        for (i, row) in oracle.iter().enumerate() {
            assert_eq!(g.row(i), row.as_slice());
        }
    }

    #[test]
    fn k_too_large_is_size_error() {
        let pts = random_points(5, 1);
        assert!(matches!(knn(&pts, 5), Err(Error::Size(_))));
        assert!(matches!(knn(&pts, 0), Err(Error::Size(_))));
    }

    #[test]
    fn stacking_offsets_later_graphs() {
        let a = NeighborGraph::from_rows(&[vec![1], vec![0]]).unwrap();
        let b = NeighborGraph::from_rows(&[vec![1], vec![2], vec![0]]).unwrap();
        let s = NeighborGraph::stack(&[&a, &b]).unwrap();
        assert_eq!(s.flat(), &[1, 0, 3, 4, 2]);
        assert_eq!(s.num_points(), 5);
        let c = NeighborGraph::from_rows(&[vec![1, 2], vec![0, 2], vec![0, 1]]).unwrap();
        assert!(NeighborGraph::stack(&[&a, &c]).is_err());
    }

    #[test]
    fn from_rows_validates() {
        assert!(NeighborGraph::from_rows(&[vec![1], vec![0]]).is_ok());
        assert!(NeighborGraph::from_rows(&[vec![0], vec![0]]).is_err());
        assert!(NeighborGraph::from_rows(&[vec![2], vec![0]]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn knn_equals_brute_force(seed in 0u64..1000, n in 2usize..80, k in 1usize..10) {
            let pts = random_points(n, seed);
            let k = k.min(n - 1);
            let g = knn(&pts, k).unwrap();
            let oracle = brute_force(&pts, k);
            for (i, row) in oracle.iter().enumerate() {
                proptest::prop_assert_eq!(g.row(i), row.as_slice());
            }
        }
    }
}
