//! Balanced kd-tree over point coordinates with exact k-NN queries.

use crate::lidar_io::{Point, PointCloud};

use super::GeometryError;

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Index into `coords` of the splitting point.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Immutable spatial index. Queries return exact nearest neighbors with ties
/// broken by ascending point index, so results are canonical regardless of
/// tree layout.
#[derive(Debug, Clone)]
pub struct KdTree {
    coords: Vec<[f64; 3]>,
    nodes: Vec<Node>,
    root: i32,
}

const LEAF_NONE: i32 = -1;

/// Builds the index over all points of `cloud`. Deterministic: the median
/// split orders by `(coordinate, index)`.
pub fn build_kdtree(cloud: &PointCloud) -> Result<KdTree, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let coords: Vec<[f64; 3]> = cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let mut order: Vec<u32> = (0..coords.len() as u32).collect();
    let mut nodes = Vec::with_capacity(coords.len());
    let root = build_rec(&coords, &mut order, 0, &mut nodes);
    Ok(KdTree { coords, nodes, root })
}

fn build_rec(coords: &[[f64; 3]], order: &mut [u32], depth: usize, nodes: &mut Vec<Node>) -> i32 {
    if order.is_empty() {
        return LEAF_NONE;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        coords[a as usize][axis]
            .partial_cmp(&coords[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let point = order[mid];
    let id = nodes.len() as i32;
    nodes.push(Node {
        point,
        axis: axis as u8,
        left: LEAF_NONE,
        right: LEAF_NONE,
    });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build_rec(coords, lo, depth + 1, nodes);
    let right = build_rec(coords, &mut hi[1..], depth + 1, nodes);
    nodes[id as usize].left = left;
    nodes[id as usize].right = right;
    id
}

impl KdTree {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// The `k` nearest indexed points to `query`, sorted by ascending
    /// distance (ties by ascending index). Returns all points when fewer
    /// than `k` exist.
    pub fn knn(&self, query: &Point, k: usize) -> Result<Vec<usize>, GeometryError> {
        if k == 0 {
            return Err(GeometryError::InvalidParam(
                "k must be at least 1".into(),
            ));
        }
        let q = [query.x, query.y, query.z];
        // Max-heap on (distance, index): the worst current candidate on top.
        let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.search(self.root, &q, k, &mut heap);
        let mut out: Vec<(f64, u32)> = heap;
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        Ok(out.into_iter().map(|(_, i)| i as usize).collect())
    }

    fn search(&self, node: i32, q: &[f64; 3], k: usize, heap: &mut Vec<(f64, u32)>) {
        if node == LEAF_NONE {
            return;
        }
        let n = self.nodes[node as usize];
        let p = self.coords[n.point as usize];
        let d2 = dist2(&p, q);
        push_candidate(heap, k, (d2, n.point));

        let axis = n.axis as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, q, k, heap);
        if heap.len() < k || delta * delta <= worst(heap) {
            self.search(far, q, k, heap);
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn worst(heap: &[(f64, u32)]) -> f64 {
    heap[0].0
}

fn cand_less(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Binary max-heap keyed on (distance, index); keeps the k best candidates.
fn push_candidate(heap: &mut Vec<(f64, u32)>, k: usize, cand: (f64, u32)) {
    if heap.len() < k {
        heap.push(cand);
        let mut i = heap.len() - 1;
        while i > 0 {
            let parent = (i - 1) / 2;
            if cand_less(heap[parent], heap[i]) {
                heap.swap(parent, i);
                i = parent;
            } else {
                break;
            }
        }
    } else if cand_less(cand, heap[0]) {
        heap[0] = cand;
        let mut i = 0;
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut largest = i;
            if l < heap.len() && cand_less(heap[largest], heap[l]) {
                largest = l;
            }
            if r < heap.len() && cand_less(heap[largest], heap[r]) {
                largest = r;
            }
            if largest == i {
                break;
            }
            heap.swap(i, largest);
            i = largest;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar_io::Point;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive-scan oracle: sort by (distance, index), take k.
    pub(crate) fn knn_brute(cloud: &PointCloud, q: &Point, k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let dx = p.x - q.x;
                let dy = p.y - q.y;
                let dz = p.z - q.z;
                (dx * dx + dy * dy + dz * dz, i)
            })
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        d.into_iter().take(k).map(|(_, i)| i).collect()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::from_points(
            (0..n)
                .map(|_| {
                    Point::new(
                        rng.gen_range(-30.0..30.0),
                        rng.gen_range(-30.0..30.0),
                        rng.gen_range(-3.0..3.0),
                        0.0,
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(matches!(
            build_kdtree(&PointCloud::default()),
            Err(GeometryError::EmptyCloud)
        ));
    }

    #[test]
    fn single_point_is_its_own_neighbor() {
        let c = PointCloud::from_points(vec![Point::new(1.0, 2.0, 3.0, 0.0)]);
        let t = build_kdtree(&c).unwrap();
        assert_eq!(t.knn(&Point::new(9.0, 9.0, 9.0, 0.0), 1).unwrap(), vec![0]);
        // k beyond the cloud size returns everything.
        assert_eq!(t.knn(&Point::new(0.0, 0.0, 0.0, 0.0), 5).unwrap(), vec![0]);
    }

    #[test]
    fn duplicates_all_retrievable_with_index_tiebreak() {
        let p = Point::new(1.0, 1.0, 1.0, 0.0);
        let c = PointCloud::from_points(vec![p, p, p]);
        let t = build_kdtree(&c).unwrap();
        assert_eq!(t.knn(&p, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn collinear_hand_case() {
        let c = PointCloud::from_points(
            (0..4)
                .map(|i| Point::new(i as f64, 0.0, 0.0, 0.0))
                .collect(),
        );
        let t = build_kdtree(&c).unwrap();
        assert_eq!(t.knn(&Point::new(0.0, 0.0, 0.0, 0.0), 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn zero_k_rejected() {
        let c = PointCloud::from_points(vec![Point::new(0.0, 0.0, 0.0, 0.0)]);
        let t = build_kdtree(&c).unwrap();
        assert!(matches!(
            t.knn(&Point::new(0.0, 0.0, 0.0, 0.0), 0),
            Err(GeometryError::InvalidParam(_))
        ));
    }

    #[test]
    fn matches_brute_force_on_random_clouds() {
        for seed in 0..4 {
            let c = random_cloud(500, seed);
            let t = build_kdtree(&c).unwrap();
            for (qi, q) in c.points.iter().enumerate().step_by(7) {
                for k in [1usize, 5, 30] {
                    let got = t.knn(q, k).unwrap();
                    let want = knn_brute(&c, q, k);
                    assert_eq!(got, want, "seed {seed} query {qi} k {k}");
                }
            }
        }
    }
}
