//! Nearest-neighbor search over 2D points with a static kd-tree.

use nalgebra::Vector2;

pub type Vec2 = Vector2<f64>;

/// Points per leaf; below this a linear scan beats further splitting.
const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Bounding box of the node's points.
    lo: Vec2,
    hi: Vec2,
    kind: Kind,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    /// Range into `KdTree::order`.
    Leaf { start: u32, end: u32 },
    Split { left: u32, right: u32 },
}

impl Node {
    fn dist2(&self, q: &Vec2) -> f64 {
        let d = (self.lo - q).sup(&(q - self.hi)).sup(&Vec2::zeros());
        d.norm_squared()
    }
}

/// Balanced kd-tree over a fixed point set, split at the median of the wider
/// axis of each node's bounding box.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Vec2],
    order: Vec<u32>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    /// Panics if `points` is empty.
    pub fn new(points: &'a [Vec2]) -> Self {
        assert!(!points.is_empty(), "kd-tree needs at least one point");
        let mut tree = Self {
            points,
            order: (0..points.len() as u32).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        tree.build(0, points.len());
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i as usize]);
            hi = hi.sup(&self.points[i as usize]);
        }
        let leaf = Kind::Leaf {
            start: start as u32,
            end: end as u32,
        };
        self.nodes.push(Node { lo, hi, kind: leaf });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let axis = if hi.x - lo.x >= hi.y - lo.y { 0 } else { 1 };
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a as usize][axis].total_cmp(&pts[b as usize][axis])
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id as usize].kind = Kind::Split { left, right };
        id
    }

    pub fn points(&self) -> &[Vec2] {
        self.points
    }

    /// Index of the nearest point and its squared distance. Ties resolve to
    /// the smallest point index.
    pub fn nearest(&self, q: &Vec2) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    /// Same result as [`nearest`](Self::nearest), with the search bounded
    /// from the start by the distance to point `hint`. Consecutive queries
    /// along a contour pass the previous answer.
    pub fn nearest_from(&self, q: &Vec2, hint: usize) -> (usize, f64) {
        let Some(p) = self.points.get(hint) else {
            return self.nearest(q);
        };
        let mut best = (hint, (p - q).norm_squared());
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: u32, q: &Vec2, best: &mut (usize, f64)) {
        match self.nodes[node as usize].kind {
            Kind::Leaf { start, end } => {
                for &i in &self.order[start as usize..end as usize] {
                    let d2 = (self.points[i as usize] - q).norm_squared();
                    if d2 < best.1 || (d2 == best.1 && (i as usize) < best.0) {
                        *best = (i as usize, d2);
                    }
                }
            }
            Kind::Split { left, right } => {
                let dl = self.nodes[left as usize].dist2(q);
                let dr = self.nodes[right as usize].dist2(q);
                let ((n, dn), (f, df)) = if dl <= dr { ((left, dl), (right, dr)) } else { ((right, dr), (left, dl)) };
                // Equal distances are still visited so ties see every index.
                if dn <= best.1 {
                    self.search(n, q, best);
                }
                if df <= best.1 {
                    self.search(f, q, best);
                }
            }
        }
    }
}

/// Exhaustive nearest neighbor; the reference the tree is checked against.
pub fn nearest_brute(points: &[Vec2], q: &Vec2) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best
}
