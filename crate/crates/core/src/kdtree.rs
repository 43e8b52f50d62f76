//! Static 3-d tree for exact nearest-neighbor queries.

use crate::mesh::Point;

pub struct KdTree {
    points: Vec<Point>,
    /// Original index of each stored point.
    ids: Vec<usize>,
    nodes: Vec<KdNode>,
}

struct KdNode {
    start: usize,
    end: usize,
    axis: usize,
    split: f64,
    children: Option<(usize, usize)>,
}

const LEAF: usize = 8;

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let mut items: Vec<(Point, usize)> = points.iter().copied().zip(0..).collect();
        let mut nodes = Vec::new();
        let n = items.len();
        if n > 0 {
            build(&mut items, 0, n, &mut nodes);
        }
        KdTree { points: items.iter().map(|p| p.0).collect(), ids: items.iter().map(|p| p.1).collect(), nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index (into the construction slice) and squared distance of the
    /// nearest point; ties go to the lower index.
    pub fn nearest(&self, q: Point) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, ni: usize, q: Point, best: &mut (usize, f64)) {
        let node = &self.nodes[ni];
        match node.children {
            None => {
                for i in node.start..node.end {
                    let p = self.points[i];
                    let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                    if d < best.1 || (d == best.1 && self.ids[i] < best.0) {
                        *best = (self.ids[i], d);
                    }
                }
            }
            Some((lo, hi)) => {
                let diff = q[node.axis] - node.split;
                let (near, far) = if diff < 0.0 { (lo, hi) } else { (hi, lo) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn build(items: &mut [(Point, usize)], start: usize, end: usize, nodes: &mut Vec<KdNode>) -> usize {
    let id = nodes.len();
    nodes.push(KdNode { start, end, axis: 0, split: 0.0, children: None });
    if end - start <= LEAF {
        return id;
    }
    let slice = &mut items[start..end];
    let spread = |a: usize| {
        let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0[a]), hi.max(p.0[a])));
        hi - lo
    };
    let axis = (0..3).max_by(|&a, &b| spread(a).total_cmp(&spread(b))).expect("three axes");
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]));
    let split = slice[mid].0[axis];
    let lo = build(items, start, start + mid, nodes);
    let hi = build(items, start + mid, end, nodes);
    nodes[id] = KdNode { start, end, axis, split, children: Some((lo, hi)) };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_and_single() {
        assert!(KdTree::new(&[]).nearest([0.0; 3]).is_none());
        assert_eq!(KdTree::new(&[[1.0, 2.0, 3.0]]).nearest([1.0, 2.0, 4.0]), Some((0, 1.0)));
    }

    proptest! {
        #[test]
        fn matches_linear_scan(pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..200),
                               q in prop::array::uniform3(-12.0f64..12.0)) {
            let tree = KdTree::new(&pts);
            let (i, d) = tree.nearest(q).unwrap();
            let brute = pts.iter().map(|p| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(d, brute);
            let p = pts[i];
            prop_assert_eq!((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), d);
        }
    }
}
