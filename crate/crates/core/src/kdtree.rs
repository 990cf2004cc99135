//! Deterministic kd-tree over atom coordinates for ball range queries.
//!
//! Median split on the widest axis, ties broken lexicographically, so the
//! tree (and every query answer order) depends only on the input data.

pub struct KdTree {
    dim: usize,
    nodes: Vec<Node>,
    /// Atom indices, permuted so each node owns a contiguous slice.
    order: Vec<usize>,
}

impl std::fmt::Debug for KdTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KdTree")
            .field("dim", &self.dim)
            .field("atoms", &self.order.len())
            .finish()
    }
}

struct Node {
    /// Range into `order`.
    lo: usize,
    hi: usize,
    /// Bounding box, min then max per coordinate.
    bb_min: Vec<f64>,
    bb_max: Vec<f64>,
    split: Option<(usize, usize)>, // (left child, right child)
}

const LEAF_SIZE: usize = 16;

impl KdTree {
    pub fn build(coords: &[f64], dim: usize) -> Self {
        let n = if dim == 0 { 0 } else { coords.len() / dim };
        let mut order: Vec<usize> = (0..n).collect();
        let mut tree = KdTree {
            dim,
            nodes: Vec::new(),
            order: Vec::new(),
        };
        if n > 0 {
            tree.build_node(coords, &mut order, 0, n);
        }
        tree.order = order;
        tree
    }

    fn build_node(&mut self, coords: &[f64], order: &mut [usize], lo: usize, hi: usize) -> usize {
        let dim = self.dim;
        let mut bb_min = vec![f64::INFINITY; dim];
        let mut bb_max = vec![f64::NEG_INFINITY; dim];
        for &i in &order[lo..hi] {
            let p = &coords[i * dim..(i + 1) * dim];
            for c in 0..dim {
                bb_min[c] = bb_min[c].min(p[c]);
                bb_max[c] = bb_max[c].max(p[c]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            lo,
            hi,
            bb_min,
            bb_max,
            split: None,
        });
        if hi - lo > LEAF_SIZE {
            // widest axis
            let node = &self.nodes[id];
            let mut axis = 0;
            let mut width = -1.0;
            for c in 0..dim {
                let w = node.bb_max[c] - node.bb_min[c];
                if w > width {
                    width = w;
                    axis = c;
                }
            }
            if width > 0.0 {
                let mid = (lo + hi) / 2;
                order[lo..hi].sort_unstable_by(|&a, &b| {
                    let pa = &coords[a * dim..(a + 1) * dim];
                    let pb = &coords[b * dim..(b + 1) * dim];
                    pa[axis]
                        .partial_cmp(&pb[axis])
                        .unwrap()
                        .then(crate::vecmath::lex_cmp(pa, pb))
                        .then(a.cmp(&b))
                });
                let left = self.build_node(coords, order, lo, mid);
                let right = self.build_node(coords, order, mid, hi);
                self.nodes[id].split = Some((left, right));
            }
        }
        id
    }

    /// Indices of atoms strictly inside the open ball, in ascending index order.
    pub fn ball_query(&self, coords: &[f64], center: &[f64], radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() && radius > 0.0 {
            self.query_node(0, coords, center, radius, radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn query_node(
        &self,
        id: usize,
        coords: &[f64],
        center: &[f64],
        radius: f64,
        r2: f64,
        out: &mut Vec<usize>,
    ) {
        let node = &self.nodes[id];
        // distance from ball center to bounding box
        let mut d2 = 0.0;
        for c in 0..self.dim {
            let v = if center[c] < node.bb_min[c] {
                node.bb_min[c] - center[c]
            } else if center[c] > node.bb_max[c] {
                center[c] - node.bb_max[c]
            } else {
                0.0
            };
            d2 += v * v;
        }
        if d2 >= r2 {
            return;
        }
        // box fully inside the open ball?
        let mut far2 = 0.0;
        for c in 0..self.dim {
            let v = (center[c] - node.bb_min[c])
                .abs()
                .max((center[c] - node.bb_max[c]).abs());
            far2 += v * v;
        }
        if far2 < r2 {
            out.extend_from_slice(&self.order[node.lo..node.hi]);
            return;
        }
        match node.split {
            Some((l, r)) => {
                self.query_node(l, coords, center, radius, r2, out);
                self.query_node(r, coords, center, radius, r2, out);
            }
            None => {
                for &i in &self.order[node.lo..node.hi] {
                    let p = &coords[i * self.dim..(i + 1) * self.dim];
                    if crate::vecmath::dist2(p, center) < r2 {
                        out.push(i);
                    }
                }
            }
        }
    }

    /// Nearest neighbour distance from atom `i` to any other atom.
    pub fn nearest_other(&self, coords: &[f64], i: usize) -> f64 {
        let n = self.order.len();
        if n < 2 {
            return f64::INFINITY;
        }
        let p = &coords[i * self.dim..(i + 1) * self.dim];
        let mut best = f64::INFINITY;
        self.nearest_node(0, coords, p, i, &mut best);
        best.sqrt()
    }

    fn nearest_node(&self, id: usize, coords: &[f64], p: &[f64], skip: usize, best2: &mut f64) {
        let node = &self.nodes[id];
        let mut d2 = 0.0;
        for c in 0..self.dim {
            let v = if p[c] < node.bb_min[c] {
                node.bb_min[c] - p[c]
            } else if p[c] > node.bb_max[c] {
                p[c] - node.bb_max[c]
            } else {
                0.0
            };
            d2 += v * v;
        }
        if d2 >= *best2 {
            return;
        }
        match node.split {
            Some((l, r)) => {
                self.nearest_node(l, coords, p, skip, best2);
                self.nearest_node(r, coords, p, skip, best2);
            }
            None => {
                for &j in &self.order[node.lo..node.hi] {
                    if j == skip {
                        continue;
                    }
                    let q = &coords[j * self.dim..(j + 1) * self.dim];
                    let d = crate::vecmath::dist2(q, p);
                    if d < *best2 {
                        *best2 = d;
                    }
                }
            }
        }
    }
}
