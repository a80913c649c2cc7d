use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::forest::{compute_mask, leaves_per_tree, node_index, ForestParams};
use crate::numeric::Matrix;

pub type Point = [f64; 2];

/// Axis-aligned box in the layer's input coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Domain {
    pub lo: Point,
    pub hi: Point,
}

impl Domain {
    pub fn unit() -> Self {
        Self {
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
        }
    }

    fn polygon(&self) -> Vec<Point> {
        vec![
            self.lo,
            [self.hi[0], self.lo[1]],
            self.hi,
            [self.lo[0], self.hi[1]],
        ]
    }
}

/// The line `w·x + b = 0` of one node, with the region in which the node
/// is reached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundarySegment {
    pub tree: usize,
    pub level: usize,
    pub slot: usize,
    pub w: Point,
    pub b: f64,
    /// Convex polygon, counter-clockwise.
    pub region: Vec<Point>,
    /// The part of the line inside `region`, if any.
    pub segment: Option<(Point, Point)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryExport {
    pub trees: usize,
    pub depth: usize,
    pub domain: Domain,
    pub resolution: usize,
    pub segments: Vec<BoundarySegment>,
    /// Per tree, leaf slot of every pixel centre; row 0 is the top (high x2).
    pub raster: Vec<Vec<u32>>,
}

fn side(w: Point, b: f64, p: Point) -> f64 {
    w[0] * p[0] + w[1] * p[1] + b
}

/// Keeps the part of a convex polygon where `sign · (w·x + b) >= 0`.
fn clip(poly: &[Point], w: Point, b: f64, sign: f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let cur = poly[i];
        let next = poly[(i + 1) % poly.len()];
        let sc = sign * side(w, b, cur);
        let sn = sign * side(w, b, next);
        if sc >= 0.0 {
            out.push(cur);
        }
        if (sc >= 0.0) != (sn >= 0.0) {
            let t = sc / (sc - sn);
            out.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
        }
    }
    out
}

fn area(poly: &[Point]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

fn line_in_polygon(poly: &[Point], w: Point, b: f64) -> Option<(Point, Point)> {
    if w == [0.0, 0.0] {
        return None;
    }
    let mut hits: Vec<Point> = Vec::new();
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        let (sp, sq) = (side(w, b, p), side(w, b, q));
        if sp == 0.0 {
            hits.push(p);
        } else if (sp > 0.0) != (sq > 0.0) && sq != 0.0 {
            let t = sp / (sp - sq);
            hits.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    // Order along the line direction and keep the extremes.
    let dir = [-w[1], w[0]];
    let proj = |p: &Point| p[0] * dir[0] + p[1] * dir[1];
    let lo = hits.iter().min_by(|a, b| proj(a).total_cmp(&proj(b)))?;
    let hi = hits.iter().max_by(|a, b| proj(a).total_cmp(&proj(b)))?;
    Some((*lo, *hi))
}

/// Routing lines of a two-input layer mapped back to the input plane, plus
/// a raster of the leaf reached at each pixel.
pub fn export_boundaries(
    params: &ForestParams,
    domain: Domain,
    resolution: usize,
) -> Result<BoundaryExport> {
    if params.d_in() != 2 {
        return shape_err(format!("boundary export needs 2 inputs, layer has {}", params.d_in()));
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("raster resolution must be >= 1".into()));
    }
    if !(domain.lo[0] < domain.hi[0] && domain.lo[1] < domain.hi[1]) {
        return Err(Error::InvalidArgument("empty domain".into()));
    }
    let (trees, depth) = (params.trees(), params.depth());
    let mut segments = Vec::new();
    for p in 0..trees {
        // Regions of the current level, indexed by slot.
        let mut regions = vec![domain.polygon()];
        for level in 0..=depth {
            let mut next = Vec::with_capacity(regions.len() * 2);
            for (slot, region) in regions.iter().enumerate() {
                let r = params.row_of(p, node_index(level, slot));
                let w = [params.w_in[(r, 0)], params.w_in[(r, 1)]];
                let b = params.b_in[r];
                if region.len() >= 3 && area(region) > 0.0 {
                    segments.push(BoundarySegment {
                        tree: p,
                        level,
                        slot,
                        w,
                        b,
                        region: region.clone(),
                        segment: line_in_polygon(region, w, b),
                    });
                }
                if level < depth {
                    next.push(clip(region, w, b, -1.0));
                    next.push(clip(region, w, b, 1.0));
                }
            }
            if level < depth {
                regions = next;
            }
        }
    }

    let res = resolution;
    let mut pts = Matrix::zeros(res * res, 2);
    for j in 0..res {
        for i in 0..res {
            let k = j * res + i;
            pts[(k, 0)] = domain.lo[0] + (i as f64 + 0.5) / res as f64 * (domain.hi[0] - domain.lo[0]);
            pts[(k, 1)] = domain.hi[1] - (j as f64 + 0.5) / res as f64 * (domain.hi[1] - domain.lo[1]);
        }
    }
    let mut z = pts.matmul_nt(&params.w_in)?;
    z.add_row_vector(&params.b_in)?;
    let mask = compute_mask(&z, trees, depth)?;
    let raster = (0..trees)
        .map(|p| (0..res * res).map(|k| mask.leaf(k, p) as u32).collect())
        .collect();

    Ok(BoundaryExport {
        trees,
        depth,
        domain,
        resolution,
        segments,
        raster,
    })
}

impl BoundaryExport {
    /// Centre of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> Point {
        let (lo, hi, r) = (self.domain.lo, self.domain.hi, self.resolution as f64);
        [
            lo[0] + (col as f64 + 0.5) / r * (hi[0] - lo[0]),
            hi[1] - (row as f64 + 0.5) / r * (hi[1] - lo[1]),
        ]
    }

    /// `tree,level,slot,w1,w2,b,clip_poly`, the polygon as `x y` pairs
    /// separated by `;`.
    pub fn csv(&self) -> String {
        let mut s = String::from("tree,level,slot,w1,w2,b,clip_poly\n");
        for seg in &self.segments {
            let poly: Vec<String> = seg.region.iter().map(|p| format!("{} {}", p[0], p[1])).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{},\"{}\"\n",
                seg.tree,
                seg.level,
                seg.slot,
                seg.w[0],
                seg.w[1],
                seg.b,
                poly.join(";")
            ));
        }
        s
    }

    /// Grey level assigned to each leaf slot.
    pub fn palette(&self) -> Vec<u8> {
        let leaves = leaves_per_tree(self.depth);
        (0..leaves)
            .map(|l| {
                if leaves <= 256 {
                    if leaves == 1 {
                        255
                    } else {
                        ((l * 255) / (leaves - 1)) as u8
                    }
                } else {
                    (l % 256) as u8
                }
            })
            .collect()
    }

    pub fn palette_json(&self) -> String {
        serde_json::json!({
            "depth": self.depth,
            "trees": self.trees,
            "leaf_to_gray": self.palette(),
        })
        .to_string()
    }

    /// Binary PGM of one tree's raster.
    pub fn pgm(&self, tree: usize) -> Vec<u8> {
        let pal = self.palette();
        let mut out = format!("P5\n{} {}\n255\n", self.resolution, self.resolution).into_bytes();
        out.extend(self.raster[tree].iter().map(|&l| pal[l as usize]));
        out
    }
}
