use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// One planar strip of terrain starting at `x_start` and rising with `slope_deg` along +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainSegment {
    pub x_start: f64,
    pub height: f64,
    #[serde(default)]
    pub slope_deg: f64,
}

/// Piecewise-planar terrain described along the x axis.
///
/// Each segment is valid from its `x_start` up to the next segment's start; the first
/// segment also extends to `-inf`. Height jumps between segments are step edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Terrain {
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "flat_segments")]
    pub segments: Vec<TerrainSegment>,
}

fn default_mu() -> f64 {
    0.7
}

fn flat_segments() -> Vec<TerrainSegment> {
    vec![TerrainSegment {
        x_start: f64::NEG_INFINITY,
        height: 0.0,
        slope_deg: 0.0,
    }]
}

impl Default for Terrain {
    fn default() -> Self {
        Self::flat(0.7)
    }
}

impl Terrain {
    pub fn flat(mu: f64) -> Self {
        Self {
            mu,
            segments: flat_segments(),
        }
    }

    /// Flat ground that turns into an incline of `deg` degrees at `x_start`.
    pub fn slope(mu: f64, x_start: f64, deg: f64) -> Self {
        Self {
            mu,
            segments: vec![
                TerrainSegment {
                    x_start: f64::NEG_INFINITY,
                    height: 0.0,
                    slope_deg: 0.0,
                },
                TerrainSegment {
                    x_start,
                    height: 0.0,
                    slope_deg: deg,
                },
            ],
        }
    }

    fn segment(&self, x: f64) -> &TerrainSegment {
        let mut seg = &self.segments[0];
        for s in &self.segments[1..] {
            if x >= s.x_start {
                seg = s;
            }
        }
        seg
    }

    fn grade(seg: &TerrainSegment) -> f64 {
        seg.slope_deg.to_radians().tan()
    }

    pub fn height(&self, x: f64, _y: f64) -> f64 {
        let seg = self.segment(x);
        if seg.x_start.is_finite() {
            seg.height + Self::grade(seg) * (x - seg.x_start)
        } else {
            seg.height
        }
    }

    /// `(dh/dx, dh/dy)`; exact away from segment boundaries.
    pub fn gradient(&self, x: f64, _y: f64) -> Vector2<f64> {
        Vector2::new(Self::grade(self.segment(x)), 0.0)
    }

    pub fn normal(&self, x: f64, y: f64) -> Vector3<f64> {
        let g = self.gradient(x, y);
        Vector3::new(-g[0], -g[1], 1.0).normalize()
    }

    /// x positions where the height is discontinuous.
    pub fn step_edges(&self) -> Vec<f64> {
        self.segments
            .windows(2)
            .filter(|w| {
                let prev_end = if w[0].x_start.is_finite() {
                    w[0].height + Self::grade(&w[0]) * (w[1].x_start - w[0].x_start)
                } else {
                    w[0].height
                };
                (prev_end - w[1].height).abs() > 1e-9
            })
            .map(|w| w[1].x_start)
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.segments.is_empty() {
            return Err("terrain needs at least one segment".into());
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(format!("friction coefficient must be positive, got {}", self.mu));
        }
        for w in self.segments.windows(2) {
            if !(w[1].x_start > w[0].x_start) {
                return Err("terrain segments must have increasing x_start".into());
            }
        }
        if self.segments.iter().any(|s| s.slope_deg.abs() >= 60.0) {
            return Err("terrain slopes must stay below 60 degrees".into());
        }
        Ok(())
    }
}

/// Convex foothold region given by its vertices (counter-clockwise) and the derived
/// half-planes `a_q . p_xy <= b_q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexRegion {
    pub vertices: Vec<[f64; 2]>,
}

impl ConvexRegion {
    pub fn rectangle(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self {
            vertices: vec![[x_min, y_min], [x_max, y_min], [x_max, y_max], [x_min, y_max]],
        }
    }

    fn signed_area(&self) -> f64 {
        let v = &self.vertices;
        (0..v.len())
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            * 0.5
    }

    pub fn half_planes(&self) -> Vec<(Vector2<f64>, f64)> {
        let v = &self.vertices;
        let ccw = self.signed_area() > 0.0;
        (0..v.len())
            .map(|i| {
                let (a, b) = (Vector2::from(v[i]), Vector2::from(v[(i + 1) % v.len()]));
                let e = b - a;
                let mut n = Vector2::new(e[1], -e[0]);
                if !ccw {
                    n = -n;
                }
                let n = n.normalize();
                (n, n.dot(&a))
            })
            .collect()
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        self.half_planes().iter().all(|(a, b)| a.dot(p) <= *b + 1e-12)
    }

    /// Largest half-plane violation; non-positive inside.
    pub fn violation(&self, p: &Vector2<f64>) -> f64 {
        self.half_planes()
            .iter()
            .map(|(a, b)| a.dot(p) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn x_range(&self) -> (f64, f64) {
        self.vertices
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v[0]), hi.max(v[0])))
    }

    pub fn validate(&self) -> Result<(), String> {
        let v = &self.vertices;
        if v.len() < 3 {
            return Err("region needs at least three vertices".into());
        }
        if self.signed_area().abs() < 1e-9 {
            return Err("region is empty (zero area)".into());
        }
        let sign = self.signed_area().signum();
        for i in 0..v.len() {
            let (a, b, c) = (v[i], v[(i + 1) % v.len()], v[(i + 2) % v.len()]);
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            if cross * sign < -1e-12 {
                return Err("region vertices must describe a convex polygon".into());
            }
        }
        Ok(())
    }
}

/// Vertical cylinder to be avoided by the payload and robot bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_height_and_normal() {
        let t = Terrain::slope(0.7, 0.0, 10.0);
        assert!((t.height(1.0, 0.0) - 10f64.to_radians().tan()).abs() < 1e-12);
        assert_eq!(t.height(-1.0, 3.0), 0.0);
        let n = t.normal(1.0, 0.0);
        let s = 10f64.to_radians();
        assert!((n - Vector3::new(-s.sin(), 0.0, s.cos())).norm() < 1e-12);
        assert!(t.step_edges().is_empty());
    }

    #[test]
    fn step_edges_detected() {
        let t = Terrain {
            mu: 0.7,
            segments: vec![
                TerrainSegment {
                    x_start: f64::NEG_INFINITY,
                    height: 0.0,
                    slope_deg: 0.0,
                },
                TerrainSegment {
                    x_start: 2.0,
                    height: 0.1,
                    slope_deg: 0.0,
                },
            ],
        };
        assert_eq!(t.step_edges(), vec![2.0]);
    }

    #[test]
    fn region_half_planes() {
        let r = ConvexRegion::rectangle(0.0, 0.3, 0.0, 0.3);
        assert!(r.validate().is_ok());
        assert!(r.contains(&Vector2::new(0.1, 0.2)));
        assert!((r.violation(&Vector2::new(0.4, 0.1)) - 0.1).abs() < 1e-12);
        let degenerate = ConvexRegion {
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        };
        assert!(degenerate.validate().is_err());
    }
}
