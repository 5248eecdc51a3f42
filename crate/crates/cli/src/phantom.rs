//! Ground-truth spatiotemporal fields.

use rand::Rng;
use stbp::basis::SpatialGrid;
use stbp::prior::SpaceTimeField;
use nalgebra::DMatrix;

use crate::config::{ShapeConfig, ShapeKind};

/// `u(x, t) = t · 1[sin(π‖x‖₂) ≥ t]`.
pub fn annulus_value(x: f64, y: f64, t: f64) -> f64 {
    if (std::f64::consts::PI * x.hypot(y)).sin() >= t {
        t
    } else {
        0.0
    }
}

pub fn phantom_annulus(grid: &SpatialGrid<f64>, t_grid: &[f64]) -> SpaceTimeField<f64> {
    let sites = grid.sites();
    let values = DMatrix::from_fn(grid.len(), t_grid.len(), |i, j| annulus_value(sites[i].0, sites[i].1, t_grid[j]));
    SpaceTimeField::new(values, grid.clone(), t_grid.to_vec()).expect("shape matches by construction")
}

/// A rigid shape translating at constant velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    pub radius: f64,
    pub half: [f64; 2],
    pub velocity: [f64; 2],
    pub value: f64,
}

impl From<&ShapeConfig> for Shape {
    fn from(c: &ShapeConfig) -> Self {
        Self { kind: c.kind, center: c.center, radius: c.radius, half: c.half, velocity: c.velocity, value: c.value }
    }
}

impl Shape {
    pub fn center_at(&self, t: f64) -> [f64; 2] {
        [self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t]
    }

    pub fn contains(&self, x: f64, y: f64, t: f64) -> bool {
        let [cx, cy] = self.center_at(t);
        match self.kind {
            ShapeKind::Disk => (x - cx).hypot(y - cy) <= self.radius,
            ShapeKind::Rect => (x - cx).abs() <= self.half[0] && (y - cy).abs() <= self.half[1],
        }
    }
}

/// Two disks moving in opposite directions around a fixed bar.
pub fn default_scene() -> Vec<Shape> {
    let disk = |c: [f64; 2], r: f64, v: [f64; 2]| Shape { kind: ShapeKind::Disk, center: c, radius: r, half: [0.0; 2], velocity: v, value: 1.0 };
    vec![
        disk([-0.45, -0.3], 0.22, [0.6, 0.3]),
        disk([0.35, 0.45], 0.15, [-0.3, -0.6]),
        Shape { kind: ShapeKind::Rect, center: [0.0, -0.6], radius: 0.0, half: [0.5, 0.08], velocity: [0.0; 2], value: 1.0 },
    ]
}

/// `n` random disks and rectangles kept inside `[-0.8, 0.8]²` over `t ∈ [0, 1]`.
pub fn random_shapes<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Shape> {
    (0..n)
        .map(|_| {
            let disk = rng.random_bool(0.5);
            let size = rng.random_range(0.06..0.2);
            let start = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
            let end: [f64; 2] = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
            Shape {
                kind: if disk { ShapeKind::Disk } else { ShapeKind::Rect },
                center: start,
                radius: size,
                half: [size, size * rng.random_range(0.4..1.0)],
                velocity: [end[0] - start[0], end[1] - start[1]],
                value: 1.0,
            }
        })
        .collect()
}

/// Pixel value is the largest value among shapes covering the cell center.
pub fn phantom_dynamic_ct(grid: &SpatialGrid<f64>, t_grid: &[f64], shapes: &[Shape]) -> SpaceTimeField<f64> {
    let sites = grid.sites();
    let values = DMatrix::from_fn(grid.len(), t_grid.len(), |i, j| {
        let (x, y) = sites[i];
        shapes
            .iter()
            .filter(|s| s.contains(x, y, t_grid[j]))
            .map(|s| s.value)
            .fold(0.0, f64::max)
    });
    SpaceTimeField::new(values, grid.clone(), t_grid.to_vec()).expect("shape matches by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use stbp::basis::{build_grid, Domain};
    use stbp::tkernel::uniform_time_grid;

    #[test]
    fn annulus_points() {
        assert_eq!(annulus_value(0.0, 0.0, 0.5), 0.0);
        assert_eq!(annulus_value(0.5, 0.0, 0.9), 0.9);
        assert_eq!(annulus_value(0.3, 0.4, 0.9), 0.9);
    }

    #[test]
    fn annulus_values_and_shrinking() {
        let g = build_grid(128, 128, Domain::symmetric_unit()).unwrap();
        let t = uniform_time_grid(10, 0.0, 1.0);
        let u = phantom_annulus(&g, &t);
        for (j, &tj) in t.iter().enumerate() {
            assert!(u.values.column(j).iter().all(|&v| v == 0.0 || v == tj));
        }
        let counts: Vec<usize> = (0..10).map(|j| u.values.column(j).iter().filter(|&&v| v != 0.0).count()).collect();
        assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
    }

    #[test]
    fn static_and_moving_shapes() {
        let g = build_grid(32, 32, Domain::symmetric_unit()).unwrap();
        let t = uniform_time_grid(5, 0.0, 1.0);
        let still = Shape { kind: ShapeKind::Disk, center: [0.1, 0.0], radius: 0.3, half: [0.0; 2], velocity: [0.0; 2], value: 1.0 };
        let u = phantom_dynamic_ct(&g, &t, std::slice::from_ref(&still));
        for j in 1..5 {
            assert_eq!(u.values.column(j), u.values.column(0));
        }
        let moving = Shape { velocity: [0.5, -0.25], ..still };
        let dt = t[1] - t[0];
        let (a, b) = (moving.center_at(t[1]), moving.center_at(t[2]));
        assert!((b[0] - a[0] - 0.5 * dt).abs() < 1e-15 && (b[1] - a[1] + 0.25 * dt).abs() < 1e-15);
        let u = phantom_dynamic_ct(&g, &t, &[moving]);
        assert_ne!(u.values.column(0), u.values.column(4));
        assert!(u.values.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
