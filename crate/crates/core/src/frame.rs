//! Agent-centric coordinate frame: the last observed point is the origin,
//! the recent heading is the +x axis, and distances are in units of
//! [`FRAME_SCALE`] meters.

use crate::tensor::Tensor;

pub const FRAME_SCALE: f64 = 10.0;

/// Steps back from the last observation used to estimate the heading.
pub const HEADING_LOOKBACK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: [f64; 2],
    pub cos: f64,
    pub sin: f64,
    pub scale: f64,
}

impl Frame {
    pub fn identity() -> Self {
        Self {
            origin: [0.0, 0.0],
            cos: 1.0,
            sin: 0.0,
            scale: 1.0,
        }
    }

    /// Frame of an observed track; a stationary track keeps the world axes.
    pub fn from_observed(observed: &[[f64; 2]]) -> Self {
        let Some(&last) = observed.last() else {
            return Self::identity();
        };
        let first = observed[observed.len().saturating_sub(HEADING_LOOKBACK + 1)];
        let (dx, dy) = (last[0] - first[0], last[1] - first[1]);
        let norm = dx.hypot(dy);
        let (cos, sin) = if norm > 1e-6 { (dx / norm, dy / norm) } else { (1.0, 0.0) };
        Self {
            origin: last,
            cos,
            sin,
            scale: FRAME_SCALE,
        }
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.origin[0], p[1] - self.origin[1]);
        [
            (self.cos * dx + self.sin * dy) / self.scale,
            (-self.sin * dx + self.cos * dy) / self.scale,
        ]
    }

    pub fn to_world(&self, q: [f64; 2]) -> [f64; 2] {
        let (x, y) = (q[0] * self.scale, q[1] * self.scale);
        [
            self.origin[0] + self.cos * x - self.sin * y,
            self.origin[1] + self.sin * x + self.cos * y,
        ]
    }

    /// `[n, 2]` tensor of local coordinates.
    pub fn encode(&self, points: &[[f64; 2]]) -> Tensor {
        let data = points.iter().flat_map(|p| self.to_local(*p)).collect();
        Tensor::new(&[points.len().max(1), 2], data).expect("non-empty track")
    }

    /// World points from any tensor whose last axis has size 2.
    pub fn decode(&self, t: &Tensor) -> Tensor {
        let data = t
            .data()
            .chunks_exact(2)
            .flat_map(|q| self.to_world([q[0], q[1]]))
            .collect();
        Tensor::with_dtype(t.shape(), data, t.dtype()).expect("same shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_orientation() {
        let obs: Vec<[f64; 2]> = (0..8).map(|i| [3.0 + i as f64, 5.0 + i as f64]).collect();
        let f = Frame::from_observed(&obs);
        assert_eq!(f.to_local(obs[7]), [0.0, 0.0]);
        let ahead = f.to_local([11.0, 13.0]);
        assert!((ahead[0] - 2f64.sqrt() / FRAME_SCALE).abs() < 1e-12 && ahead[1].abs() < 1e-12);
        let p = [-4.2, 17.5];
        let back = f.to_world(f.to_local(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn stationary_track_keeps_axes() {
        let f = Frame::from_observed(&[[1.0, 2.0]; 4]);
        assert_eq!((f.cos, f.sin), (1.0, 0.0));
    }
}
