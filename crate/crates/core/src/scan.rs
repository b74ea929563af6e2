//! Timestamped LiDAR points and scans.

use nalgebra::Vector3;

/// One LiDAR return: capture time plus coordinates in the LiDAR frame at
/// that time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub t: f64,
    pub pos: Vector3<f64>,
}

/// One full revolution of the spinning LiDAR.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    /// Reference time of the scan (start of the revolution); the scan's
    /// nominal frame is the LiDAR pose at this instant.
    pub ref_time: f64,
    pub points: Vec<LidarPoint>,
}

impl Scan {
    pub fn new(ref_time: f64, points: Vec<LidarPoint>) -> Self {
        Self { ref_time, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Time span `(min, max)` of the contained points, or `None` when
    /// empty.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        let first = self.points.first()?.t;
        let last = self.points.last()?.t;
        Some((first, last))
    }
}
