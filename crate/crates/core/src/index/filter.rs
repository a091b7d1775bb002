use crate::model::{SpatialExtent, TemporalExtent};

/// Closed-box intersection with antimeridian support: crossing boxes are
/// split at ±180 and the halves compared pairwise.
pub fn bbox_intersects(a: &SpatialExtent, b: &SpatialExtent) -> bool {
    let (a_parts, b_parts) = (a.split(), b.split());
    a_parts.iter().any(|p| {
        b_parts.iter().any(|q| {
            p.west <= q.east && p.east >= q.west && p.south <= q.north && p.north >= q.south
        })
    })
}

/// Closed-interval overlap.
pub fn temporal_overlaps(a: &TemporalExtent, b: &TemporalExtent) -> bool {
    a.start <= b.end && a.end >= b.start
}
