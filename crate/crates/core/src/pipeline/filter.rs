//! Occlusion, truncation and size filtering of annotated instances.

use serde::{Deserialize, Serialize};

use super::coco::AnnotationRecord;
use crate::geometry::iou;

/// Which instances count as neighbours for the overlap rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapScope {
    /// Every other annotated instance, whatever its category.
    #[default]
    AllInstances,
    /// Only other instances of the filtered category.
    SameCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Instances whose IoU with any neighbour exceeds this are dropped.
    pub max_iou: f64,
    /// Instances closer than this many pixels to an image edge are dropped.
    pub min_edge_distance: f64,
    /// Instances with a box area below this (px²) are dropped.
    pub min_area: f64,
    pub overlap_scope: OverlapScope,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_iou: 0.3,
            min_edge_distance: 18.0,
            min_area: 2500.0,
            overlap_scope: OverlapScope::AllInstances,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceRef {
    pub image_id: u64,
    pub instance_id: u64,
}

/// Why an instance was rejected; `None` from [`rejection`] means it survives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    WrongCategory,
    Crowd,
    Overlap,
    NearEdge,
    TooSmall,
}

/// Applies the three filtering passes to instance `idx` of `record`.
pub fn rejection(
    record: &AnnotationRecord,
    idx: usize,
    category: u32,
    cfg: &FilterConfig,
) -> Option<Rejection> {
    let inst = &record.instances[idx];
    if inst.category != category {
        return Some(Rejection::WrongCategory);
    }
    if inst.crowd {
        return Some(Rejection::Crowd);
    }
    let overlaps = record.instances.iter().enumerate().any(|(j, other)| {
        j != idx
            && (cfg.overlap_scope == OverlapScope::AllInstances || other.category == category)
            && iou(&inst.bbox, &other.bbox) > cfg.max_iou
    });
    if overlaps {
        return Some(Rejection::Overlap);
    }
    if inst
        .bbox
        .edge_distance(f64::from(record.width), f64::from(record.height))
        < cfg.min_edge_distance
    {
        return Some(Rejection::NearEdge);
    }
    if inst.bbox.area() < cfg.min_area {
        return Some(Rejection::TooSmall);
    }
    None
}

/// Instances of `category` that pass every filter, sorted by `(image_id, instance_id)`.
pub fn filter_instances(
    records: &[AnnotationRecord],
    category: u32,
    cfg: &FilterConfig,
) -> Vec<InstanceRef> {
    let mut kept: Vec<InstanceRef> = records
        .iter()
        .flat_map(|rec| {
            (0..rec.instances.len())
                .filter(move |&i| rejection(rec, i, category, cfg).is_none())
                .map(move |i| InstanceRef {
                    image_id: rec.image_id,
                    instance_id: rec.instances[i].id,
                })
        })
        .collect();
    kept.sort();
    kept
}
