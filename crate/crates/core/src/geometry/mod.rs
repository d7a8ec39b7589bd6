//! Rigid transforms, rotated boxes, overlap and suppression, and BEV
//! feature-map resampling.

mod boxes;
mod nms;
mod pose;
mod warp;

pub use boxes::{intersection_area_bev, normalize_yaw, rotated_iou_bev, ObjectClass, RotatedBox};
pub use nms::{nms, nms_indices};
pub use pose::{
    extract_2d, relative_transform, transform_points, transform_scan_points, Pose, Transform2D,
};
pub use warp::{warp_feature_map, warp_feature_map_backward, GridMeta};
