//! Frame-to-frame tracking: each frame's landmarks define the next crop.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::imaging::{crop_to_tensor, PixelBox};
use crate::landmarks::LandmarkSet;

use super::weights::ModelWeights;

/// Growth of the landmark bounding box per side, as a fraction of its
/// diagonal.
pub const TRACK_MARGIN: f64 = 0.25;

/// Smallest usable crop side in frame pixels.
const MIN_BOX_SIDE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub previous: Option<LandmarkSet>,
    pub face_box: PixelBox,
    /// Frames processed since the box was last seeded externally.
    pub staleness: usize,
}

impl TrackState {
    pub fn seeded(face_box: PixelBox) -> Self {
        TrackState {
            previous: None,
            face_box,
            staleness: 0,
        }
    }
}

fn usable_box(b: &PixelBox, frame: &RgbImage) -> Result<PixelBox> {
    let clamped = b.clamp_to(frame.width(), frame.height());
    if !clamped.is_finite() || clamped.width() < MIN_BOX_SIDE || clamped.height() < MIN_BOX_SIDE {
        return Err(Error::TrackingLost(format!("face box {b:?} has no usable overlap with the frame")));
    }
    Ok(clamped)
}

/// The crop the tracker would use for `state` on `frame`.
pub fn crop_box(frame: &RgbImage, state: &TrackState) -> Result<PixelBox> {
    usable_box(&state.face_box, frame)
}

/// Predict landmarks inside the state's box and return them in frame pixel
/// coordinates together with the updated state.
pub fn track(frame: &RgbImage, state: &TrackState, weights: &ModelWeights) -> Result<(LandmarkSet, TrackState)> {
    let crop = usable_box(&state.face_box, frame)?;
    let input = crop_to_tensor(frame, &crop, weights.config.input_size)?;
    let normalized = weights.predict(&input)?;
    let landmarks = normalized.map(|u| crop.from_normalized(u));
    // A degenerate next box is reported by the next call, so this frame's
    // landmarks are still returned.
    let next = PixelBox::around_landmarks(&landmarks, TRACK_MARGIN)
        .ok_or_else(|| Error::TrackingLost("no landmarks".into()))?
        .clamp_to(frame.width(), frame.height());
    Ok((
        landmarks.clone(),
        TrackState {
            previous: Some(landmarks),
            face_box: next,
            staleness: state.staleness + 1,
        },
    ))
}
