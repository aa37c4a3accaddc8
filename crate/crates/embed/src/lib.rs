//! Byte-level session API: load a model, track a face across RGBA frames
//! and composite makeup products.
//!
//! [`Session`] is the safe layer. The `ta_*` functions expose the same calls
//! over plain pointers, lengths and `i32` status codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | ok |
//! | 1 | malformed model bytes |
//! | 2 | payload checksum mismatch |
//! | 3 | invalid argument |
//! | 4 | tracking lost |
//! | 5 | numeric failure |
//!
//! A product list is a sequence of 6-byte records: part id, red, green,
//! blue, opacity (0-255 maps to 0-1) and feather radius in pixels.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};

use image::{Rgb, RgbImage};
use tinyalign::imaging::PixelBox;
use tinyalign::model::{from_bytes, track, ModelWeights, TrackState};
use tinyalign::render::{build_part_mask, blend, PartMask, ProductSpec};
use tinyalign::{Error, FacePart, LandmarkLayout, LandmarkSet};

pub const OK: i32 = 0;
pub const ERR_FORMAT: i32 = 1;
pub const ERR_CHECKSUM: i32 = 2;
pub const ERR_INVALID_ARGUMENT: i32 = 3;
pub const ERR_TRACKING_LOST: i32 = 4;
pub const ERR_NUMERIC: i32 = 5;

pub const PRODUCT_RECORD_BYTES: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedError {
    pub code: i32,
    pub message: String,
}

impl EmbedError {
    fn invalid(message: impl Into<String>) -> Self {
        EmbedError {
            code: ERR_INVALID_ARGUMENT,
            message: message.into(),
        }
    }
}

impl fmt::Display for EmbedError {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "error {}: {}", self.code, self.message)
    }
}

impl std::error::Error for EmbedError {}

pub fn error_code(e: &Error) -> i32 {
    match e {
        Error::Format(_) | Error::Json(_) | Error::Io(_) | Error::Image(_) => ERR_FORMAT,
        Error::Checksum { .. } => ERR_CHECKSUM,
        Error::TrackingLost(_) => ERR_TRACKING_LOST,
        Error::NonFinite(_) | Error::Diverged { .. } | Error::NonScalarLoss(_) | Error::MissingGrad(_) => ERR_NUMERIC,
        Error::Shape(_) | Error::InvalidAxis { .. } | Error::Degenerate(_) | Error::Config(_) | Error::Data(_) => {
            ERR_INVALID_ARGUMENT
        }
    }
}

impl From<Error> for EmbedError {
    fn from(e: Error) -> Self {
        EmbedError {
            code: error_code(&e),
            message: e.to_string(),
        }
    }
}

pub type EmbedResult<T> = Result<T, EmbedError>;

/// Borrowed RGBA8 pixels, stride `4·width`.
#[derive(Clone, Copy, Debug)]
pub struct FrameBuffer<'a> {
    pub width: u32,
    pub height: u32,
    pub rgba: &'a [u8],
}

impl<'a> FrameBuffer<'a> {
    pub fn new(width: u32, height: u32, rgba: &'a [u8]) -> EmbedResult<Self> {
        if width == 0 || height == 0 {
            return Err(EmbedError::invalid(format!("frame is {width}x{height}")));
        }
        let want = 4 * width as usize * height as usize;
        if rgba.len() != want {
            return Err(EmbedError::invalid(format!(
                "{width}x{height} RGBA frame needs {want} bytes, got {}",
                rgba.len()
            )));
        }
        Ok(FrameBuffer { width, height, rgba })
    }

    fn to_rgb(self, out: &mut RgbImage) {
        if out.dimensions() != (self.width, self.height) {
            *out = RgbImage::new(self.width, self.height);
        }
        for (dst, src) in out.pixels_mut().zip(self.rgba.chunks_exact(4)) {
            *dst = Rgb([src[0], src[1], src[2]]);
        }
    }
}

pub fn parse_products(bytes: &[u8]) -> EmbedResult<Vec<ProductSpec>> {
    if bytes.len() % PRODUCT_RECORD_BYTES != 0 {
        return Err(EmbedError::invalid(format!(
            "product list of {} bytes is not a whole number of {PRODUCT_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(PRODUCT_RECORD_BYTES)
        .map(|r| {
            let part = FacePart::from_id(r[0]).ok_or_else(|| EmbedError::invalid(format!("unknown part id {}", r[0])))?;
            Ok(ProductSpec {
                part,
                color: [r[1], r[2], r[3]],
                opacity: r[4] as f32 / 255.0,
                feather_radius: r[5] as f32,
            })
        })
        .collect()
}

pub fn encode_products(products: &[ProductSpec]) -> Vec<u8> {
    products
        .iter()
        .flat_map(|p| {
            let [r, g, b] = p.color;
            let opacity = (p.opacity.clamp(0.0, 1.0) * 255.0).round() as u8;
            let feather = p.feather_radius.clamp(0.0, 255.0).round() as u8;
            [p.part.id(), r, g, b, opacity, feather]
        })
        .collect()
}

pub struct Session {
    weights: ModelWeights,
    layout: LandmarkLayout,
    state: Option<TrackState>,
    rgb: RgbImage,
}

impl Session {
    pub fn create(model: &[u8]) -> EmbedResult<Self> {
        let weights = from_bytes(model)?;
        let layout = weights.config.layout.layout();
        Ok(Session {
            weights,
            layout,
            state: None,
            rgb: RgbImage::new(0, 0),
        })
    }

    pub fn num_landmarks(&self) -> usize {
        self.layout.len()
    }

    pub fn input_size(&self) -> usize {
        self.weights.config.input_size
    }

    pub fn is_tracking(&self) -> bool {
        self.state.is_some()
    }

    /// Forget the tracked face; the next [`Session::track`] needs a seed box.
    pub fn reset(&mut self) {
        self.state = None;
    }

    /// Landmarks as `[x0, y0, x1, y1, ...]` in frame pixels. `seed_box`
    /// (`[x0, y0, x1, y1]`, pixel edges) replaces the tracked box. After a
    /// tracking loss the session needs a new seed.
    pub fn track(&mut self, frame: FrameBuffer, seed_box: Option<[f32; 4]>) -> EmbedResult<Vec<f32>> {
        let state = match seed_box {
            Some(b) => {
                let b = PixelBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64);
                if !b.is_finite() || b.width() <= 0.0 || b.height() <= 0.0 {
                    return Err(EmbedError::invalid(format!("seed box {b:?} is empty")));
                }
                TrackState::seeded(b)
            }
            None => self
                .state
                .clone()
                .ok_or_else(|| EmbedError::invalid("the first frame needs a seed box"))?,
        };
        frame.to_rgb(&mut self.rgb);
        match track(&self.rgb, &state, &self.weights) {
            Ok((landmarks, next)) => {
                self.state = Some(next);
                Ok(landmarks.flat())
            }
            Err(e) => {
                self.state = None;
                Err(e.into())
            }
        }
    }

    /// A new RGBA frame with `products` composited in order. Alpha is
    /// copied from the input. Products whose outline encloses no area are
    /// skipped.
    pub fn render(&mut self, frame: FrameBuffer, landmarks: &[f32], products: &[u8]) -> EmbedResult<Vec<u8>> {
        let l = self.num_landmarks();
        if landmarks.len() != 2 * l {
            return Err(EmbedError::invalid(format!(
                "expected {} landmark values, got {}",
                2 * l,
                landmarks.len()
            )));
        }
        let products = parse_products(products)?;
        if products.is_empty() {
            return Ok(frame.rgba.to_vec());
        }
        let set = LandmarkSet::new(landmarks.chunks_exact(2).map(|p| [p[0] as f64, p[1] as f64]).collect());
        let mut layers: Vec<(PartMask, ProductSpec)> = Vec::with_capacity(products.len());
        for p in products {
            if p.opacity == 0.0 {
                continue;
            }
            match build_part_mask(&set, &self.layout, p.part, frame.width, frame.height, p.feather_radius as f64) {
                Ok(mask) => layers.push((mask, p)),
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if layers.is_empty() {
            return Ok(frame.rgba.to_vec());
        }
        frame.to_rgb(&mut self.rgb);
        let refs: Vec<_> = layers.iter().map(|(m, p)| (m, p)).collect();
        let rgb = blend(&self.rgb, &refs)?;
        let mut out = frame.rgba.to_vec();
        for (dst, src) in out.chunks_exact_mut(4).zip(rgb.pixels()) {
            dst[..3].copy_from_slice(&src.0);
        }
        Ok(out)
    }
}

fn guarded(f: impl FnOnce() -> i32) -> i32 {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(ERR_NUMERIC)
}

/// # Safety
/// `ptr` must be valid for `len` reads, or null with `len == 0`.
unsafe fn bytes<'a>(ptr: *const u8, len: usize) -> Option<&'a [u8]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Create a session from serialized model bytes and store its handle in
/// `out`.
///
/// # Safety
/// `model` must be valid for `len` reads and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ta_session_create(model: *const u8, len: usize, out: *mut *mut Session) -> i32 {
    guarded(|| {
        let Some(bytes) = bytes(model, len) else {
            return ERR_INVALID_ARGUMENT;
        };
        if out.is_null() {
            return ERR_INVALID_ARGUMENT;
        }
        match Session::create(bytes) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(s));
                OK
            }
            Err(e) => e.code,
        }
    })
}

/// # Safety
/// `s` must come from [`ta_session_create`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ta_session_free(s: *mut Session) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of landmarks, or -1 for a null session.
///
/// # Safety
/// `s` must be null or a live session.
#[no_mangle]
pub unsafe extern "C" fn ta_session_num_landmarks(s: *const Session) -> i32 {
    s.as_ref().map_or(-1, |s| s.num_landmarks() as i32)
}

/// Network input side, or -1 for a null session.
///
/// # Safety
/// `s` must be null or a live session.
#[no_mangle]
pub unsafe extern "C" fn ta_session_input_size(s: *const Session) -> i32 {
    s.as_ref().map_or(-1, |s| s.input_size() as i32)
}

/// Track one frame. `seed_box` is null or points at four floats. `out`
/// receives `2L` floats.
///
/// # Safety
/// Pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ta_session_track(
    s: *mut Session,
    rgba: *const u8,
    rgba_len: usize,
    width: u32,
    height: u32,
    seed_box: *const f32,
    out: *mut f32,
    out_len: usize,
) -> i32 {
    guarded(|| {
        let (Some(s), Some(pixels)) = (s.as_mut(), bytes(rgba, rgba_len)) else {
            return ERR_INVALID_ARGUMENT;
        };
        if out.is_null() || out_len < 2 * s.num_landmarks() {
            return ERR_INVALID_ARGUMENT;
        }
        let frame = match FrameBuffer::new(width, height, pixels) {
            Ok(f) => f,
            Err(e) => return e.code,
        };
        let seed = (!seed_box.is_null()).then(|| {
            let b = std::slice::from_raw_parts(seed_box, 4);
            [b[0], b[1], b[2], b[3]]
        });
        match s.track(frame, seed) {
            Ok(v) => {
                std::slice::from_raw_parts_mut(out, v.len()).copy_from_slice(&v);
                OK
            }
            Err(e) => e.code,
        }
    })
}

/// Composite products over a frame into `out` (`4·width·height` bytes).
/// The input frame is not modified.
///
/// # Safety
/// Pointers must be valid for their stated lengths; `out` must not alias
/// `rgba`.
#[no_mangle]
pub unsafe extern "C" fn ta_session_render(
    s: *mut Session,
    rgba: *const u8,
    rgba_len: usize,
    width: u32,
    height: u32,
    landmarks: *const f32,
    landmarks_len: usize,
    products: *const u8,
    products_len: usize,
    out: *mut u8,
    out_len: usize,
) -> i32 {
    guarded(|| {
        let (Some(s), Some(pixels), Some(products)) = (s.as_mut(), bytes(rgba, rgba_len), bytes(products, products_len))
        else {
            return ERR_INVALID_ARGUMENT;
        };
        if landmarks.is_null() || out.is_null() || out_len != rgba_len {
            return ERR_INVALID_ARGUMENT;
        }
        let frame = match FrameBuffer::new(width, height, pixels) {
            Ok(f) => f,
            Err(e) => return e.code,
        };
        let lm = std::slice::from_raw_parts(landmarks, landmarks_len);
        match s.render(frame, lm, products) {
            Ok(v) => {
                std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&v);
                OK
            }
            Err(e) => e.code,
        }
    })
}
