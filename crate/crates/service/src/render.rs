//! Slice payloads: windowed 8-bit PNG for display, raw little-endian
//! values for exact comparison.

use slicelab_core::volume::SliceView;

use crate::error::ServiceError;

/// Display window in Hounsfield units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub level: f64,
    pub width: f64,
}

impl Default for Window {
    /// A lung window.
    fn default() -> Self {
        Self { level: -600.0, width: 1500.0 }
    }
}

impl Window {
    /// Maps `[level - width/2, level + width/2]` linearly onto `0..=255`.
    pub fn apply(&self, v: i16) -> u8 {
        let lo = self.level - self.width / 2.0;
        let t = (f64::from(v) - lo) / self.width;
        (t.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

pub fn slice_png(view: &SliceView, window: Window) -> Result<Vec<u8>, ServiceError> {
    if !(window.width > 0.0) {
        return Err(ServiceError::BadRequest(format!("window width must be positive, got {}", window.width)));
    }
    let pixels: Vec<u8> = view.pixels.iter().map(|&v| window.apply(v)).collect();
    gray8_png(&pixels, view.width, view.height)
}

pub fn gray8_png(pixels: &[u8], width: usize, height: usize) -> Result<Vec<u8>, ServiceError> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| ServiceError::Internal(e.to_string()))?;
    writer.write_image_data(pixels).map_err(|e| ServiceError::Internal(e.to_string()))?;
    writer.finish().map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(out)
}

pub fn slice_raw(view: &SliceView) -> Vec<u8> {
    view.pixels.iter().flat_map(|v| v.to_le_bytes()).collect()
}
