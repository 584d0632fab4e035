//! Wire formats: images travel as base64 PNG, or as raw float planes.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use branchgan::edit::binarize;
use branchgan::{EditConstraints, Image};
use serde::{Deserialize, Serialize};

/// An image in a request body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImagePayload {
    /// Base64-encoded PNG.
    Png(String),
    /// Planar floats in [0, 1], channel-major.
    Floats {
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    },
}

impl ImagePayload {
    /// Decodes to `channels` channels (1 gives grayscale).
    pub fn decode(&self, channels: usize) -> Result<Image, String> {
        let im = match self {
            ImagePayload::Png(b64) => {
                let bytes = STANDARD.decode(b64.trim()).map_err(|e| format!("bad base64: {e}"))?;
                if channels == 1 {
                    Image::gray_from_png_bytes(&bytes)
                } else {
                    Image::from_png_bytes(&bytes)
                }
                .map_err(|e| e.to_string())?
            }
            ImagePayload::Floats {
                channels: c,
                height,
                width,
                data,
            } => {
                if data.len() != c * height * width {
                    return Err(format!("float image has {} values, expected {c}x{height}x{width}", data.len()));
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err("float image contains non-finite values".into());
                }
                let im = Image::new(*c, *height, *width, data.clone());
                if *c == channels {
                    im
                } else if channels == 1 {
                    im.to_gray()
                } else {
                    return Err(format!("image has {c} channels, expected {channels}"));
                }
            }
        };
        Ok(im)
    }
}

pub fn encode_png(image: &Image) -> Result<String, String> {
    Ok(STANDARD.encode(image.to_png_bytes().map_err(|e| e.to_string())?))
}

/// Edit constraints as sent by clients.
///
/// A missing mask means "every pixel" when a color map is given and "none"
/// otherwise. A missing color map is all zeros.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintsPayload {
    pub color: Option<ImagePayload>,
    pub mask: Option<ImagePayload>,
    pub edge: Option<ImagePayload>,
}

impl ConstraintsPayload {
    pub fn decode(&self, resolution: (usize, usize), channels: usize) -> Result<EditConstraints, String> {
        let (h, w) = resolution;
        let color = match &self.color {
            Some(c) => c.decode(channels)?,
            None => Image::filled(channels, h, w, 0.0),
        };
        let mask = match (&self.mask, &self.color) {
            (Some(m), _) => binarize(m.decode(1)?),
            (None, Some(_)) => Image::filled(1, h, w, 1.0),
            (None, None) => Image::filled(1, h, w, 0.0),
        };
        let edge = self.edge.as_ref().map(|e| e.decode(1)).transpose()?;
        let c = EditConstraints { color, mask, edge };
        c.validate(resolution, channels).map_err(|e| e.to_string())?;
        Ok(c)
    }
}
