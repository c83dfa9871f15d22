use serde::{Deserialize, Serialize};

use super::ClassifierError;

/// Side length of the square classifier input.
pub const FACE_SIZE: usize = 64;

/// An 8-bit face crop in row-major, channel-interleaved (HWC) layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCrop {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawCrop {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ClassifierError> {
        if width == 0 || height == 0 {
            return Err(ClassifierError::EmptyImage);
        }
        if channels != 1 && channels != 3 {
            return Err(ClassifierError::ShapeMismatch(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(ClassifierError::ShapeMismatch(format!(
                "{width}x{height}x{channels} crop needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn grayscale(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ClassifierError> {
        Self::new(width, height, 1, data)
    }

    /// ITU-R BT.601 luma for RGB crops; grayscale crops are returned as-is.
    pub fn to_grayscale(&self) -> RawCrop {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| {
                let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        RawCrop {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb(&self) -> RawCrop {
        if self.channels == 3 {
            return self.clone();
        }
        RawCrop {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn with_channels(&self, channels: usize) -> Result<RawCrop, ClassifierError> {
        match channels {
            1 => Ok(self.to_grayscale()),
            3 => Ok(self.to_rgb()),
            n => Err(ClassifierError::ShapeMismatch(format!(
                "unsupported channel count {n}"
            ))),
        }
    }
}

/// A normalized 64x64 classifier input in planar (CHW) layout, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    data: Vec<f64>,
    pub provenance: Option<String>,
}

impl ImageTensor {
    pub fn new(channels: usize, data: Vec<f64>) -> Result<Self, ClassifierError> {
        Self::with_size(channels, FACE_SIZE, data)
    }

    /// Tensor with an arbitrary square side. Only the 64x64 form is accepted
    /// by [`preprocess_face`]; other sizes are used for fast gradient checks.
    pub fn with_size(channels: usize, side: usize, data: Vec<f64>) -> Result<Self, ClassifierError> {
        if channels == 0 || data.len() != channels * side * side {
            return Err(ClassifierError::ShapeMismatch(format!(
                "expected {channels}x{side}x{side} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ClassifierError::InvalidPixels);
        }
        Ok(Self {
            channels,
            data,
            provenance: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn side(&self) -> usize {
        ((self.data.len() / self.channels) as f64).sqrt() as usize
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Bilinear resize to 64x64 (pixel-center aligned, edge clamped) followed by
/// division by 255.
pub fn preprocess_face(raw: &RawCrop) -> Result<ImageTensor, ClassifierError> {
    if raw.width == 0 || raw.height == 0 {
        return Err(ClassifierError::EmptyImage);
    }
    let c = raw.channels;
    let out = FACE_SIZE;
    let scale_x = raw.width as f64 / out as f64;
    let scale_y = raw.height as f64 / out as f64;
    let taps = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..out).map(|x| taps(x, scale_x, raw.width)).collect();
    let ys: Vec<_> = (0..out).map(|y| taps(y, scale_y, raw.height)).collect();

    let px = |x: usize, y: usize, ch: usize| raw.data[(y * raw.width + x) * c + ch] as f64;
    let mut data = vec![0.0; c * out * out];
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = px(x0, y0, ch) * (1.0 - fx) + px(x1, y0, ch) * fx;
                let bottom = px(x0, y1, ch) * (1.0 - fx) + px(x1, y1, ch) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data[ch * out * out + oy * out + ox] = (v / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(side: usize, value: u8) -> RawCrop {
        RawCrop::grayscale(side, side, vec![value; side * side]).unwrap()
    }

    #[test]
    fn normalization_endpoints() {
        let white = preprocess_face(&constant(64, 255)).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
        let black = preprocess_face(&constant(64, 0)).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_survives_downscale() {
        let t = preprocess_face(&constant(128, 51)).unwrap();
        assert_eq!(t.data().len(), 64 * 64);
        assert!(t.data().iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn non_square_rgb_upscale_keeps_channels() {
        let raw = RawCrop::new(10, 7, 3, vec![200; 10 * 7 * 3]).unwrap();
        let t = preprocess_face(&raw).unwrap();
        assert_eq!(t.channels(), 3);
        assert!(t.data().iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn identity_size_is_exact() {
        let data: Vec<u8> = (0..64 * 64).map(|i| (i % 251) as u8).collect();
        let t = preprocess_face(&RawCrop::grayscale(64, 64, data.clone()).unwrap()).unwrap();
        for (v, raw) in t.data().iter().zip(&data) {
            assert!((v - *raw as f64 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_bad_shapes() {
        assert_eq!(
            RawCrop::grayscale(0, 4, vec![]),
            Err(ClassifierError::EmptyImage)
        );
        let raw = RawCrop {
            width: 0,
            height: 3,
            channels: 1,
            data: vec![],
        };
        assert_eq!(preprocess_face(&raw), Err(ClassifierError::EmptyImage));
        assert!(RawCrop::grayscale(4, 4, vec![0; 15]).is_err());
    }

    #[test]
    fn gray_conversion() {
        let rgb = RawCrop::new(1, 1, 3, vec![255, 255, 255]).unwrap();
        assert_eq!(rgb.to_grayscale().data, vec![255]);
        assert_eq!(constant(2, 9).to_rgb().data, vec![9; 12]);
    }
}
