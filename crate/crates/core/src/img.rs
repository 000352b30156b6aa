//! Linear-light RGB images and the sRGB transfer function.

use crate::error::{Error, Result};

/// Row-major linear RGB image, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// height * width * 3 values.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Self {
        assert_eq!(pixels.len(), width * height);
        let mut data = Vec::with_capacity(width * height * 3);
        for p in pixels {
            data.extend_from_slice(&p);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Input(format!(
                "image dimensions differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Encode to 8-bit sRGB bytes (RGB interleaved).
    pub fn to_srgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| srgb_encode_u8(v)).collect()
    }

    pub fn from_srgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "expected {} bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| srgb_decode_u8(b)).collect(),
        })
    }
}

/// Linear [0,1] -> sRGB byte with rounding.
pub fn srgb_encode_u8(linear: f64) -> u8 {
    let l = linear.clamp(0.0, 1.0);
    let s = if l <= 0.0031308 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    };
    (s * 255.0).round() as u8
}

/// sRGB byte -> linear [0,1].
pub fn srgb_decode_u8(byte: u8) -> f64 {
    let s = byte as f64 / 255.0;
    if s <= 0.04045 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_encode_decode_identity_on_byte_lattice() {
        for b in 0u16..=255 {
            let b = b as u8;
            assert_eq!(srgb_encode_u8(srgb_decode_u8(b)), b);
        }
    }

    #[test]
    fn srgb_known_values() {
        assert_eq!(srgb_decode_u8(0), 0.0);
        assert!((srgb_decode_u8(255) - 1.0).abs() < 1e-12);
        // 8-bit 128 -> ~0.2158 linear.
        assert!((srgb_decode_u8(128) - 0.21586).abs() < 1e-4);
    }

    #[test]
    fn image_round_trip() {
        let mut img = Image::new(3, 2);
        img.set_pixel(1, 1, [0.25, 0.5, 0.75]);
        let bytes = img.to_srgb8();
        let back = Image::from_srgb8(3, 2, &bytes).unwrap();
        let p = back.pixel(1, 1);
        for ch in 0..3 {
            assert!((p[ch] - img.pixel(1, 1)[ch]).abs() < 3e-3);
        }
    }
}
