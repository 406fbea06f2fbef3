//! Decoded frames and frame sequences.

use crate::{Error, Result};

/// ITU-R BT.601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A single decoded frame, channel-planar, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
    /// Position in the source sequence.
    pub index: usize,
}

impl Frame {
    /// Builds a frame from channel-planar pixel data (`channels` planes of
    /// `height * width` values). `channels` must be 1 or 3.
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("frame dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "frames have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixel values", width * height * channels),
                got: format!("{}", pixels.len()),
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
            index: 0,
        })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    /// Constant single-channel frame.
    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::gray(width, height, vec![value; width * height])
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Value at `(channel, y, x)`.
    pub fn at(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.pixels[(channel * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Grayscale intensities, row-major. Color frames are reduced with the
    /// BT.601 luma weights.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        let plane = self.width * self.height;
        (0..plane)
            .map(|i| {
                let v = LUMA[0] * self.pixels[i]
                    + LUMA[1] * self.pixels[plane + i]
                    + LUMA[2] * self.pixels[2 * plane + i];
                v.clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// An ordered, shape-homogeneous list of frames.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameSequence {
    frames: Vec<Frame>,
}

impl FrameSequence {
    /// Validates that all frames share dimensions and re-indexes them by
    /// position.
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if let Some(bad) = frames.iter().find(|f| !f.same_shape(first)) {
                return Err(Error::ShapeMismatch {
                    expected: format!(
                        "{}x{}x{}",
                        first.channels, first.height, first.width
                    ),
                    got: format!("{}x{}x{}", bad.channels, bad.height, bad.width),
                });
            }
        }
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| f.with_index(i))
            .collect();
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn get(&self, i: usize) -> Option<&Frame> {
        self.frames.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Frame> {
        self.frames.iter()
    }

    /// `(channels, height, width)` of the frames, `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.frames
            .first()
            .map(|f| (f.channels, f.height, f.width))
    }

    /// Subsequence by index list, preserving the order given.
    pub fn pick(&self, indices: &[usize]) -> Result<Self> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("frame index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}

impl<'a> IntoIterator for &'a FrameSequence {
    type Item = &'a Frame;
    type IntoIter = std::slice::Iter<'a, Frame>;

    fn into_iter(self) -> Self::IntoIter {
        self.frames.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Frame::gray(2, 1, vec![0.0, 1.5]).is_err());
        assert!(Frame::gray(0, 1, vec![]).is_err());
    }

    #[test]
    fn sequence_requires_shared_shape() {
        let a = Frame::filled(2, 2, 0.0).unwrap();
        let b = Frame::filled(3, 2, 0.0).unwrap();
        assert!(FrameSequence::new(vec![a.clone(), b]).is_err());
        let seq = FrameSequence::new(vec![a.clone(), a]).unwrap();
        assert_eq!(seq.get(1).unwrap().index, 1);
    }

    #[test]
    fn luma_of_white_rgb_is_one() {
        let f = Frame::new(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert!((f.luma()[0] - 1.0).abs() < 1e-12);
    }
}
