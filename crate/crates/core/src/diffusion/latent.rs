use serde::{Deserialize, Serialize};

use crate::{Error, Frame, FrameSequence, Result};

/// Dense `(frames, channels, height, width)` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Latent {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?} ({} values)", shape.iter().product::<usize>()),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    /// Values per frame.
    pub fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame_slice(&self, f: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    /// Single-frame latent holding frame `f`.
    pub fn frame(&self, f: usize) -> Latent {
        let [_, c, h, w] = self.shape;
        Latent {
            shape: [1, c, h, w],
            data: self.frame_slice(f).to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", other.shape),
            });
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Latent, b: f64) -> Latent {
        debug_assert_eq!(self.shape, other.shape);
        Latent {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// Latent equals the pixels.
    #[default]
    Identity,
    /// 2x2 average pooling; decoding repeats each latent value over its block.
    AvgPool2,
    /// Pixels mapped affinely from `[0, 1]` to `[-1, 1]`.
    Centered,
}

/// Stand-in for a learned image autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Encoder {
    pub mode: EncoderMode,
}

impl Encoder {
    pub fn new(mode: EncoderMode) -> Self {
        Self { mode }
    }

    /// Latent `(channels, height, width)` for frames of the given size.
    pub fn latent_dims(&self, channels: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        match self.mode {
            EncoderMode::Identity | EncoderMode::Centered => Ok((channels, height, width)),
            EncoderMode::AvgPool2 => {
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(Error::invalid(format!(
                        "2x pooling needs even frame sizes, got {width}x{height}"
                    )));
                }
                Ok((channels, height / 2, width / 2))
            }
        }
    }

    pub fn encode(&self, frames: &FrameSequence) -> Result<Latent> {
        let (c, h, w) = frames
            .shape()
            .ok_or_else(|| Error::invalid("cannot encode an empty frame sequence"))?;
        let (lc, lh, lw) = self.latent_dims(c, h, w)?;
        let mut data = Vec::with_capacity(frames.len() * lc * lh * lw);
        for f in frames {
            match self.mode {
                EncoderMode::Identity => data.extend_from_slice(f.pixels()),
                EncoderMode::Centered => data.extend(f.pixels().iter().map(|p| 2.0 * p - 1.0)),
                EncoderMode::AvgPool2 => {
                    for ch in 0..c {
                        for y in 0..lh {
                            for x in 0..lw {
                                let s = f.at(ch, 2 * y, 2 * x)
                                    + f.at(ch, 2 * y, 2 * x + 1)
                                    + f.at(ch, 2 * y + 1, 2 * x)
                                    + f.at(ch, 2 * y + 1, 2 * x + 1);
                                data.push(s / 4.0);
                            }
                        }
                    }
                }
            }
        }
        Latent::new([frames.len(), lc, lh, lw], data)
    }

    /// Inverse of [`Encoder::encode`]; values are clamped into `[0, 1]`.
    pub fn decode(&self, z: &Latent) -> Result<FrameSequence> {
        let [n, c, lh, lw] = z.shape();
        let (h, w) = match self.mode {
            EncoderMode::Identity | EncoderMode::Centered => (lh, lw),
            EncoderMode::AvgPool2 => (lh * 2, lw * 2),
        };
        let mut frames = Vec::with_capacity(n);
        for f in 0..n {
            let src = z.frame_slice(f);
            let px: Vec<f64> = match self.mode {
                EncoderMode::Identity => src.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                EncoderMode::Centered => src.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(),
                EncoderMode::AvgPool2 => {
                    let mut out = Vec::with_capacity(c * h * w);
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                out.push(src[(ch * lh + y / 2) * lw + x / 2].clamp(0.0, 1.0));
                            }
                        }
                    }
                    out
                }
            };
            frames.push(Frame::new(w, h, c, px)?);
        }
        FrameSequence::new(frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq() -> FrameSequence {
        let f = |k: usize| {
            Frame::gray(4, 4, (0..16).map(|i| ((i * 3 + k) % 7) as f64 / 6.0).collect()).unwrap()
        };
        FrameSequence::new(vec![f(0), f(1), f(2)]).unwrap()
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let s = seq();
        let enc = Encoder::default();
        let z = enc.encode(&s).unwrap();
        assert_eq!(z.shape(), [3, 1, 4, 4]);
        assert_eq!(enc.decode(&z).unwrap(), s);
    }

    #[test]
    fn centered_maps_unit_interval_to_symmetric_range() {
        let s = seq();
        let enc = Encoder::new(EncoderMode::Centered);
        let z = enc.encode(&s).unwrap();
        for (a, p) in z.data().iter().zip(s.iter().flat_map(|f| f.pixels())) {
            assert_eq!(*a, 2.0 * p - 1.0);
        }
        for (orig, got) in s.iter().zip(enc.decode(&z).unwrap().iter()) {
            for (a, b) in orig.pixels().iter().zip(got.pixels()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pooled_round_trip_is_box_filter() {
        let s = seq();
        let enc = Encoder::new(EncoderMode::AvgPool2);
        let z = enc.encode(&s).unwrap();
        assert_eq!(z.shape(), [3, 1, 2, 2]);
        let back = enc.decode(&z).unwrap();
        // oracle: explicit 2x2 block mean, replicated over the block
        for (orig, got) in s.iter().zip(back.iter()) {
            for y in 0..4 {
                for x in 0..4 {
                    let (by, bx) = (y / 2 * 2, x / 2 * 2);
                    let mean = (orig.at(0, by, bx)
                        + orig.at(0, by, bx + 1)
                        + orig.at(0, by + 1, bx)
                        + orig.at(0, by + 1, bx + 1))
                        / 4.0;
                    assert!((got.at(0, y, x) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        assert!(Encoder::default().encode(&FrameSequence::default()).is_err());
    }

    #[test]
    fn odd_sizes_cannot_pool() {
        let f = Frame::filled(3, 4, 0.5).unwrap();
        let s = FrameSequence::new(vec![f]).unwrap();
        assert!(Encoder::new(EncoderMode::AvgPool2).encode(&s).is_err());
    }
}
