//! Integer feature maps in height-width-channel order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<i32>,
}

impl Tensor {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Tensor { width, height, channels, data: vec![0; width * height * channels] }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> i32) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Tensor { width, height, channels, data }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> i32 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: i32) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[i32] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    /// Copies the `w x h` window at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Tensor {
        Tensor::from_fn(w, h, self.channels, |x, y, c| self.get(x0 + x, y0 + y, c))
    }

    /// Keeps the first `channels` channels, or zero-pads up to `channels`.
    pub fn with_channels(&self, channels: usize) -> Tensor {
        Tensor::from_fn(self.width, self.height, channels, |x, y, c| {
            if c < self.channels {
                self.get(x, y, c)
            } else {
                0
            }
        })
    }

    /// Packs 2x2 pixel groups into channels: output channel `g * C + c`
    /// holds input pixel `(2x + g % 2, 2y + g / 2)`, channel `c`.
    pub fn pixel_unshuffle(&self) -> Tensor {
        assert!(self.width.is_multiple_of(2) && self.height.is_multiple_of(2), "pixel unshuffle needs even dimensions");
        let ch = self.channels;
        Tensor::from_fn(self.width / 2, self.height / 2, 4 * ch, |x, y, k| {
            let (g, c) = (k / ch, k % ch);
            self.get(2 * x + g % 2, 2 * y + g / 2, c)
        })
    }

    /// Inverse of [`Tensor::pixel_unshuffle`].
    pub fn pixel_shuffle(&self) -> Tensor {
        assert!(self.channels.is_multiple_of(4), "pixel shuffle needs a multiple of four channels");
        let ch = self.channels / 4;
        Tensor::from_fn(self.width * 2, self.height * 2, ch, |x, y, c| {
            let g = (x % 2) + 2 * (y % 2);
            self.get(x / 2, y / 2, g * ch + c)
        })
    }

    /// Number of positions where the two tensors differ.
    pub fn count_differences(&self, other: &Tensor) -> usize {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return usize::MAX;
        }
        self.data.iter().zip(&other.data).filter(|(a, b)| a != b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_inverts_unshuffle() {
        let t = Tensor::from_fn(6, 4, 3, |x, y, c| (x * 100 + y * 10 + c) as i32);
        let u = t.pixel_unshuffle();
        assert_eq!((u.width, u.height, u.channels), (3, 2, 12));
        assert_eq!(u.get(1, 1, 3 + 2), t.get(3, 2, 2));
        assert_eq!(u.pixel_shuffle(), t);
    }
}
