use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batched activation stored channel-major: `[C][B][H][W]`.
///
/// Keeping the channel outermost lets a convolution write its GEMM output
/// straight into place and gives batch normalization one contiguous run per
/// channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        batch: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != channels * batch * height * width {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot hold {channels}x{batch}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { channels, batch, height, width, data })
    }

    /// Builds a map from per-sample `[C][H][W]` planes (the usual NCHW order).
    pub fn from_nchw(batch: usize, channels: usize, height: usize, width: usize, nchw: &[T]) -> Self {
        assert_eq!(nchw.len(), batch * channels * height * width);
        let plane = height * width;
        let mut data = vec![T::zero(); nchw.len()];
        for b in 0..batch {
            for c in 0..channels {
                let src = (b * channels + c) * plane;
                let dst = (c * batch + b) * plane;
                data[dst..dst + plane].copy_from_slice(&nchw[src..src + plane]);
            }
        }
        Self { channels, batch, height, width, data }
    }

    pub fn to_nchw(&self) -> Vec<T> {
        let plane = self.plane();
        let mut out = vec![T::zero(); self.data.len()];
        for c in 0..self.channels {
            for b in 0..self.batch {
                let src = (c * self.batch + b) * plane;
                let dst = (b * self.channels + c) * plane;
                out[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        out
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements per channel across the whole batch.
    #[inline]
    pub fn per_channel(&self) -> usize {
        self.batch * self.plane()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.batch, self.height, self.width]
    }

    pub fn sample_plane(&self, channel: usize, sample: usize) -> &[T] {
        let p = self.plane();
        let off = (channel * self.batch + sample) * p;
        &self.data[off..off + p]
    }

    pub fn sample_plane_mut(&mut self, channel: usize, sample: usize) -> &mut [T] {
        let p = self.plane();
        let off = (channel * self.batch + sample) * p;
        &mut self.data[off..off + p]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Stacks maps with equal batch and spatial dims along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Self {
        let first = parts[0];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut channels = 0;
        for p in parts {
            assert_eq!(
                (p.batch, p.height, p.width),
                (first.batch, first.height, first.width),
                "concat needs matching batch and spatial dims"
            );
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Self { channels, batch: first.batch, height: first.height, width: first.width, data }
    }

    /// Inverse of [`FeatureMap::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Self> {
        assert_eq!(sizes.iter().sum::<usize>(), self.channels);
        let per = self.per_channel();
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &c in sizes {
            out.push(Self {
                channels: c,
                batch: self.batch,
                height: self.height,
                width: self.width,
                data: self.data[start * per..(start + c) * per].to_vec(),
            });
            start += c;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major `[rows][cols]` matrix, used for flat per-sample vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn concat_cols(parts: &[&Self]) -> Self {
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                assert_eq!(p.rows, rows);
                out.data[r * cols + off..r * cols + off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        out
    }

    pub fn split_cols(&self, sizes: &[usize]) -> Vec<Self> {
        assert_eq!(sizes.iter().sum::<usize>(), self.cols);
        let mut out: Vec<Self> = sizes.iter().map(|&c| Self::zeros(self.rows, c)).collect();
        for r in 0..self.rows {
            let mut off = 0;
            for (part, &c) in out.iter_mut().zip(sizes) {
                part.row_mut(r).copy_from_slice(&self.row(r)[off..off + c]);
                off += c;
            }
        }
        out
    }
}
