use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Shape4;

/// Shape parameters of one convolution layer.
///
/// Output sizes must divide exactly:
/// `out_h = (in_h + 2*pad_h - filter_h) / stride_h + 1`, same for width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    /// Builds and validates a geometry.
    ///
    /// `filter`, `input`, `stride` and `padding` are (height, width) pairs.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        filter: (usize, usize),
        input: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let g = ConvGeometry {
            in_channels,
            out_channels,
            filter_h: filter.0,
            filter_w: filter.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: padding.0,
            pad_w: padding.1,
            in_h: input.0,
            in_w: input.1,
        };
        g.validate()?;
        Ok(g)
    }

    /// Unit stride, no padding.
    pub fn simple(
        in_channels: usize,
        out_channels: usize,
        filter: (usize, usize),
        input: (usize, usize),
    ) -> Result<Self> {
        Self::new(in_channels, out_channels, filter, input, (1, 1), (0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("filter_h", self.filter_h),
            ("filter_w", self.filter_w),
            ("stride_h", self.stride_h),
            ("stride_w", self.stride_w),
            ("in_h", self.in_h),
            ("in_w", self.in_w),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Geometry(format!("{name} must be positive")));
        }
        for (axis, span, filter, stride) in [
            ("height", self.padded_h(), self.filter_h, self.stride_h),
            ("width", self.padded_w(), self.filter_w, self.stride_w),
        ] {
            if filter > span {
                return Err(Error::Geometry(format!(
                    "filter {axis} {filter} exceeds padded input {axis} {span}"
                )));
            }
            if (span - filter) % stride != 0 {
                return Err(Error::Geometry(format!(
                    "padded {axis} {span} minus filter {filter} is not a multiple of stride {stride}"
                )));
            }
        }
        if self.padded_sample_size() > u32::MAX as usize {
            return Err(Error::Geometry("padded sample exceeds u32 offsets".into()));
        }
        Ok(())
    }

    pub fn padded_h(&self) -> usize {
        self.in_h + 2 * self.pad_h
    }

    pub fn padded_w(&self) -> usize {
        self.in_w + 2 * self.pad_w
    }

    pub fn out_h(&self) -> usize {
        (self.padded_h() - self.filter_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.padded_w() - self.filter_w) / self.stride_w + 1
    }

    /// Values per padded input sample: C·(X_h+2·pad_h)·(X_w+2·pad_w).
    pub fn padded_sample_size(&self) -> usize {
        self.in_channels * self.padded_h() * self.padded_w()
    }

    /// Taps per output channel, C·H_f·W_f.
    pub fn taps(&self) -> usize {
        self.in_channels * self.filter_h * self.filter_w
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(self.out_channels, self.in_channels, self.filter_h, self.filter_w)
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.in_channels, self.in_h, self.in_w)
    }

    pub fn padded_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.in_channels, self.padded_h(), self.padded_w())
    }

    pub fn output_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.out_channels, self.out_h(), self.out_w())
    }

    /// Flattened offset of filter tap (c, kh, kw) inside a padded sample.
    #[inline]
    pub fn tap_offset(&self, c: usize, kh: usize, kw: usize) -> usize {
        (c * self.padded_h() + kh) * self.padded_w() + kw
    }

    /// Inverse of [`tap_offset`](Self::tap_offset); `None` when the offset
    /// does not name a tap of this filter.
    pub fn decode_offset(&self, offset: usize) -> Option<(usize, usize, usize)> {
        let plane = self.padded_h() * self.padded_w();
        let c = offset / plane;
        let rem = offset % plane;
        let (kh, kw) = (rem / self.padded_w(), rem % self.padded_w());
        (c < self.in_channels && kh < self.filter_h && kw < self.filter_w).then_some((c, kh, kw))
    }

    /// True when one spatial axis is degenerate (1-D convolution).
    pub fn is_one_dimensional(&self) -> bool {
        (self.in_w == 1 && self.filter_w == 1 && self.pad_w == 0)
            || (self.in_h == 1 && self.filter_h == 1 && self.pad_h == 0)
    }

    /// Compact label, e.g. `64x300x1-k2x1-s1x1-p0x0-64`.
    pub fn label(&self) -> String {
        format!(
            "{}x{}x{}-k{}x{}-s{}x{}-p{}x{}-{}",
            self.in_channels,
            self.in_h,
            self.in_w,
            self.filter_h,
            self.filter_w,
            self.stride_h,
            self.stride_w,
            self.pad_h,
            self.pad_w,
            self.out_channels
        )
    }
}
