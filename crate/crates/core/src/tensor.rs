//! Dense arrays for activations, weights, depth maps and label maps.
//!
//! Every array is stored channel-major, then row-major, with 0-based indices.
//! Reads outside the spatial extent of a [`FeatureMap`] return zero, which is
//! the padding rule the convolution layers rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `channels × height × width` block of activations (or their gradients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature map value {bad}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for r in 0..channels {
            for m in 0..height {
                for n in 0..width {
                    values.push(f(r, m, n));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            values,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn offset(&self, r: usize, m: usize, n: usize) -> usize {
        (r * self.height + m) * self.width + n
    }

    /// Reads `(r, m, n)` with zero padding: any out-of-bounds row or column
    /// yields exactly `0.0`. The channel must exist.
    pub fn index(&self, r: usize, m: isize, n: isize) -> Result<f64> {
        if r >= self.channels {
            return Err(Error::ChannelOutOfRange {
                channel: r,
                channels: self.channels,
            });
        }
        Ok(self.padded(r, m, n))
    }

    /// Zero-padded read without the channel check.
    #[inline]
    pub(crate) fn padded(&self, r: usize, m: isize, n: isize) -> f64 {
        if m < 0 || n < 0 || m as usize >= self.height || n as usize >= self.width {
            0.0
        } else {
            self.values[self.offset(r, m as usize, n as usize)]
        }
    }

    #[inline]
    pub fn get(&self, r: usize, m: usize, n: usize) -> f64 {
        self.values[self.offset(r, m, n)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, m: usize, n: usize, value: f64) {
        let i = self.offset(r, m, n);
        self.values[i] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff on mismatched maps");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Convolution weights, `out_channels × in_channels × kernel_h × kernel_w`.
/// Kernel extents are odd so the center tap exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    values: Vec<f64>,
}

impl WeightTensor {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    ) -> Result<Self> {
        Self::from_vec(
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
        )
    }

    pub fn from_vec(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "kernel {kernel_h}x{kernel_w} must have odd extents"
            )));
        }
        if values.len() != out_channels * in_channels * kernel_h * kernel_w {
            return Err(Error::Shape(format!(
                "{} values for a {out_channels}x{in_channels}x{kernel_h}x{kernel_w} weight tensor",
                values.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            values,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    /// Number of taps per output channel: `in_channels · kernel_h · kernel_w`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Weight at kernel offsets `(u, v)` measured from the center tap.
    pub fn at(&self, t: usize, r: usize, u: isize, v: isize) -> f64 {
        let i = u + (self.kernel_h / 2) as isize;
        let j = v + (self.kernel_w / 2) as isize;
        assert!(
            i >= 0 && j >= 0 && (i as usize) < self.kernel_h && (j as usize) < self.kernel_w,
            "kernel offset ({u}, {v}) outside {}x{} kernel",
            self.kernel_h,
            self.kernel_w
        );
        self.values
            [((t * self.in_channels + r) * self.kernel_h + i as usize) * self.kernel_w + j as usize]
    }

    pub fn set_at(&mut self, t: usize, r: usize, u: isize, v: isize, value: f64) {
        let i = (u + (self.kernel_h / 2) as isize) as usize;
        let j = (v + (self.kernel_w / 2) as isize) as usize;
        let idx = ((t * self.in_channels + r) * self.kernel_h + i) * self.kernel_w + j;
        self.values[idx] = value;
    }
}

/// How [`DepthMap::fill_holes`] repairs missing depth readings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoleFill {
    /// Copy the closest valid pixel (Euclidean distance on the pixel grid;
    /// ties go to the smaller row-major index).
    NearestValid,
    Constant(f64),
}

/// Per-pixel depth in millimeters. Pixels equal to `hole_value` are missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depths: Vec<f64>,
    hole_value: f64,
}

impl DepthMap {
    pub const DEFAULT_HOLE: f64 = 0.0;

    pub fn from_vec(height: usize, width: usize, depths: Vec<f64>) -> Result<Self> {
        Self::with_hole_value(height, width, depths, Self::DEFAULT_HOLE)
    }

    pub fn with_hole_value(
        height: usize,
        width: usize,
        depths: Vec<f64>,
        hole_value: f64,
    ) -> Result<Self> {
        if depths.len() != height * width {
            return Err(Error::Shape(format!(
                "{} depths for a {height}x{width} depth map",
                depths.len()
            )));
        }
        for (i, &d) in depths.iter().enumerate() {
            if d != hole_value && !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidDepth {
                    row: i / width,
                    col: i % width,
                    value: d,
                });
            }
        }
        Ok(Self {
            height,
            width,
            depths,
            hole_value,
        })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::from_vec(height, width, vec![depth; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn hole_value(&self) -> f64 {
        self.hole_value
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.depths[m * self.width + n]
    }

    pub fn is_hole(&self, m: usize, n: usize) -> bool {
        self.get(m, n) == self.hole_value
    }

    pub fn has_holes(&self) -> bool {
        self.depths.contains(&self.hole_value)
    }

    pub fn mean(&self) -> f64 {
        self.depths.iter().sum::<f64>() / self.depths.len() as f64
    }

    /// Returns a copy with every hole replaced. Valid pixels are untouched.
    pub fn fill_holes(&self, strategy: HoleFill) -> Result<DepthMap> {
        if !self.has_holes() {
            return Ok(self.clone());
        }
        let mut filled = self.depths.clone();
        match strategy {
            HoleFill::Constant(c) => {
                if !(c.is_finite() && c > 0.0) || c == self.hole_value {
                    return Err(Error::Config(format!(
                        "hole fill constant {c} is not a valid depth"
                    )));
                }
                for d in filled.iter_mut().filter(|d| **d == self.hole_value) {
                    *d = c;
                }
            }
            HoleFill::NearestValid => {
                let valid: Vec<usize> = (0..self.depths.len())
                    .filter(|&i| self.depths[i] != self.hole_value)
                    .collect();
                if valid.is_empty() {
                    return Err(Error::AllHoles);
                }
                for (i, out) in filled.iter_mut().enumerate() {
                    if self.depths[i] != self.hole_value {
                        continue;
                    }
                    let (m, n) = ((i / self.width) as i64, (i % self.width) as i64);
                    // `valid` is in ascending index order, so strict `<` keeps the smaller index on ties.
                    let mut best = valid[0];
                    let mut best_dist = i64::MAX;
                    for &j in &valid {
                        let dm = (j / self.width) as i64 - m;
                        let dn = (j % self.width) as i64 - n;
                        let dist = dm * dm + dn * dn;
                        if dist < best_dist {
                            best_dist = dist;
                            best = j;
                        }
                    }
                    *out = self.depths[best];
                }
            }
        }
        Ok(DepthMap {
            height: self.height,
            width: self.width,
            depths: filled,
            hole_value: self.hole_value,
        })
    }

    /// Window-mean pooling on the same grid as [`crate::layers::maxpool_forward`].
    ///
    /// Output extent per axis is `ceil((in - window) / stride) + 1`; windows
    /// hanging over the border average only their in-bounds pixels.
    pub fn pool(&self, window: usize, stride: usize) -> Result<DepthMap> {
        if window == 0 || stride == 0 {
            return Err(Error::Config(
                "pooling window and stride must be at least 1".into(),
            ));
        }
        if self.has_holes() {
            return Err(Error::Config(
                "pool_depth requires a hole-free depth map".into(),
            ));
        }
        let out_h = pooled_extent(self.height, window, stride)?;
        let out_w = pooled_extent(self.width, window, stride)?;
        let mut out = Vec::with_capacity(out_h * out_w);
        for om in 0..out_h {
            for on in 0..out_w {
                let (m0, n0) = (om * stride, on * stride);
                let (m1, n1) = (
                    (m0 + window).min(self.height),
                    (n0 + window).min(self.width),
                );
                let mut sum = 0.0;
                for m in m0..m1 {
                    for n in n0..n1 {
                        sum += self.get(m, n);
                    }
                }
                out.push(sum / ((m1 - m0) * (n1 - n0)) as f64);
            }
        }
        Ok(DepthMap {
            height: out_h,
            width: out_w,
            depths: out,
            hole_value: self.hole_value,
        })
    }
}

/// `ceil((extent - window) / stride) + 1`, minus one when the last window
/// would start outside the map; fails when no window fits.
pub fn pooled_extent(extent: usize, window: usize, stride: usize) -> Result<usize> {
    if extent == 0 {
        return Err(Error::WindowTooLarge { window, extent });
    }
    if extent >= window {
        let n = (extent - window).div_ceil(stride) + 1;
        // a last window starting past the final pixel would see nothing
        Ok(if (n - 1) * stride >= extent { n - 1 } else { n })
    } else if window - extent < stride {
        // ceil of a negative fraction greater than -1 is zero
        Ok(1)
    } else {
        Err(Error::WindowTooLarge { window, extent })
    }
}

/// Per-pixel class indices. Pixels equal to `ignore_label` carry no supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
    ignore_label: Option<usize>,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<usize>,
        ignore_label: Option<usize>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} label map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            ignore_label,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ignore_label(&self) -> Option<usize> {
        self.ignore_label
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> usize {
        self.labels[m * self.width + n]
    }

    pub fn is_ignored(&self, label: usize) -> bool {
        self.ignore_label == Some(label)
    }

    /// Checks every non-ignored label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| !self.is_ignored(l) && l >= classes)
        {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    /// Label at the top-left pixel of every pooling window, matching the
    /// output grid of a pooling stage with the given stride.
    pub fn subsample(&self, window: usize, stride: usize) -> Result<LabelMap> {
        let out_h = pooled_extent(self.height, window, stride)?;
        let out_w = pooled_extent(self.width, window, stride)?;
        let mut labels = Vec::with_capacity(out_h * out_w);
        for m in 0..out_h {
            for n in 0..out_w {
                labels.push(self.get(m * stride, n * stride));
            }
        }
        LabelMap::new(out_h, out_w, labels, self.ignore_label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_reads_in_bounds_values() {
        let map = FeatureMap::filled(1, 3, 3, 1.0);
        assert_eq!(map.index(0, 1, 1).unwrap(), 1.0);
    }

    #[test]
    fn index_pads_with_zero() {
        let map = FeatureMap::filled(1, 3, 3, 1.0);
        assert_eq!(map.index(0, -1, 0).unwrap(), 0.0);
        assert_eq!(map.index(0, 3, 3).unwrap(), 0.0);
        assert_eq!(map.index(0, 0, 3).unwrap(), 0.0);
    }

    #[test]
    fn index_rejects_missing_channel() {
        let map = FeatureMap::filled(1, 3, 3, 1.0);
        assert!(matches!(
            map.index(1, 0, 0),
            Err(Error::ChannelOutOfRange {
                channel: 1,
                channels: 1
            })
        ));
    }

    #[test]
    fn from_vec_rejects_wrong_length_and_nan() {
        assert!(FeatureMap::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(FeatureMap::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn weights_need_odd_kernels() {
        assert!(WeightTensor::zeros(1, 1, 2, 3).is_err());
        let w = WeightTensor::zeros(2, 3, 3, 5).unwrap();
        assert_eq!(w.fan_in(), 45);
    }

    #[test]
    fn weight_offsets_are_centered() {
        let mut w = WeightTensor::zeros(1, 1, 3, 3).unwrap();
        w.set_at(0, 0, -1, 1, 7.0);
        assert_eq!(w.values()[2], 7.0);
        assert_eq!(w.at(0, 0, -1, 1), 7.0);
    }

    #[test]
    fn fill_nearest_breaks_ties_toward_smaller_index() {
        let d = DepthMap::from_vec(1, 3, vec![1000.0, 0.0, 2000.0]).unwrap();
        let f = d.fill_holes(HoleFill::NearestValid).unwrap();
        assert_eq!(f.depths(), &[1000.0, 1000.0, 2000.0]);
    }

    #[test]
    fn fill_constant() {
        let d = DepthMap::from_vec(1, 1, vec![0.0]).unwrap();
        let f = d.fill_holes(HoleFill::Constant(500.0)).unwrap();
        assert_eq!(f.depths(), &[500.0]);
    }

    #[test]
    fn fill_leaves_hole_free_maps_alone() {
        let d = DepthMap::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(d.fill_holes(HoleFill::NearestValid).unwrap(), d);
    }

    #[test]
    fn fill_all_holes_is_an_error() {
        let d = DepthMap::from_vec(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            d.fill_holes(HoleFill::NearestValid),
            Err(Error::AllHoles)
        ));
    }

    #[test]
    fn fill_uses_2d_distance() {
        // hole at (1,1): (0,1) and (1,0) are at distance 1, (2,2) farther
        let d = DepthMap::from_vec(
            3,
            3,
            vec![0.0, 700.0, 0.0, 900.0, 0.0, 0.0, 0.0, 0.0, 300.0],
        )
        .unwrap();
        let f = d.fill_holes(HoleFill::NearestValid).unwrap();
        assert_eq!(f.get(1, 1), 700.0);
        assert_eq!(f.get(2, 1), 300.0);
        assert_eq!(f.get(2, 0), 900.0);
    }

    #[test]
    fn negative_depths_rejected() {
        assert!(matches!(
            DepthMap::from_vec(1, 2, vec![1.0, -3.0]),
            Err(Error::InvalidDepth { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn pool_mean_of_two() {
        let d = DepthMap::from_vec(1, 2, vec![1000.0, 2000.0]).unwrap();
        assert_eq!(d.pool(2, 2).unwrap().depths(), &[1500.0]);
    }

    #[test]
    fn pool_constant_map() {
        let d = DepthMap::constant(2, 2, 800.0).unwrap();
        assert_eq!(d.pool(2, 2).unwrap().depths(), &[800.0]);
    }

    #[test]
    fn pool_row_of_four() {
        let d = DepthMap::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = d.pool(2, 2).unwrap();
        assert_eq!((p.height(), p.width()), (1, 2));
        assert_eq!(p.depths(), &[1.5, 3.5]);
    }

    #[test]
    fn pool_partial_windows_average_in_bounds_pixels() {
        let d = DepthMap::from_vec(1, 5, vec![1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        let p = d.pool(2, 2).unwrap();
        assert_eq!(p.depths(), &[1.5, 3.5, 10.0]);
    }

    #[test]
    fn pool_window_too_large() {
        let d = DepthMap::constant(2, 2, 800.0).unwrap();
        assert!(matches!(d.pool(4, 2), Err(Error::WindowTooLarge { .. })));
        assert!(matches!(d.pool(4, 1), Err(Error::WindowTooLarge { .. })));
        // a window overhanging by less than one stride still yields one output
        assert_eq!(d.pool(3, 2).unwrap().depths(), &[800.0]);
        assert!(d.pool(0, 1).is_err());
    }

    #[test]
    fn pool_rejects_holes() {
        let d = DepthMap::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(d.pool(1, 1).is_err());
    }

    #[test]
    fn labels_validate_against_class_count() {
        let l = LabelMap::new(1, 3, vec![0, 2, 255], Some(255)).unwrap();
        assert!(l.validate(3).is_ok());
        assert!(matches!(
            l.validate(2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn label_subsample_takes_window_origin() {
        let l = LabelMap::new(2, 4, vec![1, 0, 2, 0, 0, 0, 0, 0], None).unwrap();
        let s = l.subsample(2, 2).unwrap();
        assert_eq!(s.labels(), &[1, 2]);
    }
}
