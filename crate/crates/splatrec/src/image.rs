//! Dense row-major pixel buffers used by the renderer, losses and metrics.

use crate::real::Real;

/// H×W image with `C` channels, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T, const C: usize> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type Image1<T> = Image<T, 1>;
pub type Image3<T> = Image<T, 3>;

impl<T: Real, const C: usize> Image<T, C> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::zero(); width * height * C],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [T; C]) -> Self {
        let mut data = Vec::with_capacity(width * height * C);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * C
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [T; C] {
        let i = self.idx(x, y);
        std::array::from_fn(|k| self.data[i + k])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [T; C]) {
        let i = self.idx(x, y);
        self.data[i..i + C].copy_from_slice(&v);
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, v: [T; C]) {
        let i = self.idx(x, y);
        for k in 0..C {
            self.data[i + k] += v[k];
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_size<const D: usize>(&self, other: &Image<T, D>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Image<U, C> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear sample at normalized coordinates (u, v) ∈ [0,1]².
    /// Pixel centers sit at ((x+0.5)/W, (y+0.5)/H); samples clamp to the border.
    pub fn sample_bilinear(&self, u: T, v: T) -> [T; C] {
        let (w, h) = (self.width, self.height);
        let fx = u * T::from_usize(w).unwrap() - crate::real::c::<T>(0.5);
        let fy = v * T::from_usize(h).unwrap() - crate::real::c::<T>(0.5);
        let x0f = fx.floor();
        let y0f = fy.floor();
        let tx = fx - x0f;
        let ty = fy - y0f;
        let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
        let x0 = clamp(x0f.to_f64c() as i64, w);
        let x1 = clamp(x0f.to_f64c() as i64 + 1, w);
        let y0 = clamp(y0f.to_f64c() as i64, h);
        let y1 = clamp(y0f.to_f64c() as i64 + 1, h);
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        std::array::from_fn(|k| {
            let a = p00[k] * (T::one() - tx) + p10[k] * tx;
            let b = p01[k] * (T::one() - tx) + p11[k] * tx;
            a * (T::one() - ty) + b * ty
        })
    }

    /// Taps and weights used by `sample_bilinear`, for adjoint scattering.
    pub fn bilinear_taps(&self, u: T, v: T) -> [(usize, usize, T); 4] {
        let (w, h) = (self.width, self.height);
        let fx = u * T::from_usize(w).unwrap() - crate::real::c::<T>(0.5);
        let fy = v * T::from_usize(h).unwrap() - crate::real::c::<T>(0.5);
        let x0f = fx.floor();
        let y0f = fy.floor();
        let tx = fx - x0f;
        let ty = fy - y0f;
        let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
        let x0 = clamp(x0f.to_f64c() as i64, w);
        let x1 = clamp(x0f.to_f64c() as i64 + 1, w);
        let y0 = clamp(y0f.to_f64c() as i64, h);
        let y1 = clamp(y0f.to_f64c() as i64 + 1, h);
        [
            (x0, y0, (T::one() - tx) * (T::one() - ty)),
            (x1, y0, tx * (T::one() - ty)),
            (x0, y1, (T::one() - tx) * ty),
            (x1, y1, tx * ty),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_center_recovers_pixel() {
        let img = Image::<f64, 1>::from_fn(4, 3, |x, y| [(x + 10 * y) as f64]);
        let v = img.sample_bilinear((1.0 + 0.5) / 4.0, (2.0 + 0.5) / 3.0);
        assert_eq!(v[0], 21.0);
    }

    #[test]
    fn bilinear_midpoint_averages() {
        let img = Image::<f64, 1>::from_fn(2, 1, |x, _| [x as f64]);
        let v = img.sample_bilinear(0.5, 0.5);
        assert!((v[0] - 0.5).abs() < 1e-12);
    }
}
