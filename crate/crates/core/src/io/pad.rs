use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Zero-pads the bottom and right edges so height and width become multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let s = x.shape();
    let m = m.max(1);
    let (h, w) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
    if (h, w) == (s.h, s.w) {
        return x.clone();
    }
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |[n, c, y, xx]| {
        if y < s.h && xx < s.w {
            x.at([n, c, y, xx])
        } else {
            T::zero()
        }
    })
}

/// Top-left `h`×`w` window of every plane.
pub fn crop_top_left<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    if (h, w) == (s.h, s.w) {
        return x.clone();
    }
    Tensor::from_fn(Shape::new(s.n, s.c, h.min(s.h), w.min(s.w)), |[n, c, y, xx]| {
        x.at([n, c, y, xx])
    })
}
