use crate::error::{Error, Result};
use crate::io::Image;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Converts an 8-bit raster to a (1, c, h, w) tensor scaled to [−1, 1].
pub fn image_to_tensor<T: Scalar>(img: &Image) -> Tensor<T> {
    let s = Shape::new(1, img.channels, img.height, img.width);
    Tensor::from_fn(s, |[_, c, y, x]| T::lit(img.at(y, x, c) as f64 / 127.5 - 1.0))
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let plane = s.plane();
    let x = logits.data();
    let mut out = Tensor::zeros(s);
    let o = out.data_mut();
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let m = (0..s.c).map(|c| x[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (x[idx(c)] - m).exp();
                o[idx(c)] = e;
                z += e;
            }
            for c in 0..s.c {
                o[idx(c)] /= z;
            }
        }
    }
    out
}

/// Per-pixel argmax over channels, lowest class on ties; layout (n, h, w).
pub fn argmax_labels<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.c > 256 {
        return Err(Error::invalid(
            "argmax_labels",
            format!("{} classes exceed u8 labels", s.c),
        ));
    }
    let plane = s.plane();
    let x = t.data();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if x[(n * s.c + c) * plane + p] > x[(n * s.c + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_and_softmax() {
        let t = Tensor::new(Shape::new(1, 3, 1, 2), vec![0.0, 5.0, 2.0, 5.0, 2.0, -1.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![1, 0]);
        let p = softmax_channels(&t);
        for px in 0..2 {
            let sum: f64 = (0..3).map(|c| p.data()[c * 2 + px]).sum();
            assert!((sum - 1.0).abs() < 1e-15);
        }
        let img = Image::new(1, 1, 3, vec![0, 255, 127]).unwrap();
        let x = image_to_tensor::<f64>(&img);
        assert_eq!(x.data()[..2], [-1.0, 1.0]);
    }
}
