use super::graph::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

impl<'g> Var<'g> {
    /// Per-channel 3x3 convolution (cross-correlation) of a `[H, W, C]` grid
    /// with zero padding. `kernel` is `[3, 3, C]`, `bias` is `[C]`.
    pub fn depthwise_conv3x3(&self, kernel: &Var<'g>, bias: &Var<'g>) -> Result<Var<'g>> {
        let s = self.shape().to_vec();
        if s.len() != 3 {
            return dim_err(format!("depthwise conv expects [H, W, C], got {s:?}"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if kernel.shape() != [3, 3, c] || bias.shape() != [c] {
            return dim_err(format!("depthwise conv: kernel {:?}, bias {:?} for {c} channels", kernel.shape(), bias.shape()));
        }
        let out = conv_forward(self.value(), kernel.value(), bias.value());
        Ok(self.graph().op(out, &[self, kernel, bias], move |p, _, gy| {
            let (x, k, gy) = (p[0].data(), p[1].data(), gy.data());
            let mut gx = vec![0.0; h * w * c];
            let mut gk = vec![0.0; 9 * c];
            let mut gb = vec![0.0; c];
            for i in 0..h {
                for j in 0..w {
                    let o = (i * w + j) * c;
                    for ch in 0..c {
                        gb[ch] += gy[o + ch];
                    }
                    for di in 0..3 {
                        let ii = i as isize + di as isize - 1;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j as isize + dj as isize - 1;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let src = (ii as usize * w + jj as usize) * c;
                            let kb = (di * 3 + dj) * c;
                            for ch in 0..c {
                                gx[src + ch] += gy[o + ch] * k[kb + ch];
                                gk[kb + ch] += gy[o + ch] * x[src + ch];
                            }
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new([h, w, c], gx).unwrap()),
                Some(Tensor::new([3, 3, c], gk).unwrap()),
                Some(Tensor::new([c], gb).unwrap()),
            ]
        }))
    }
}

fn conv_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (x, k, b) = (x.data(), kernel.data(), bias.data());
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let o = (i * w + j) * c;
            out[o..o + c].copy_from_slice(b);
            for di in 0..3 {
                let ii = i as isize + di as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..3 {
                    let jj = j as isize + dj as isize - 1;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let src = (ii as usize * w + jj as usize) * c;
                    let kb = (di * 3 + dj) * c;
                    for ch in 0..c {
                        out[o + ch] += x[src + ch] * k[kb + ch];
                    }
                }
            }
        }
    }
    Tensor::new([h, w, c], out).unwrap()
}
