use super::{NnError, Tensor};

/// Probability clamp applied inside [`bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let data = match kind {
        Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
        Activation::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
    };
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Binary cross-entropy of a single probability against a 0/1 label.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn conv_dims(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize), NnError> {
    input.expect_rank(3, "conv2d input")?;
    kernels.expect_rank(4, "conv2d kernels")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let f = kernels.shape()[0];
    kernels.expect_shape(&[f, c, 3, 3], "conv2d kernels")?;
    bias.expect_shape(&[f], "conv2d bias")?;
    Ok((c, h, w, f))
}

/// 3×3 convolution, stride 1, zero padding 1.
///
/// `out[f,y,x] = bias[f] + Σ input[c,y+dy-1,x+dx-1]·kernels[f,c,dy,dx]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let (c, h, w, f) = conv_dims(input, kernels, bias)?;
    let inp = input.data();
    let ker = kernels.data();
    let mut out = vec![0.0; f * h * w];
    for (fi, plane) in out.chunks_exact_mut(h * w).enumerate() {
        plane.fill(bias.data()[fi]);
        for ci in 0..c {
            let src = &inp[ci * h * w..(ci + 1) * h * w];
            for dy in 0..3 {
                for dx in 0..3 {
                    let k = ker[((fi * c + ci) * 3 + dy) * 3 + dx];
                    if k == 0.0 {
                        continue;
                    }
                    // output column x reads source column x + dx - 1
                    let (x_lo, x_hi) = (usize::from(dx == 0), w - usize::from(dx == 2));
                    for y in 0..h {
                        let sy = y + dy;
                        if sy == 0 || sy > h {
                            continue;
                        }
                        let src_row = &src[(sy - 1) * w..sy * w];
                        let dst_row = &mut plane[y * w..(y + 1) * w];
                        for x in x_lo..x_hi {
                            dst_row[x] += k * src_row[x + dx - 1];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![f, h, w], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dGrads {
    pub kernels: Tensor,
    pub bias: Tensor,
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<Conv2dGrads, NnError> {
    let (c, h, w, f) = conv_dims(input, kernels, bias)?;
    grad_out.expect_shape(&[f, h, w], "conv2d output gradient")?;
    let inp = input.data();
    let ker = kernels.data();
    let go = grad_out.data();
    let mut d_ker = vec![0.0; ker.len()];
    let mut d_bias = vec![0.0; f];
    let mut d_in = if need_input_grad { vec![0.0; inp.len()] } else { Vec::new() };

    for fi in 0..f {
        let gplane = &go[fi * h * w..(fi + 1) * h * w];
        d_bias[fi] = gplane.iter().sum();
        for ci in 0..c {
            let src = &inp[ci * h * w..(ci + 1) * h * w];
            for dy in 0..3 {
                for dx in 0..3 {
                    let kidx = ((fi * c + ci) * 3 + dy) * 3 + dx;
                    let k = ker[kidx];
                    let (x_lo, x_hi) = (usize::from(dx == 0), w - usize::from(dx == 2));
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy == 0 || sy > h {
                            continue;
                        }
                        let grow = &gplane[y * w..(y + 1) * w];
                        let srow = &src[(sy - 1) * w..sy * w];
                        for x in x_lo..x_hi {
                            acc += grow[x] * srow[x + dx - 1];
                        }
                        if need_input_grad && k != 0.0 {
                            let drow = &mut d_in[ci * h * w + (sy - 1) * w..ci * h * w + sy * w];
                            for x in x_lo..x_hi {
                                drow[x + dx - 1] += k * grow[x];
                            }
                        }
                    }
                    d_ker[kidx] += acc;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        kernels: Tensor::new(kernels.shape().to_vec(), d_ker)?,
        bias: Tensor::new(vec![f], d_bias)?,
        input: if need_input_grad {
            Some(Tensor::new(input.shape().to_vec(), d_in)?)
        } else {
            None
        },
    })
}

/// 2×2 max pooling with stride 2.
///
/// Returns the pooled tensor and, per output element, the flat input index of
/// the winning element. Ties go to the first element in row-major order.
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
    input.expect_rank(3, "maxpool2 input")?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::ShapeMismatch(format!(
            "maxpool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let inp = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ci * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if inp[idx] > inp[best] {
                        best = idx;
                    }
                }
                out.push(inp[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor, NnError> {
    if argmax.len() != grad_out.len() {
        return Err(NnError::StaleCache(format!(
            "{} pooling indices for {} gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut d_in = Tensor::zeros(input_shape);
    let d = d_in.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        *d.get_mut(idx)
            .ok_or_else(|| NnError::StaleCache("pooling index out of range".into()))? += g;
    }
    Ok(d_in)
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize), NnError> {
    input.expect_rank(1, "dense input")?;
    weights.expect_rank(2, "dense weights")?;
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    input.expect_shape(&[n], "dense input")?;
    bias.expect_shape(&[m], "dense bias")?;
    Ok((m, n))
}

/// `W·x + b` for `W` of shape `[m, n]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor, NnError> {
    let (_, n) = dense_dims(input, weights, bias)?;
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    Ok(Tensor::from_vec(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weights: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

pub fn dense_backward(input: &Tensor, weights: &Tensor, bias: &Tensor, grad_out: &Tensor) -> Result<DenseGrads, NnError> {
    let (m, n) = dense_dims(input, weights, bias)?;
    grad_out.expect_shape(&[m], "dense output gradient")?;
    let x = input.data();
    let mut d_w = vec![0.0; m * n];
    let mut d_x = vec![0.0; n];
    for ((g, wrow), dwrow) in grad_out
        .data()
        .iter()
        .zip(weights.data().chunks_exact(n))
        .zip(d_w.chunks_exact_mut(n))
    {
        if *g == 0.0 {
            continue;
        }
        for j in 0..n {
            dwrow[j] = g * x[j];
            d_x[j] += g * wrow[j];
        }
    }
    Ok(DenseGrads {
        weights: Tensor::new(vec![m, n], d_w)?,
        bias: grad_out.clone(),
        input: Tensor::from_vec(d_x),
    })
}
