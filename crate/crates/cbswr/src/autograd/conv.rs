//! Plain nested-loop convolution kernels. Desk-scale images are tiny, so
//! clarity wins over im2col tricks; correctness is pinned by the finite
//! difference tests in the parent module.

use ndarray::{Array1, Array4, ArrayView1, ArrayView4};

pub fn conv2d_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose2d_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// out[n, co, i, j] = b[co] + sum_{ci,u,v} x[n, ci, i*s+u-p, j*s+v-p] * w[co, ci, u, v]
pub fn conv2d_forward(
    x: ArrayView4<f64>,
    w: ArrayView4<f64>,
    b: ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert_eq!(b.len(), cout, "conv2d bias mismatch");
    let ho = conv2d_out_size(h, kh, stride, pad);
    let wo = conv2d_out_size(wd, kw, stride, pad);
    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    for ni in 0..n {
        for co in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for u in 0..kh {
                            let p = i * stride + u;
                            if p < pad || p - pad >= h {
                                continue;
                            }
                            for v in 0..kw {
                                let q = j * stride + v;
                                if q < pad || q - pad >= wd {
                                    continue;
                                }
                                acc += x[[ni, ci, p - pad, q - pad]] * w[[co, ci, u, v]];
                            }
                        }
                    }
                    out[[ni, co, i, j]] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d_forward` w.r.t. input, weights and bias.
pub fn conv2d_backward(
    x: ArrayView4<f64>,
    w: ArrayView4<f64>,
    grad_out: ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let mut dx = Array4::<f64>::zeros((n, cin, h, wd));
    let mut dw = Array4::<f64>::zeros(w.dim());
    let mut db = Array1::<f64>::zeros(cout);
    for ni in 0..n {
        for co in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let g = grad_out[[ni, co, i, j]];
                    if g == 0.0 {
                        continue;
                    }
                    db[co] += g;
                    for ci in 0..cin {
                        for u in 0..kh {
                            let p = i * stride + u;
                            if p < pad || p - pad >= h {
                                continue;
                            }
                            for v in 0..kw {
                                let q = j * stride + v;
                                if q < pad || q - pad >= wd {
                                    continue;
                                }
                                dx[[ni, ci, p - pad, q - pad]] += g * w[[co, ci, u, v]];
                                dw[[co, ci, u, v]] += g * x[[ni, ci, p - pad, q - pad]];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution; weights are laid out [cin, cout, kh, kw].
/// out[n, co, i*s+u-p, j*s+v-p] += x[n, ci, i, j] * w[ci, co, u, v]
pub fn conv_transpose2d_forward(
    x: ArrayView4<f64>,
    w: ArrayView4<f64>,
    b: ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, wd) = x.dim();
    let (cin_w, cout, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv_transpose2d channel mismatch");
    assert_eq!(b.len(), cout, "conv_transpose2d bias mismatch");
    let ho = conv_transpose2d_out_size(h, kh, stride, pad);
    let wo = conv_transpose2d_out_size(wd, kw, stride, pad);
    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    for ni in 0..n {
        for co in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    out[[ni, co, i, j]] = b[co];
                }
            }
        }
    }
    for ni in 0..n {
        for ci in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x[[ni, ci, i, j]];
                    for co in 0..cout {
                        for u in 0..kh {
                            let p = i * stride + u;
                            if p < pad || p - pad >= ho {
                                continue;
                            }
                            for v in 0..kw {
                                let q = j * stride + v;
                                if q < pad || q - pad >= wo {
                                    continue;
                                }
                                out[[ni, co, p - pad, q - pad]] += xv * w[[ci, co, u, v]];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    x: ArrayView4<f64>,
    w: ArrayView4<f64>,
    grad_out: ArrayView4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, cin, h, wd) = x.dim();
    let (_, cout, kh, kw) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let mut dx = Array4::<f64>::zeros((n, cin, h, wd));
    let mut dw = Array4::<f64>::zeros(w.dim());
    let mut db = Array1::<f64>::zeros(cout);
    for ni in 0..n {
        for co in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    db[co] += grad_out[[ni, co, i, j]];
                }
            }
        }
    }
    for ni in 0..n {
        for ci in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x[[ni, ci, i, j]];
                    let mut acc = 0.0;
                    for co in 0..cout {
                        for u in 0..kh {
                            let p = i * stride + u;
                            if p < pad || p - pad >= ho {
                                continue;
                            }
                            for v in 0..kw {
                                let q = j * stride + v;
                                if q < pad || q - pad >= wo {
                                    continue;
                                }
                                let g = grad_out[[ni, co, p - pad, q - pad]];
                                acc += g * w[[ci, co, u, v]];
                                dw[[ci, co, u, v]] += g * xv;
                            }
                        }
                    }
                    dx[[ni, ci, i, j]] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}
