//! Differentiable signal-processing operators: polyphase FIR rate changes and
//! short-time Fourier magnitudes.

use ndarray::IxDyn;
use rustfft::num_complex::Complex64;

use super::tensor::{Array, Tensor};
use crate::fftcache;

fn rows_and_len(shape: &[usize]) -> (usize, usize) {
    let len = *shape.last().expect("signal op on a 0-d tensor");
    (shape.iter().rev().skip(1).product(), len)
}

fn data(a: &Array) -> Vec<f64> {
    a.iter().copied().collect()
}

fn decimate_rows(x: &[f64], rows: usize, len: usize, taps: &[f64], factor: usize) -> Vec<f64> {
    let out_len = len.div_ceil(factor);
    let c = (taps.len() - 1) / 2;
    let mut y = vec![0.0; rows * out_len];
    for r in 0..rows {
        let xr = &x[r * len..(r + 1) * len];
        let yr = &mut y[r * out_len..(r + 1) * out_len];
        for (n, out) in yr.iter_mut().enumerate() {
            let base = (n * factor) as isize - c as isize;
            let k0 = (-base).max(0) as usize;
            let k1 = ((len as isize - base).min(taps.len() as isize)).max(0) as usize;
            let mut acc = 0.0;
            for k in k0..k1 {
                acc += taps[k] * xr[(base + k as isize) as usize];
            }
            *out = acc;
        }
    }
    y
}

fn decimate_rows_adjoint(g: &[f64], rows: usize, len: usize, taps: &[f64], factor: usize) -> Vec<f64> {
    let out_len = len.div_ceil(factor);
    let c = (taps.len() - 1) / 2;
    let mut gx = vec![0.0; rows * len];
    for r in 0..rows {
        let gr = &g[r * out_len..(r + 1) * out_len];
        let gxr = &mut gx[r * len..(r + 1) * len];
        for (n, &gv) in gr.iter().enumerate() {
            let base = (n * factor) as isize - c as isize;
            let k0 = (-base).max(0) as usize;
            let k1 = ((len as isize - base).min(taps.len() as isize)).max(0) as usize;
            for k in k0..k1 {
                gxr[(base + k as isize) as usize] += taps[k] * gv;
            }
        }
    }
    gx
}

impl Tensor {
    /// Low-pass filters the last axis with symmetric `taps` and keeps every
    /// `factor`-th sample. Output length is `ceil(len / factor)`.
    pub fn fir_decimate(&self, taps: &[f64], factor: usize) -> Tensor {
        assert!(factor >= 1 && taps.len() % 2 == 1, "odd tap count and factor >= 1 required");
        let (rows, len) = rows_and_len(self.shape());
        let out_len = len.div_ceil(factor);
        let y = decimate_rows(&data(self.value()), rows, len, taps, factor);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let value = Array::from_shape_vec(IxDyn(&shape), y).unwrap();
        let taps = taps.to_vec();
        let in_shape = self.shape().to_vec();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let gx = decimate_rows_adjoint(&data(g), rows, len, &taps, factor);
            vec![Some(Array::from_shape_vec(IxDyn(&in_shape), gx).unwrap())]
        })
    }

    /// Inserts `factor - 1` zeros between samples of the last axis and low-pass
    /// filters with `factor * taps`. Output length is `len * factor`.
    pub fn fir_interpolate(&self, taps: &[f64], factor: usize) -> Tensor {
        assert!(factor >= 1 && taps.len() % 2 == 1, "odd tap count and factor >= 1 required");
        let (rows, len) = rows_and_len(self.shape());
        let out_len = len * factor;
        let scaled: Vec<f64> = taps.iter().map(|t| t * factor as f64).collect();
        // interpolation is the adjoint of decimation with the same geometry
        let y = decimate_rows_adjoint(&data(self.value()), rows, out_len, &scaled, factor);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out_len;
        let value = Array::from_shape_vec(IxDyn(&shape), y).unwrap();
        let in_shape = self.shape().to_vec();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let gx = decimate_rows(&data(g), rows, out_len, &scaled, factor);
            vec![Some(Array::from_shape_vec(IxDyn(&in_shape), gx).unwrap())]
        })
    }

    /// Short-time Fourier magnitude of `[batch, len]` signals.
    ///
    /// Frames are centred (`n_fft / 2` zeros on both sides), giving
    /// `len / hop + 1` frames. `window` has length `n_fft`. The result has shape
    /// `[batch, frames, n_fft / 2 + 1]`; a floor of `1e-10` inside the square
    /// root keeps the gradient finite at silent bins.
    pub fn stft_magnitude(&self, n_fft: usize, hop: usize, window: &[f64]) -> Tensor {
        assert_eq!(self.ndim(), 2, "stft_magnitude expects [batch, len]");
        assert_eq!(window.len(), n_fft, "window length must equal n_fft");
        let (batch, len) = (self.shape()[0], self.shape()[1]);
        let frames = len / hop + 1;
        let bins = n_fft / 2 + 1;
        let pad = n_fft / 2;
        let x = data(self.value());
        let fft = fftcache::plan(n_fft, false);
        let mut spec = vec![Complex64::new(0.0, 0.0); batch * frames * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        for b in 0..batch {
            let xb = &x[b * len..(b + 1) * len];
            for f in 0..frames {
                for (n, v) in buf.iter_mut().enumerate() {
                    let i = (f * hop + n) as isize - pad as isize;
                    let s = if i >= 0 && (i as usize) < len { xb[i as usize] } else { 0.0 };
                    *v = Complex64::new(s * window[n], 0.0);
                }
                fft.process(&mut buf);
                spec[(b * frames + f) * bins..(b * frames + f + 1) * bins].copy_from_slice(&buf[..bins]);
            }
        }
        let mag: Vec<f64> = spec.iter().map(|c| (c.norm_sqr() + 1e-10).sqrt()).collect();
        let value = Array::from_shape_vec(IxDyn(&[batch, frames, bins]), mag.clone()).unwrap();
        let window = window.to_vec();
        Tensor::from_op(value, vec![self.clone()], move |g| {
            let gd = data(g);
            let ifft = fftcache::plan(n_fft, true);
            let mut gx = vec![0.0; batch * len];
            let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
            for b in 0..batch {
                for f in 0..frames {
                    let off = (b * frames + f) * bins;
                    buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                    for k in 0..bins {
                        let s = spec[off + k] / mag[off + k];
                        buf[k] = s * gd[off + k];
                    }
                    ifft.process(&mut buf);
                    let gxb = &mut gx[b * len..(b + 1) * len];
                    for n in 0..n_fft {
                        let i = (f * hop + n) as isize - pad as isize;
                        if i >= 0 && (i as usize) < len {
                            gxb[i as usize] += buf[n].re * window[n];
                        }
                    }
                }
            }
            vec![Some(Array::from_shape_vec(IxDyn(&[batch, len]), gx).unwrap())]
        })
    }
}
