use ndarray::{Array2, ArrayView2, IxDyn};

use crate::autograd::{Array, Tensor};
use crate::error::{Error, Result};

fn lse(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

struct Lattice {
    ext: Vec<usize>,
    alpha: Array2<f64>,
    beta: Array2<f64>,
    log_p: f64,
}

fn lattice(lp: ArrayView2<f64>, target: &[usize], blank: usize) -> Lattice {
    let t_len = lp.nrows();
    let ext = extended(target, blank);
    let s_len = ext.len();
    let mut alpha = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    let mut beta = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = lp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = lp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut v = vec![alpha[[t - 1, s]]];
            if s >= 1 {
                v.push(alpha[[t - 1, s - 1]]);
            }
            if can_skip(&ext, s, blank) {
                v.push(alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = lse(&v) + lp[[t, ext[s]]];
        }
    }
    let last = t_len - 1;
    beta[[last, s_len - 1]] = lp[[last, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[last, s_len - 2]] = lp[[last, ext[s_len - 2]]];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut v = vec![beta[[t + 1, s]]];
            if s + 1 < s_len {
                v.push(beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && can_skip(&ext, s + 2, blank) {
                v.push(beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = lse(&v) + lp[[t, ext[s]]];
        }
    }
    let mut ends = vec![alpha[[last, s_len - 1]]];
    if s_len > 1 {
        ends.push(alpha[[last, s_len - 2]]);
    }
    Lattice {
        log_p: lse(&ends),
        ext,
        alpha,
        beta,
    }
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `[frames, classes]`, summed over all alignments.
pub fn ctc_nll(log_probs: ArrayView2<f64>, target: &[usize], blank: usize) -> Result<f64> {
    check(log_probs, target, blank)?;
    let lat = lattice(log_probs, target, blank);
    if !lat.log_p.is_finite() {
        return Err(Error::InvalidInput(format!(
            "target of length {} cannot be aligned to {} frames",
            target.len(),
            log_probs.nrows()
        )));
    }
    Ok(-lat.log_p)
}

fn check(lp: ArrayView2<f64>, target: &[usize], blank: usize) -> Result<()> {
    let classes = lp.ncols();
    if lp.nrows() == 0 {
        return Err(Error::InvalidInput("no frames".into()));
    }
    if blank >= classes || target.iter().any(|&l| l >= classes || l == blank) {
        return Err(Error::InvalidInput("target labels must be non-blank classes".into()));
    }
    Ok(())
}

/// Differentiable CTC negative log-likelihood. `log_probs: [frames, classes]`.
///
/// The gradient treats every entry as an independent log-probability.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<Tensor> {
    if log_probs.ndim() != 2 {
        return Err(Error::Shape(format!("expected [frames, classes], got {:?}", log_probs.shape())));
    }
    let lp = log_probs
        .value()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank checked");
    let nll = ctc_nll(lp, target, blank)?;
    let lat = lattice(lp, target, blank);
    let lp_owned = lp.to_owned();
    let shape = log_probs.shape().to_vec();
    Ok(Tensor::from_op(
        Array::from_elem(IxDyn(&[]), nll),
        vec![log_probs.clone()],
        move |g| {
            let go = g.iter().next().copied().unwrap_or(0.0);
            let mut grad = Array::zeros(IxDyn(&shape));
            for t in 0..shape[0] {
                for (s, &k) in lat.ext.iter().enumerate() {
                    let occ = lat.alpha[[t, s]] + lat.beta[[t, s]] - lp_owned[[t, k]] - lat.log_p;
                    if occ > f64::NEG_INFINITY {
                        grad[[t, k]] -= go * occ.exp();
                    }
                }
            }
            vec![Some(grad)]
        },
    ))
}

/// Removes repeats, then blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Best class per frame, collapsed.
pub fn greedy_decode(log_probs: ArrayView2<f64>, blank: usize) -> Vec<usize> {
    let path: Vec<usize> = log_probs
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect();
    collapse(&path, blank)
}
