use super::Tensor;

/// Central-difference check of an analytic gradient.
///
/// `f` evaluates the scalar objective at a flat parameter vector; `analytic`
/// is the gradient under test, in the same flat layout. Returns the maximum
/// relative error `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    at: &[f64],
    analytic: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(at.len(), analytic.len(), "gradient length mismatch");
    let mut x = at.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Flattens a parameter list into one vector (layout used by
/// [`finite_diff_check`] callers).
pub fn flatten(params: &[Tensor]) -> Vec<f64> {
    params.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Writes a flat vector back into tensors with the given shapes.
pub fn unflatten(flat: &[f64], like: &[Tensor]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(like.len());
    let mut off = 0;
    for t in like {
        let n = t.len();
        out.push(Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec()).unwrap());
        off += n;
    }
    assert_eq!(off, flat.len(), "flat vector length mismatch");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = sum(x^2), grad = 2x.
        let at = vec![0.3, -1.7, 2.5];
        let analytic: Vec<f64> = at.iter().map(|v| 2.0 * v).collect();
        let mut f = |x: &[f64]| x.iter().map(|v| v * v).sum();
        let rel = finite_diff_check(&mut f, &at, &analytic, 1e-6);
        assert!(rel < 1e-8, "rel {rel}");
    }

    #[test]
    fn tape_mlp_gradient_matches_finite_differences() {
        // One tanh layer ending in a scalar; checks the tape end to end.
        let w0 = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]).unwrap();
        let b0 = Tensor::vector(vec![0.05, -0.3]);
        let v = Tensor::vector(vec![1.2, -0.8]);
        let input = [0.4, -1.0, 0.6];

        let eval = |params: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut t = Tape::new();
            let ids: Vec<_> = params.iter().map(|p| t.param(p.clone())).collect();
            let x = t.constant_vec(&input);
            let h = t.matmul(ids[0], x).unwrap();
            let h = t.add(h, ids[1]).unwrap();
            let h = t.tanh(h).unwrap();
            let y = t.dot(h, ids[2]).unwrap();
            let g = t.gradient(y, &ids).unwrap();
            (t.value(y).item(), g)
        };

        let params = vec![w0, b0, v];
        let (_, grads) = eval(&params);
        let flat_at = flatten(&params);
        let flat_grad = flatten(&grads);
        let mut f = |x: &[f64]| eval(&unflatten(x, &params)).0;
        let rel = finite_diff_check(&mut f, &flat_at, &flat_grad, 1e-6);
        assert!(rel < 1e-7, "rel {rel}");
    }
}
