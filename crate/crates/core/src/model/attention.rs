//! Multi-head scaled dot-product self-attention over a batch of stacked
//! sequences. Rows `b*T .. (b+1)*T` of every matrix belong to sequence `b`;
//! head `n` owns columns `n*F .. (n+1)*F`.

use rayon::prelude::*;

use crate::numerics::{gemm_view, softmax_in_place, Tensor2};

/// Attention output (heads concatenated) and the row-stochastic weights,
/// laid out as `[sequence][head][query][key]`.
pub(crate) fn forward(q: &Tensor2, k: &Tensor2, v: &Tensor2, t: usize, heads: usize) -> (Tensor2, Vec<f64>) {
    let d = q.cols();
    let f = d / heads;
    let batch = q.rows() / t;
    let scale = 1.0 / (f as f64).sqrt();
    let mut ctx = Tensor2::zeros(q.rows(), d);
    let mut probs = vec![0.0; batch * heads * t * t];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    ctx.data_mut()
        .par_chunks_mut(t * d)
        .zip(probs.par_chunks_mut(heads * t * t))
        .enumerate()
        .for_each(|(b, (cb, pb))| {
            let span = b * t * d..(b + 1) * t * d;
            let (qb, kb, vb) = (&qd[span.clone()], &kd[span.clone()], &vd[span]);
            for n in 0..heads {
                let p = &mut pb[n * t * t..(n + 1) * t * t];
                let o = n * f;
                // S = Q_n K_n^T / sqrt(F)
                gemm_view((t, f, t), scale, &qb[o..], (d, 1), &kb[o..], (1, d), p, t, false);
                for row in p.chunks_mut(t) {
                    softmax_in_place(row);
                }
                gemm_view((t, t, f), 1.0, p, (t, 1), &vb[o..], (d, 1), &mut cb[o..], d, false);
            }
        });
    (ctx, probs)
}

/// Gradients of the attention inputs given the gradient of its output.
pub(crate) fn backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    probs: &[f64],
    dctx: &Tensor2,
    t: usize,
    heads: usize,
) -> (Tensor2, Tensor2, Tensor2) {
    let d = q.cols();
    let f = d / heads;
    let scale = 1.0 / (f as f64).sqrt();
    let rows = q.rows();
    let mut dq = Tensor2::zeros(rows, d);
    let mut dk = Tensor2::zeros(rows, d);
    let mut dv = Tensor2::zeros(rows, d);
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), dctx.data());
    dq.data_mut()
        .par_chunks_mut(t * d)
        .zip(dk.data_mut().par_chunks_mut(t * d))
        .zip(dv.data_mut().par_chunks_mut(t * d))
        .enumerate()
        .for_each(|(b, ((dqb, dkb), dvb))| {
            let span = b * t * d..(b + 1) * t * d;
            let (qb, kb, vb, gb) = (
                &qd[span.clone()],
                &kd[span.clone()],
                &vd[span.clone()],
                &gd[span],
            );
            let mut ds = vec![0.0; t * t];
            for n in 0..heads {
                let p = &probs[(b * heads + n) * t * t..(b * heads + n + 1) * t * t];
                let o = n * f;
                // dP = dCtx_n V_n^T
                gemm_view((t, f, t), 1.0, &gb[o..], (d, 1), &vb[o..], (1, d), &mut ds, t, false);
                // dV_n = P^T dCtx_n
                gemm_view((t, t, f), 1.0, p, (1, t), &gb[o..], (d, 1), &mut dvb[o..], d, false);
                for (dsr, pr) in ds.chunks_mut(t).zip(p.chunks(t)) {
                    let inner: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (g, &y) in dsr.iter_mut().zip(pr) {
                        *g = y * (*g - inner) * scale;
                    }
                }
                gemm_view((t, t, f), 1.0, &ds, (t, 1), &kb[o..], (d, 1), &mut dqb[o..], d, false);
                gemm_view((t, t, f), 1.0, &ds, (1, t), &qb[o..], (d, 1), &mut dkb[o..], d, false);
            }
        });
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, matmul_nt, softmax_rows};
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
        Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straightforward per-head reference built from the public ops.
    fn reference(q: &Tensor2, k: &Tensor2, v: &Tensor2, t: usize, heads: usize) -> Tensor2 {
        let d = q.cols();
        let f = d / heads;
        let mut out = Tensor2::zeros(q.rows(), d);
        for b in 0..q.rows() / t {
            for n in 0..heads {
                let block = |m: &Tensor2| m.slice_rows(b * t, t).slice_cols(n * f, f);
                let s = matmul_nt(&block(q), &block(k)).unwrap().map(|x| x / (f as f64).sqrt());
                let a = matmul(&softmax_rows(&s), &block(v)).unwrap();
                for i in 0..t {
                    out.row_mut(b * t + i)[n * f..(n + 1) * f].copy_from_slice(a.row(i));
                }
            }
        }
        out
    }

    #[test]
    fn matches_reference_and_rows_are_stochastic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (t, heads, d) = (5, 2, 6);
        let (q, k, v) = (random(3 * t, d, &mut rng), random(3 * t, d, &mut rng), random(3 * t, d, &mut rng));
        let (ctx, probs) = forward(&q, &k, &v, t, heads);
        let want = reference(&q, &k, &v, t, heads);
        for (a, b) in ctx.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in probs.chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn single_position_returns_value_row() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (random(1, 4, &mut rng), random(1, 4, &mut rng), random(1, 4, &mut rng));
        let (ctx, _) = forward(&q, &k, &v, 1, 1);
        assert_eq!(ctx.data(), v.data());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (t, heads, d) = (4, 2, 4);
        let rows = 2 * t;
        let mut inputs = [random(rows, d, &mut rng), random(rows, d, &mut rng), random(rows, d, &mut rng)];
        let w = random(rows, d, &mut rng);
        let loss = |x: &[Tensor2; 3]| forward(&x[0], &x[1], &x[2], t, heads).0.dot(&w).unwrap();
        let (_, probs) = forward(&inputs[0], &inputs[1], &inputs[2], t, heads);
        let (dq, dk, dv) = backward(&inputs[0], &inputs[1], &inputs[2], &probs, &w, t, heads);
        let analytic = [dq, dk, dv];
        let h = 1e-5;
        for which in 0..3 {
            for i in 0..rows * d {
                let orig = inputs[which].data()[i];
                inputs[which].data_mut()[i] = orig + h;
                let up = loss(&inputs);
                inputs[which].data_mut()[i] = orig - h;
                let down = loss(&inputs);
                inputs[which].data_mut()[i] = orig;
                let num = (up - down) / (2.0 * h);
                let a = analytic[which].data()[i];
                assert!((a - num).abs() < 1e-7, "input {which} entry {i}: {a} vs {num}");
            }
        }
    }
}
