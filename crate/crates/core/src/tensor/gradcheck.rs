use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("grad_check eps must be > 0, got {eps}")));
    }
    let eval = |input: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input.clone(), false);
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return Err(Error::dim("grad_check", y.shape(), &[1]));
        }
        let y = y.data()[0];
        if !y.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value {y}")));
        }
        Ok(y)
    };

    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = f(&mut tape, v)?;
        if !tape.value(out).is_finite() {
            return Err(Error::Numeric("non-finite function value".into()));
        }
        tape.backward(out)?.wrt(v)
    };

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_exact() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |t: &mut Tape<'_>, v: Var| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = f(&mut tape, v).unwrap();
        assert_eq!(tape.backward(out).unwrap().wrt(v).data(), &[2.0, 4.0, 6.0]);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-7);
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let ident = |t: &mut Tape<'_>, v: Var| Ok(t.sum(v));
        assert!(matches!(grad_check(ident, &x, 0.0), Err(Error::Validation(_))));
        let blowup = |t: &mut Tape<'_>, v: Var| Ok(t.scale(v, f64::INFINITY));
        assert!(matches!(grad_check(blowup, &x, 1e-5), Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_against_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let wa = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let loss = |t: &mut Tape<'_>, y: Var, w: &Tensor| -> Result<Var> {
            let w = t.leaf(w.clone(), false);
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        };
        let bb = b.clone();
        let wa1 = wa.clone();
        let err_a = grad_check(
            move |t, v| {
                let bv = t.leaf(bb.clone(), false);
                let y = t.matmul(v, bv)?;
                loss(t, y, &wa1)
            },
            &a,
            1e-5,
        )
        .unwrap();
        let aa = a.clone();
        let err_b = grad_check(
            move |t, v| {
                let av = t.leaf(aa.clone(), false);
                let y = t.matmul(av, v)?;
                loss(t, y, &wa)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn transposed_matmuls() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let other = Tensor::randn(&[4, 3], 1.0, &mut rng);
        for (ta, tb) in [(false, true), (true, false), (true, true)] {
            let o = other.clone();
            let err = grad_check(
                move |t, v| {
                    let ov = t.leaf(o.clone(), false);
                    let y = t.matmul_ex(v, ta, ov, tb)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum(y2))
                },
                &x,
                1e-5,
            );
            // shape mismatch is fine for (true,true) with 4×3 operands
            if let Ok(e) = err {
                assert!(e < 1e-6, "{ta} {tb} {e}");
            }
            let o = other.clone();
            let err = grad_check(
                move |t, v| {
                    let ov = t.leaf(o.clone(), false);
                    let y = t.matmul_ex(ov, ta, v, tb)?;
                    let y2 = t.mul(y, y)?;
                    Ok(t.sum(y2))
                },
                &x,
                1e-5,
            );
            if let Ok(e) = err {
                assert!(e < 1e-6, "{ta} {tb} {e}");
            }
        }
    }

    #[test]
    fn layernorm_gelu_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let g = Tensor::uniform(&[8], 0.5, 1.5, &mut rng);
        let b = Tensor::randn(&[8], 0.1, &mut rng);
        let (g1, b1) = (g.clone(), b.clone());
        let err = grad_check(
            move |t, v| {
                let gv = t.leaf(g1.clone(), false);
                let bv = t.leaf(b1.clone(), false);
                let y = t.layer_norm(v, gv, bv, 1e-5)?;
                let y = t.gelu(y);
                let w = t.leaf(Tensor::new(vec![2, 8], (0..16).map(|i| (i as f64).sin()).collect())?, false);
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
        // the affine parameters too
        let xx = x.clone();
        let err = grad_check(
            move |t, gv| {
                let xv = t.leaf(xx.clone(), false);
                let bv = t.leaf(b.clone(), false);
                let y = t.layer_norm(xv, gv, bv, 1e-5)?;
                let y = t.gelu(y);
                Ok(t.sum(y))
            },
            &g,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::randn(&[5, 4], 2.0, &mut rng);
        let labels = vec![0, 3, 1, 1, 2];
        let err = grad_check(move |t, v| t.softmax_cross_entropy(v, &labels), &logits, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn remaining_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let row = Tensor::randn(&[6], 1.0, &mut rng);
        let err = grad_check(
            move |t, v| {
                let r = t.leaf(row.clone(), false);
                let y = t.add_row(v, r)?;
                let s = t.softmax_rows(y)?;
                let a = t.slice_cols(s, 1, 3)?;
                let b = t.slice_cols(v, 0, 2)?;
                let sg = t.sigmoid(b);
                let c = t.concat_cols(&[a, sg])?;
                let c = t.scale(c, 1.7);
                let c = t.add_scalar(c, 0.3);
                let m = t.mean_rows(c)?;
                let wv = t.leaf(w.clone(), false);
                let d = t.sub(v, wv)?;
                let d = t.mul(d, d)?;
                let d = t.reshape(d, &[1, 2, 2, 6])?;
                let d = t.mean_pool_hw(d)?;
                let s1 = t.sum(m);
                let s2 = t.sum(d);
                t.add(s1, s2)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn segmentation_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tokens = Tensor::randn(&[4, 4], 1.5, &mut rng);
        let target = Tensor::new(
            vec![8, 8],
            (0..64).map(|i| if (i / 8) < 4 && (i % 8) < 5 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let err = grad_check(
            move |t, v| {
                let img = t.cells_to_image(v, 2, 2, 2)?;
                let f = t.focal_loss(img, &target, 0.25, 2.0)?;
                let d = t.dice_loss(img, &target, 1.0)?;
                let d = t.scale(d, 10.0);
                t.add(f, d)
            },
            &tokens,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
