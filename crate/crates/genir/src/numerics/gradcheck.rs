//! Central finite-difference gradient checker.
//!
//! Meant for the wide (`f64`) mode: perturbation noise at `f32` swamps the
//! tolerances used across the crate.

use crate::numerics::{Scalar, Tensor2};

/// Max relative error between `analytic` gradients and central differences
/// of `f` over every parameter entry:
/// `|analytic - cd| / (|analytic| + |cd| + 1e-12)`.
pub fn grad_check<R: Scalar>(
    mut f: impl FnMut(&[Tensor2<R>]) -> R,
    params: &[Tensor2<R>],
    analytic: &[Tensor2<R>],
    eps: R,
) -> R {
    assert_eq!(
        params.len(),
        analytic.len(),
        "one analytic gradient per parameter"
    );
    let mut scratch: Vec<Tensor2<R>> = params.to_vec();
    let mut max_err = R::zero();
    for (pi, grad) in analytic.iter().enumerate() {
        assert_eq!(
            params[pi].shape(),
            grad.shape(),
            "gradient shape must match parameter shape"
        );
        for idx in 0..params[pi].as_slice().len() {
            let orig = params[pi].as_slice()[idx];

            scratch[pi].as_mut_slice()[idx] = orig + eps;
            let up = f(&scratch);
            scratch[pi].as_mut_slice()[idx] = orig - eps;
            let down = f(&scratch);
            scratch[pi].as_mut_slice()[idx] = orig;

            let cd = (up - down) / (eps + eps);
            let a = grad.as_slice()[idx];
            let err = (a - cd).abs() / (a.abs() + cd.abs() + R::of_f64(1e-12));
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}
