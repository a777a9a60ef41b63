mod common;

use common::{fd_grad, grad_instance, max_rel_err};
use psttl::losses::{l_kl, l_sup, l_total, l_unsup, LossWeights};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const MATCH_IOU: f64 = 0.5;

#[test]
fn sup_gradient_matches_finite_differences() {
    for seed in 0..40 {
        let g = grad_instance(seed);
        let analytic = l_sup(&g.params, &g.scenes, MATCH_IOU).unwrap().grads;
        let numeric = fd_grad(&g.params, H, |p| l_sup(p, &g.scenes, MATCH_IOU).unwrap().parts.total());
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= TOL, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn unsup_gradient_matches_finite_differences() {
    let mut live = 0;
    for seed in 100..140 {
        let g = grad_instance(seed);
        let analytic = l_unsup(&g.params, &g.scenes, &g.pseudo, MATCH_IOU).unwrap().grads;
        live += analytic.tensors().iter().any(|(_, t)| t.iter().any(|&x| x != 0.0)) as usize;
        let numeric =
            fd_grad(&g.params, H, |p| l_unsup(p, &g.scenes, &g.pseudo, MATCH_IOU).unwrap().parts.total());
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= TOL, "seed {seed}: rel err {err:e}");
    }
    assert!(live >= 30, "only {live} instances had pseudo-labels");
}

#[test]
fn kl_gradient_matches_finite_differences() {
    for seed in 200..240 {
        let g = grad_instance(seed);
        let kl = l_kl(&g.params, &g.kl_terms).unwrap();
        assert_eq!(kl.clamped, 0);
        let numeric = fd_grad(&g.params, H, |p| l_kl(p, &g.kl_terms).unwrap().value);
        let err = max_rel_err(&kl.grads, &numeric);
        assert!(err <= TOL, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn total_gradient_is_the_weighted_sum() {
    let w = LossWeights { lambda1: 0.5, lambda2: 0.1 };
    for seed in 300..310 {
        let g = grad_instance(seed);
        let sup = l_sup(&g.params, &g.scenes, MATCH_IOU).unwrap();
        let unsup = l_unsup(&g.params, &g.scenes, &g.pseudo, MATCH_IOU).unwrap();
        let kl = l_kl(&g.params, &g.kl_terms).unwrap();
        let (b, grads) = l_total(&sup, &unsup, &kl, &w).unwrap();
        let want = sup.parts.total() + 0.5 * unsup.parts.total() + 0.1 * kl.value;
        assert!((b.l_total - want).abs() <= 1e-12 * want.abs().max(1.0));
        let numeric = fd_grad(&g.params, H, |p| {
            l_sup(p, &g.scenes, MATCH_IOU).unwrap().parts.total()
                + 0.5 * l_unsup(p, &g.scenes, &g.pseudo, MATCH_IOU).unwrap().parts.total()
                + 0.1 * l_kl(p, &g.kl_terms).unwrap().value
        });
        let err = max_rel_err(&grads, &numeric);
        assert!(err <= TOL, "seed {seed}: rel err {err:e}");
    }
}

#[test]
fn zero_weights_reduce_to_supervised() {
    let g = grad_instance(7);
    let sup = l_sup(&g.params, &g.scenes, MATCH_IOU).unwrap();
    let unsup = l_unsup(&g.params, &g.scenes, &g.pseudo, MATCH_IOU).unwrap();
    let kl = l_kl(&g.params, &g.kl_terms).unwrap();
    let (b, grads) = l_total(&sup, &unsup, &kl, &LossWeights { lambda1: 0.0, lambda2: 0.0 }).unwrap();
    assert_eq!(b.l_total, sup.parts.total());
    assert_eq!(grads, sup.grads);
}

#[test]
fn doubling_lambda_doubles_its_contribution() {
    let g = grad_instance(11);
    let sup = l_sup(&g.params, &g.scenes, MATCH_IOU).unwrap();
    let unsup = l_unsup(&g.params, &g.scenes, &g.pseudo, MATCH_IOU).unwrap();
    let kl = l_kl(&g.params, &g.kl_terms).unwrap();
    let total = |l1, l2| l_total(&sup, &unsup, &kl, &LossWeights { lambda1: l1, lambda2: l2 }).unwrap().0.l_total;
    let base = total(0.5, 0.1);
    assert!(((total(1.0, 0.1) - base) - 0.5 * unsup.parts.total()).abs() < 1e-12);
    assert!(((total(0.5, 0.2) - base) - 0.1 * kl.value).abs() < 1e-12);
}
