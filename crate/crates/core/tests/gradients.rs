mod common;

use fairscope_core::nn::gradcheck::{analytic_gradients, compare_gradients, grad_check, DEFAULT_STEP};
use fairscope_core::nn::{Graph, Tensor, Var};
use fairscope_core::Result;

use common::{check_op, encoder_loss_check, op_cases, random_point, tiny_encoder_config};

#[test]
fn every_op_passes_at_ten_points() {
    for case in op_cases() {
        let err = check_op(&case, 10);
        assert!(err < 1e-4, "{}: max relative error {err:e}", case.name);
    }
}

#[test]
fn matmul_gradient_is_tight() {
    let case = op_cases().into_iter().find(|c| c.name == "matmul").unwrap();
    let err = check_op(&case, 10);
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn linear_function_is_exact() {
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let w = g.constant(Tensor::new([3], vec![0.5, -2.0, 3.0]).unwrap());
        let y = g.mul(v[0], w)?;
        Ok(g.sum(y))
    };
    let p = vec![Tensor::new([3], vec![0.3, 1.1, -0.7]).unwrap()];
    let r = grad_check(f, &p, DEFAULT_STEP).unwrap();
    assert!(r.max_rel_error < 1e-9, "{:e}", r.max_rel_error);
}

#[test]
fn oracle_flags_corrupted_gradient() {
    let case = op_cases().into_iter().find(|c| c.name == "layer_norm").unwrap();
    let params = random_point(&case.shapes, 3, false);
    let mut analytic = analytic_gradients(&case.f, &params).unwrap();
    analytic[0].data_mut()[2] += 0.1;
    let value = |p: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = p.iter().map(|t| g.param(t.clone())).collect();
        let loss = (case.f)(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let r = compare_gradients(value, &analytic, &params, DEFAULT_STEP, usize::MAX).unwrap();
    assert!(r.max_rel_error > 1e-2, "{:e}", r.max_rel_error);
    assert_eq!(r.worst, (0, 2));
}

#[test]
fn two_layer_encoder_loss() {
    for seed in 0..3 {
        let r = encoder_loss_check(&tiny_encoder_config(2), seed, usize::MAX);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {:e} at {:?}", r.max_rel_error, r.worst);
    }
}
