use lexlat_core::gradcheck::{check_seed, distill_teacher_gradient, Dims};

#[test]
fn all_losses_match_finite_differences() {
    for seed in 0..20 {
        for c in check_seed(seed, Dims::default(), 0.05).unwrap() {
            assert!(c.rel_error < 1e-3, "{} seed {}: relative error {}", c.loss, c.seed, c.rel_error);
        }
    }
}

#[test]
fn distillation_teacher_receives_no_gradient() {
    for seed in 0..5 {
        assert_eq!(distill_teacher_gradient(seed, Dims::default(), 0.05).unwrap(), 0.0);
    }
}
