use uniquery::gradcheck::{grad_check, LOSS_NAMES};

#[test]
fn every_loss_passes_at_1e_4() {
    for name in LOSS_NAMES {
        let r = grad_check(name, 1e-4).unwrap();
        eprintln!("{name}: max rel {:.3e} max abs {:.3e} over {}", r.max_rel_error, r.max_abs_error, r.checked);
        assert!(r.checked >= 200);
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn unknown_loss_is_rejected() {
    assert!(grad_check("bogus", 1e-4).is_err());
}
