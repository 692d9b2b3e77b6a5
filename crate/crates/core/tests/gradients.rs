mod common;

use common::grad;

fn check(name: &str, r: &common::GradReport) {
    eprintln!("{name}: {} entries, max rel err {:.2e} ({})", r.checked, r.max_rel, r.worst);
    assert!(r.checked >= 20, "{name}: only {} entries compared", r.checked);
    assert!(r.max_rel < 1e-4, "{name}: {}", r.worst);
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    check("denoiser", &grad::denoiser());
}

#[test]
fn huqnet_gradients_match_finite_differences() {
    check("huqnet", &grad::huqnet());
}

#[test]
fn loss_gradients_match_finite_differences() {
    for (name, r) in grad::losses() {
        check(name, &r);
    }
}
