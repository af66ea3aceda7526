mod common;

use common::gradcheck::run_suite;

#[test]
fn finite_differences_over_sixty_seeds() {
    let r = run_suite(0..60);
    assert!(r.failures.is_empty(), "{}", r.failures.join("\n"));
    assert!(r.uncovered.is_empty(), "not covered: {:?}", r.uncovered);
    assert!(r.checked > 500);
}
