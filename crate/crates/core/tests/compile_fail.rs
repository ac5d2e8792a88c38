//! Ordering violations must be type errors, not runtime bugs. Each program
//! under `compile-fail/` performs one illegal reordering of a durable-update
//! protocol and must be rejected by the compiler.

#[test]
fn ordering_violations_do_not_compile() {
    let t = trybuild::TestCases::new();
    t.compile_fail("tests/compile-fail/*.rs");
}
