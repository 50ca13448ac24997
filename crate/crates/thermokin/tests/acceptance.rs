//! Acceptance gate: one test per audited guarantee. Each prints its
//! verdict line and fails if the criterion fails. Expensive replica
//! batches are shared between criteria through the library's lazy cells,
//! so the order in which the harness schedules these tests does not
//! change the totals.

use thermokin::accept;

fn check(c: accept::Criterion) {
    println!("{}", c.line());
    assert!(c.pass, "{}", c.line());
}

#[test]
fn c01_collision_kernel_relaxation_rates() {
    check(accept::criterion_1());
}

#[test]
fn c02_mean_current_rest_point_and_integrator_order() {
    check(accept::criterion_2());
}

#[test]
fn c03_thermostat_energy_invariant() {
    check(accept::criterion_3());
}

#[test]
fn c04_coupled_collision_isometry() {
    check(accept::criterion_4());
}

#[test]
fn c05_pathwise_mean_field_convergence_rate() {
    check(accept::criterion_5());
}

#[test]
fn c06_two_particle_factorization_gap_decay() {
    check(accept::criterion_6());
}

#[test]
fn c07_independent_ensemble_current_tracking() {
    check(accept::criterion_7());
}

#[test]
fn c08_grid_ode_particle_consistency_triangle() {
    check(accept::criterion_8());
}

#[test]
fn c09_moment_envelope_and_energy_floor_audits() {
    check(accept::criterion_9());
}

#[test]
fn c10_flow_derivative_growth_cap() {
    check(accept::criterion_10());
}

#[test]
fn c11_bit_exact_reproducibility() {
    check(accept::criterion_11());
}
