//! Fixtures shared by the criterion benches.

use safesynth_core::benchmarks::{
    com_exp, conflict_family, fig1, fol_line, janitor, ProblemInstance,
};
use safesynth_core::Rational;

pub fn fixtures() -> Vec<ProblemInstance> {
    vec![
        fig1(Rational::new(3, 2)),
        conflict_family(6).expect("valid family"),
        janitor(4, 4, Rational::new(1, 5), 1).expect("valid grid"),
        fol_line(20, 3, 2, Rational::new(11, 20)).expect("valid line"),
        com_exp(4, 4, 2, Rational::new(1, 5)).expect("valid grid"),
    ]
}
