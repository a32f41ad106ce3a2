//! Independent oracles and the acceptance checks of `phonon-kinetics`.
//!
//! Each `criterion_NN` function runs one check at its full size and returns
//! an [`Outcome`]: a pass flag, a one-line measurement summary, and
//! diagnostics that are reported but not judged.

pub mod criteria;
pub mod oracle;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub summary: String,
    pub notes: Vec<String>,
}

impl Outcome {
    pub fn new(pass: bool, summary: impl Into<String>) -> Self {
        Self { pass, summary: summary.into(), notes: Vec::new() }
    }

    pub fn note(mut self, s: impl Into<String>) -> Self {
        self.notes.push(s.into());
        self
    }
}
