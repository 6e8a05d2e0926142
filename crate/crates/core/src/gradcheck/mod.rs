//! Finite-difference verification of tape gradients.
//!
//! [`check_function`] is the generic engine; [`grad_check`] runs it over the
//! operations, model blocks, losses, and the full pipeline.

mod suites;

pub use suites::{check_config, grad_check, grad_check_with, Scope};

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so entries whose
    /// true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Elements checked per input tensor; larger tensors are subsampled.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-4, floor: 1e-3, max_samples: 24, seed: 7 }
    }
}

/// One input of the checked function.
#[derive(Debug, Clone)]
pub struct FdInput {
    pub group: String,
    pub value: Tensor,
    /// Constants are placed on the tape but never perturbed.
    pub differentiable: bool,
}

impl FdInput {
    pub fn var(group: impl Into<String>, value: Tensor) -> Self {
        Self { group: group.into(), value, differentiable: true }
    }

    pub fn constant(value: Tensor) -> Self {
        Self { group: String::new(), value, differentiable: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupStatus {
    Pass,
    Fail,
    /// Every sampled element sat on a kink of abs/max/hardswish.
    SkippedKink,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kink: usize,
    pub status: GroupStatus,
}

impl fmt::Display for GroupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match self.status {
            GroupStatus::Pass => "pass",
            GroupStatus::Fail => "FAIL",
            GroupStatus::SkippedKink => "skipped-kink",
        };
        write!(
            f,
            "{:<32} {:>6} max_rel_err={:.3e} checked={} skipped-kink={}",
            self.name, status, self.max_rel_err, self.checked, self.skipped_kink
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.status != GroupStatus::Fail)
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.groups.extend(other.groups);
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(f, "{g}")?;
        }
        Ok(())
    }
}

fn evaluate<F>(inputs: &[FdInput], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_kink_tracking();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| if i.differentiable { tape.param(i.value.clone()) } else { tape.constant(i.value.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape.value(out).item(), tape.kink_trace().unwrap().signature))
}

/// Compares `backward` against central differences of the scalar returned
/// by `f`, grouping results by [`FdInput::group`].
pub fn check_function<F>(inputs: &[FdInput], f: F, opts: FdOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| if i.differentiable { tape.param(i.value.clone()) } else { tape.constant(i.value.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        if !input.differentiable {
            continue;
        }
        let n = input.value.numel();
        let zeros;
        let analytic = match grads.get(vars[k]) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; n];
                &zeros
            }
        };
        let picks: Vec<usize> = if n <= opts.max_samples {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_samples).into_vec();
            v.sort_unstable();
            v
        };
        let pos = match report.groups.iter().position(|g| g.name == input.group) {
            Some(p) => p,
            None => {
                report.groups.push(GroupReport {
                    name: input.group.clone(),
                    max_rel_err: 0.0,
                    checked: 0,
                    skipped_kink: 0,
                    status: GroupStatus::Pass,
                });
                report.groups.len() - 1
            }
        };
        for i in picks {
            let orig = input.value.data()[i];
            work[k].value.data_mut()[i] = orig + opts.step;
            let (plus, sig_plus) = evaluate(&work, &f)?;
            work[k].value.data_mut()[i] = orig - opts.step;
            let (minus, sig_minus) = evaluate(&work, &f)?;
            work[k].value.data_mut()[i] = orig;
            let group = &mut report.groups[pos];
            if sig_plus != sig_minus {
                group.skipped_kink += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            group.checked += 1;
            if rel > group.max_rel_err {
                group.max_rel_err = rel;
            }
        }
    }
    for g in &mut report.groups {
        g.status = if g.checked == 0 && g.skipped_kink > 0 {
            GroupStatus::SkippedKink
        } else if g.max_rel_err < opts.tolerance {
            GroupStatus::Pass
        } else {
            GroupStatus::Fail
        };
    }
    Ok(report)
}
