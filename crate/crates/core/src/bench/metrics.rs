//! Continual-learning metrics over an accuracy matrix.
//!
//! `R[i][j]` is the accuracy on task `j` after stage `i` (0-based).
//! ACC averages the last row, BWT averages `R[T-1][j] - R[j][j]` over
//! `j < T-1`, FWT averages `R[j-1][j] - chance_j` over `j >= 1`. With a
//! single task BWT and FWT are 0.

use crate::error::{MdmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    t: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            cells: vec![None; t * t],
        }
    }

    pub fn tasks(&self) -> usize {
        self.t
    }

    pub fn set(&mut self, stage: usize, task: usize, acc: f64) -> Result<()> {
        if stage >= self.t || task >= self.t {
            return Err(MdmError::invalid(format!("cell ({stage}, {task}) outside {0}x{0}", self.t)));
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(MdmError::invalid(format!("accuracy {acc} outside [0, 1]")));
        }
        self.cells[stage * self.t + task] = Some(acc);
        Ok(())
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.cells.get(stage * self.t + task).copied().flatten()
    }

    fn need(&self, stage: usize, task: usize) -> Result<f64> {
        self.get(stage, task)
            .ok_or_else(|| MdmError::IncompleteMatrix(format!("R[{stage}][{task}] is missing")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub acc_matrix: AccuracyMatrix,
    pub acc: f64,
    pub bwt: f64,
    pub fwt: f64,
    pub uad: Option<f64>,
}

/// `chance[j]` is the chance-level accuracy of task `j` (1 / classes).
pub fn compute_metrics(r: &AccuracyMatrix, chance: &[f64]) -> Result<MetricReport> {
    let t = r.tasks();
    if t == 0 {
        return Err(MdmError::IncompleteMatrix("no tasks".into()));
    }
    crate::error::check_len(chance.len(), t)?;
    let last = t - 1;
    let mut acc = 0.0;
    for j in 0..t {
        acc += r.need(last, j)?;
    }
    acc /= t as f64;
    let mut bwt = 0.0;
    for j in 0..last {
        bwt += r.need(last, j)? - r.need(j, j)?;
    }
    let mut fwt = 0.0;
    for j in 1..t {
        fwt += r.need(j - 1, j)? - chance[j];
    }
    if last > 0 {
        bwt /= last as f64;
        fwt /= last as f64;
    }
    // the full lower triangle is part of the contract even where unused
    for i in 0..t {
        for j in 0..=i {
            r.need(i, j)?;
        }
    }
    Ok(MetricReport {
        acc_matrix: r.clone(),
        acc,
        bwt,
        fwt,
        uad: None,
    })
}

/// Mean accuracy drop over the remaining tasks.
pub fn uad_from(before: &[f64], after: &[f64]) -> Result<f64> {
    crate::error::check_len(before.len(), after.len())?;
    if before.is_empty() {
        return Ok(0.0);
    }
    Ok(before.iter().zip(after).map(|(b, a)| b - a).sum::<f64>() / before.len() as f64)
}
