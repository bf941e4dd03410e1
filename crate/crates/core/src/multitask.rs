//! Per-task linear heads, the weighted multitask MSE, and Dynamic Weight
//! Averaging.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{init_uniform_fan_in, Binding, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_TARGET_DIM: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sgns,
    Char,
    Electra,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sgns, Task::Char, Task::Electra];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sgns => "sgns",
            Task::Char => "char",
            Task::Electra => "electra",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    pub dim: usize,
}

/// Linear map from the gloss vector to one task's target space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskHead {
    pub task: Task,
    pub input_dim: usize,
    pub target_dim: usize,
}

impl TaskHead {
    pub fn new(task: Task, input_dim: usize, target_dim: usize) -> Self {
        TaskHead {
            task,
            input_dim,
            target_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("head.{}.w", self.task)
    }

    pub fn bias_name(&self) -> String {
        format!("head.{}.b", self.task)
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, store: &mut ParamStore) {
        store.insert(self.weight_name(), init_uniform_fan_in(rng, self.input_dim, self.target_dim));
        store.insert(self.bias_name(), Tensor::zeros(&[self.target_dim]));
    }

    /// `[batch, input_dim]` to `[batch, target_dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, gloss: Var) -> Result<Var> {
        let w = params.get(&self.weight_name())?;
        let b = params.get(&self.bias_name())?;
        let y = tape.matmul(gloss, w)?;
        tape.add(y, b)
    }
}

/// One task's targets for a batch. Absent rows hold zeros and are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTargets {
    pub dim: usize,
    pub values: Vec<f64>,
    pub present: Vec<bool>,
}

impl TaskTargets {
    pub fn rows(&self) -> usize {
        self.present.len()
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

#[derive(Clone, Debug)]
pub struct MultitaskLoss {
    pub total: Var,
    /// Unweighted MSE and number of present rows, `None` when the task had
    /// no target in this batch.
    pub per_task: Vec<Option<(f64, usize)>>,
}

/// `sum_i w_i * MSE(pred_i, target_i)` over tasks with at least one
/// present row; absent rows never reach the graph.
pub fn multitask_loss(
    tape: &mut Tape,
    preds: &[Var],
    targets: &[TaskTargets],
    weights: &[f64],
) -> Result<MultitaskLoss> {
    if preds.len() != targets.len() || preds.len() != weights.len() {
        return Err(Error::op(
            "multitask_loss",
            format!("{} heads, {} targets, {} weights", preds.len(), targets.len(), weights.len()),
        ));
    }
    let mut total: Option<Var> = None;
    let mut per_task = Vec::with_capacity(preds.len());
    for ((&pred, tgt), &w) in preds.iter().zip(targets).zip(weights) {
        let shape = tape.shape(pred).to_vec();
        if shape != [tgt.rows(), tgt.dim] || tgt.values.len() != tgt.rows() * tgt.dim {
            return Err(Error::shape("multitask_loss", &shape, &[tgt.rows(), tgt.dim]));
        }
        let rows: Vec<usize> = (0..tgt.rows()).filter(|&r| tgt.present[r]).collect();
        if rows.is_empty() {
            per_task.push(None);
            continue;
        }
        let picked = if rows.len() == tgt.rows() {
            pred
        } else {
            tape.gather_rows(pred, &rows)?
        };
        let data: Vec<f64> = rows
            .iter()
            .flat_map(|&r| tgt.values[r * tgt.dim..(r + 1) * tgt.dim].iter().copied())
            .collect();
        let target = tape.constant(Tensor::new(vec![rows.len(), tgt.dim], data)?);
        let mse = tape.mse(picked, target)?;
        per_task.push(Some((tape.value(mse).item()?, rows.len())));
        let term = if w == 1.0 { mse } else { tape.scale(mse, w)? };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::op("multitask_loss", "no task has a target in this batch"))?;
    Ok(MultitaskLoss { total, per_task })
}

/// `N * softmax(r / T)`.
pub fn dwa_weights(ratios: &[f64], temperature: f64) -> Vec<f64> {
    let n = ratios.len() as f64;
    let scaled: Vec<f64> = ratios.iter().map(|r| r / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| n * v / z).collect()
}

/// Loss-ratio task weighting, updated once per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct DwaState {
    temperature: f64,
    /// Epoch means `L(t-2)` and `L(t-1)`, oldest first.
    history: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DwaState {
    pub fn new(num_tasks: usize, temperature: f64) -> Result<Self> {
        if num_tasks == 0 {
            return Err(Error::Dwa("at least one task is required".into()));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Dwa(format!("temperature must be positive, got {temperature}")));
        }
        Ok(DwaState {
            temperature,
            history: Vec::new(),
            weights: vec![1.0; num_tasks],
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.weights.len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Weights for the upcoming epoch.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn history(&self) -> &[Vec<f64>] {
        &self.history
    }

    /// Records one epoch's mean losses and returns the next epoch's weights.
    pub fn update(&mut self, epoch_losses: &[f64]) -> Result<Vec<f64>> {
        if epoch_losses.len() != self.num_tasks() {
            return Err(Error::Dwa(format!(
                "expected {} task losses, got {}",
                self.num_tasks(),
                epoch_losses.len()
            )));
        }
        if let Some(bad) = epoch_losses.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::Dwa(format!("epoch losses must be finite and positive, got {bad}")));
        }
        self.history.push(epoch_losses.to_vec());
        if self.history.len() > 2 {
            self.history.remove(0);
        }
        if let [older, newer] = self.history.as_slice() {
            let ratios: Vec<f64> = newer.iter().zip(older).map(|(a, b)| a / b).collect();
            self.weights = dwa_weights(&ratios, self.temperature);
        }
        Ok(self.weights.clone())
    }
}

pub fn dwa_update(state: &mut DwaState, epoch_losses: &[f64]) -> Result<Vec<f64>> {
    state.update(epoch_losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_example() {
        let w = dwa_weights(&[1.2, 0.8], 2.0);
        assert!((w[0] - 1.0997).abs() < 5e-5);
        assert!((w[1] - 0.9003).abs() < 5e-5);
    }

    #[test]
    fn bootstrap_epochs_are_uniform() {
        let mut s = DwaState::new(3, 2.0).unwrap();
        assert_eq!(s.weights(), &[1.0, 1.0, 1.0]);
        assert_eq!(s.update(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0; 3]);
        let w = s.update(&[0.5, 2.0, 3.0]).unwrap();
        assert!(w[0] < w[1]);
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive() {
        let mut s = DwaState::new(2, 2.0).unwrap();
        assert!(s.update(&[0.0, 1.0]).is_err());
        assert!(s.update(&[f64::NAN, 1.0]).is_err());
        assert!(s.update(&[1.0]).is_err());
        assert!(DwaState::new(2, 0.0).is_err());
    }

    #[test]
    fn weighted_sum_example() {
        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let p2 = tape.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        // mse 0.5 and 0.2
        let t1 = TaskTargets {
            dim: 2,
            values: vec![0.0, 0.0],
            present: vec![true],
        };
        let t2 = TaskTargets {
            dim: 1,
            values: vec![0.2f64.sqrt()],
            present: vec![true],
        };
        let loss = multitask_loss(&mut tape, &[p1, p2], &[t1, t2], &[1.2, 0.8]).unwrap();
        assert!((tape.value(loss.total).item().unwrap() - 0.76).abs() < 1e-12);
    }
}
