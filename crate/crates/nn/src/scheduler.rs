//! Plateau learning-rate schedule with a stopping rule.
//!
//! Epochs are counted from 0. The first epoch always improves on the
//! initial best loss of +inf; after `patience` consecutive epochs without
//! an improvement the rate halves and the counter restarts. Once
//! `max_halvings` halvings have happened, the next plateau stops training.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleAction {
    Continue,
    Halve,
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub initial_lr: f64,
    pub current_lr: f64,
    /// `None` until the first loss is observed.
    pub best_loss: Option<f64>,
    pub epochs_since_improvement: u32,
    pub halvings: u32,
    pub patience: u32,
    pub max_halvings: u32,
    pub improvement_threshold: f64,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            initial_lr,
            current_lr: initial_lr,
            best_loss: None,
            epochs_since_improvement: 0,
            halvings: 0,
            patience: 10,
            max_halvings: 4,
            improvement_threshold: 1e-4,
        }
    }

    /// Feeds one epoch's (validation) loss. Non-finite losses never count
    /// as improvements.
    pub fn update(&mut self, epoch_loss: f64) -> ScheduleAction {
        let improved = match self.best_loss {
            None => epoch_loss.is_finite(),
            Some(best) => epoch_loss < best - self.improvement_threshold,
        };
        if improved {
            self.best_loss = Some(epoch_loss);
            self.epochs_since_improvement = 0;
            return ScheduleAction::Continue;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement < self.patience {
            return ScheduleAction::Continue;
        }
        if self.halvings >= self.max_halvings {
            return ScheduleAction::Stop;
        }
        self.halvings += 1;
        self.epochs_since_improvement = 0;
        self.current_lr = self.initial_lr / f64::powi(2.0, self.halvings as i32);
        ScheduleAction::Halve
    }
}
