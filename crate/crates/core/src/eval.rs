//! Pose error metrics and recall summaries.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_angle, RigidPose};
use crate::stats::median;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no pose errors to summarize")]
    EmptyInput,
    #[error("invalid threshold `{0}`, expected <cm>/<deg> with both positive")]
    InvalidThreshold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Centimeters.
    pub translation: f64,
    /// Degrees.
    pub rotation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallThreshold {
    /// Centimeters.
    pub translation: f64,
    /// Degrees.
    pub rotation: f64,
}

impl RecallThreshold {
    pub fn defaults() -> Vec<Self> {
        vec![
            Self {
                translation: 5.0,
                rotation: 5.0,
            },
            Self {
                translation: 1.0,
                rotation: 1.0,
            },
        ]
    }

    pub fn accepts(&self, e: &PoseError) -> bool {
        e.translation <= self.translation && e.rotation <= self.rotation
    }
}

impl FromStr for RecallThreshold {
    type Err = EvalError;

    /// `"5/5"` is 5 cm and 5 degrees.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvalError::InvalidThreshold(s.to_string());
        let (t, r) = s.trim().split_once('/').ok_or_else(bad)?;
        let t: f64 = t.trim().parse().map_err(|_| bad())?;
        let r: f64 = r.trim().parse().map_err(|_| bad())?;
        if !(t > 0.0 && r > 0.0) || !t.is_finite() || !r.is_finite() {
            return Err(bad());
        }
        Ok(Self {
            translation: t,
            rotation: r,
        })
    }
}

/// Parses a comma separated threshold list such as `"5/5,1/1"`.
pub fn parse_thresholds(s: &str) -> Result<Vec<RecallThreshold>, EvalError> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

pub fn pose_error(estimate: &RigidPose, gt: &RigidPose) -> PoseError {
    PoseError {
        translation: (estimate.center - gt.center).norm() * 100.0,
        rotation: rotation_angle(&estimate.rotation, &gt.rotation),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub threshold: RecallThreshold,
    /// Fraction in `[0, 1]`.
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub median_translation_cm: f64,
    pub median_rotation_deg: f64,
    pub recall: Vec<RecallEntry>,
}

/// Medians per axis, computed independently, and recall per threshold.
pub fn summarize(errors: &[PoseError], thresholds: &[RecallThreshold]) -> Result<Summary, EvalError> {
    let mut t: Vec<f64> = errors.iter().map(|e| e.translation).collect();
    let mut r: Vec<f64> = errors.iter().map(|e| e.rotation).collect();
    let median_translation_cm = median(&mut t).ok_or(EvalError::EmptyInput)?;
    let median_rotation_deg = median(&mut r).ok_or(EvalError::EmptyInput)?;
    let n = errors.len() as f64;
    let recall = thresholds
        .iter()
        .map(|th| RecallEntry {
            threshold: *th,
            recall: errors.iter().filter(|e| th.accepts(e)).count() as f64 / n,
        })
        .collect();
    Ok(Summary {
        count: errors.len(),
        median_translation_cm,
        median_rotation_deg,
        recall,
    })
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "queries\t{}", self.count);
        let _ = writeln!(s, "median_translation_cm\t{:.6}", self.median_translation_cm);
        let _ = writeln!(s, "median_rotation_deg\t{:.6}", self.median_rotation_deg);
        for e in &self.recall {
            let _ = writeln!(
                s,
                "recall@{}cm/{}deg\t{:.2}%",
                e.threshold.translation,
                e.threshold.rotation,
                e.recall * 100.0
            );
        }
        s
    }
}
