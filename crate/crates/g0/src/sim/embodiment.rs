//! Synthetic robot bodies. Action vectors are laid out as
//! `[chassis (vx, vy, w)] [torso (lift, pitch)] [per arm: joints.., gripper]`
//! and normalized to [-1, 1]. Chassis/torso/arm dims are velocity targets
//! scaled by `max_speed`; the per-dim `limits` clamp the integrated
//! configuration (chassis pose, torso position, joint angles, gripper
//! opening).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARM_LINK1: f64 = 0.30;
pub const ARM_LINK2: f64 = 0.25;
/// Torso pitch shifts the arm bases forward by this factor times the pitch.
pub const PITCH_REACH: f64 = 0.30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub id: String,
    pub action_dim: usize,
    pub chassis_dof: usize,
    pub torso_dof: usize,
    pub arms: usize,
    pub joints_per_arm: usize,
    pub gripper_per_arm: usize,
    /// Per-dim (min, max) on the integrated configuration.
    pub limits: Vec<(f64, f64)>,
    /// Per-dim rate cap, units/s; an action of 1.0 commands this rate.
    pub max_speed: Vec<f64>,
    /// Arm base offsets in the chassis frame, one per arm.
    pub arm_offsets: Vec<(f64, f64)>,
}

impl EmbodimentSpec {
    pub fn validate(&self) -> Result<()> {
        let expect =
            self.chassis_dof + self.torso_dof + self.arms * (self.joints_per_arm + self.gripper_per_arm);
        if self.action_dim != expect {
            return Err(Error::contract(format!(
                "embodiment {}: action_dim {} != dof sum {}",
                self.id, self.action_dim, expect
            )));
        }
        if self.limits.len() != self.action_dim || self.max_speed.len() != self.action_dim {
            return Err(Error::contract(format!(
                "embodiment {}: limit/speed tables must have {} entries",
                self.id, self.action_dim
            )));
        }
        for (i, (lo, hi)) in self.limits.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::contract(format!(
                    "embodiment {}: bad limits at dim {i}: ({lo}, {hi})",
                    self.id
                )));
            }
        }
        if self.arm_offsets.len() != self.arms {
            return Err(Error::contract(format!(
                "embodiment {}: need one arm offset per arm",
                self.id
            )));
        }
        Ok(())
    }

    /// Mobile bimanual body: 3 chassis + 2 torso + 2 arms x (2 joints + gripper).
    pub fn full() -> EmbodimentSpec {
        EmbodimentSpec {
            id: "full".to_string(),
            action_dim: 11,
            chassis_dof: 3,
            torso_dof: 2,
            arms: 2,
            joints_per_arm: 2,
            gripper_per_arm: 1,
            limits: vec![
                (0.20, 2.20),              // chassis x
                (0.20, 2.20),              // chassis y
                (-3.14159265, 3.14159265), // chassis theta
                (0.0, 0.40),               // torso lift
                (-0.30, 0.60),             // torso pitch
                (-2.60, 2.60),             // left q0
                (-2.80, 2.80),             // left q1
                (0.0, 1.0),                // left gripper
                (-2.60, 2.60),             // right q0
                (-2.80, 2.80),             // right q1
                (0.0, 1.0),                // right gripper
            ],
            max_speed: vec![1.0, 1.0, 1.5, 0.3, 0.8, 2.5, 2.5, 4.0, 2.5, 2.5, 4.0],
            arm_offsets: vec![(0.10, 0.15), (0.10, -0.15)],
        }
    }

    /// Single fixed arm, 3 dims.
    pub fn single_arm() -> EmbodimentSpec {
        EmbodimentSpec {
            id: "single_arm".to_string(),
            action_dim: 3,
            chassis_dof: 0,
            torso_dof: 0,
            arms: 1,
            joints_per_arm: 2,
            gripper_per_arm: 1,
            limits: vec![(-2.60, 2.60), (-2.80, 2.80), (0.0, 1.0)],
            max_speed: vec![2.5, 2.5, 4.0],
            arm_offsets: vec![(0.0, 0.0)],
        }
    }

    /// Two fixed arms, 6 dims.
    pub fn dual_arm() -> EmbodimentSpec {
        EmbodimentSpec {
            id: "dual_arm".to_string(),
            action_dim: 6,
            chassis_dof: 0,
            torso_dof: 0,
            arms: 2,
            joints_per_arm: 2,
            gripper_per_arm: 1,
            limits: vec![
                (-2.60, 2.60),
                (-2.80, 2.80),
                (0.0, 1.0),
                (-2.60, 2.60),
                (-2.80, 2.80),
                (0.0, 1.0),
            ],
            max_speed: vec![2.5, 2.5, 4.0, 2.5, 2.5, 4.0],
            arm_offsets: vec![(0.0, -0.18), (0.0, 0.18)],
        }
    }

    pub fn by_id(id: &str) -> Result<EmbodimentSpec> {
        match id {
            "full" => Ok(EmbodimentSpec::full()),
            "single_arm" => Ok(EmbodimentSpec::single_arm()),
            "dual_arm" => Ok(EmbodimentSpec::dual_arm()),
            other => Err(Error::config(format!("unknown embodiment `{other}`"))),
        }
    }

    pub fn all_ids() -> [&'static str; 3] {
        ["full", "single_arm", "dual_arm"]
    }

    /// Index of the first dim of arm `a`'s joints.
    pub fn arm_dim(&self, arm: usize) -> usize {
        self.chassis_dof + self.torso_dof + arm * (self.joints_per_arm + self.gripper_per_arm)
    }

    /// Index of arm `a`'s gripper dim.
    pub fn gripper_dim(&self, arm: usize) -> usize {
        self.arm_dim(arm) + self.joints_per_arm
    }

    pub fn torso_dim(&self) -> usize {
        self.chassis_dof
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_specs_validate() {
        for id in EmbodimentSpec::all_ids() {
            EmbodimentSpec::by_id(id).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn dim_layout() {
        let e = EmbodimentSpec::full();
        assert_eq!(e.arm_dim(0), 5);
        assert_eq!(e.gripper_dim(0), 7);
        assert_eq!(e.arm_dim(1), 8);
        assert_eq!(e.gripper_dim(1), 10);
        assert_eq!(e.torso_dim(), 3);
    }

    #[test]
    fn unknown_embodiment_is_config_error() {
        assert!(EmbodimentSpec::by_id("hexapod").is_err());
    }
}
