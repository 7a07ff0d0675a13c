//! Torque-limit-aware external-force curriculum and dual-agent PPO for
//! humanoid loco-manipulation on a reduced-order simulator.

pub mod error;
pub mod force_curriculum;
pub mod kinematics;
pub mod kvfile;
pub mod robot_model;
pub mod sim_env;
pub mod trainer;
pub mod eval;
pub mod cli;
