//! Articulated robot description: a floating base with a lower-body DoF
//! count and one or two serial arm chains.
//!
//! Model files use the sectioned key-value format from [`crate::kvfile`]:
//! one `[base]` section, a `[joint]` section followed immediately by the
//! `[link]` it moves, repeated per joint, and one `[end_effector]` section per
//! arm. A joint whose `parent` is `base` starts a chain; its origin is the
//! shoulder mount in the base frame. Rotations are roll/pitch/yaw about fixed
//! X, Y, Z axes (`R = Rz(yaw) * Ry(pitch) * Rx(roll)`). SI units, radians.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::ModelError;
use crate::kvfile::{fmt_f64, fmt_vec, Document, Section};

pub const BASE_LINK: &str = "base";

const BASE_KEYS: &[&str] = &["name", "mass", "inertia", "default_height", "lower_dof_count"];
const JOINT_KEYS: &[&str] = &[
    "name",
    "parent",
    "axis",
    "origin_translation",
    "origin_rotation",
    "position_limits",
    "torque_limit",
    "default_position",
    "pd_gains",
    "effective_inertia",
    "viscous_friction",
];
const LINK_KEYS: &[&str] = &["name", "mass", "com_offset"];
const EE_KEYS: &[&str] = &["side", "link", "distal_offset"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArmSide {
    Left,
    Right,
}

impl ArmSide {
    pub fn as_str(self) -> &'static str {
        match self {
            ArmSide::Left => "left",
            ArmSide::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "left" => Some(ArmSide::Left),
            "right" => Some(ArmSide::Right),
            _ => None,
        }
    }
}

impl fmt::Display for ArmSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub parent: String,
    pub axis: Vector3<f64>,
    pub origin_translation: Vector3<f64>,
    pub origin_rotation: Vector3<f64>,
    pub position_limits: (f64, f64),
    /// N·m, symmetric about zero.
    pub torque_limit: f64,
    pub default_position: f64,
    /// (Kp N·m/rad, Kd N·m·s/rad)
    pub pd_gains: (f64, f64),
    /// kg·m², diagonal stand-in for the reflected link + rotor inertia.
    pub effective_inertia: f64,
    pub viscous_friction: f64,
}

impl JointSpec {
    pub fn within_limits(&self, q: f64) -> bool {
        q >= self.position_limits.0 && q <= self.position_limits.1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub name: String,
    pub mass: f64,
    pub com_offset: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseSpec {
    pub mass: f64,
    /// Diagonal inertia about the base frame axes.
    pub inertia: Vector3<f64>,
    pub default_height: f64,
}

/// One serial arm. `links[k]` is moved by `joints[k]`; the last link is the
/// end-effector link.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmChain {
    pub side: ArmSide,
    pub joints: Vec<JointSpec>,
    pub links: Vec<LinkSpec>,
    /// Distal point of the end-effector link, in that link's frame.
    pub distal_offset: Vector3<f64>,
}

impl ArmChain {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn ee_link(&self) -> &LinkSpec {
        self.links.last().expect("validated chain is non-empty")
    }

    pub fn torque_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.torque_limit).collect()
    }

    pub fn default_positions(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.default_position).collect()
    }

    pub fn mount(&self) -> Vector3<f64> {
        self.joints[0].origin_translation
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub base: BaseSpec,
    pub lower_dof_count: usize,
    pub arms: Vec<ArmChain>,
}

impl RobotModel {
    /// Total arm joint count, n^u.
    pub fn upper_dof_count(&self) -> usize {
        self.arms.iter().map(ArmChain::dof).sum()
    }

    /// n = n^l + n^u.
    pub fn dof(&self) -> usize {
        self.lower_dof_count + self.upper_dof_count()
    }

    pub fn arm(&self, side: ArmSide) -> Option<&ArmChain> {
        self.arms.iter().find(|a| a.side == side)
    }

    pub fn joints(&self) -> impl Iterator<Item = &JointSpec> {
        self.arms.iter().flat_map(|a| a.joints.iter())
    }

    pub fn total_mass(&self) -> f64 {
        self.base.mass + self.arms.iter().map(ArmChain::total_mass).sum::<f64>()
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let doc = Document::parse(text)?;
        Self::from_document(&doc)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn from_document(doc: &Document) -> Result<Self, ModelError> {
        let mut base_sec: Option<&Section> = None;
        let mut pairs: Vec<(JointSpec, LinkSpec)> = Vec::new();
        let mut pending_joint: Option<JointSpec> = None;
        let mut ees: Vec<(ArmSide, String, Vector3<f64>)> = Vec::new();

        for sec in &doc.sections {
            if pending_joint.is_some() && sec.name != "link" {
                let j = pending_joint.take().unwrap();
                return Err(ModelError::invalid(
                    format!("joint `{}`", j.name),
                    "must be followed immediately by its [link] section",
                ));
            }
            match sec.name.as_str() {
                "base" => {
                    if base_sec.is_some() {
                        return Err(ModelError::invalid("base", "more than one [base] section"));
                    }
                    sec.check_keys(BASE_KEYS)?;
                    base_sec = Some(sec);
                }
                "joint" => {
                    sec.check_keys(JOINT_KEYS)?;
                    pending_joint = Some(parse_joint(sec)?);
                }
                "link" => {
                    sec.check_keys(LINK_KEYS)?;
                    let joint = pending_joint.take().ok_or_else(|| {
                        ModelError::invalid(
                            format!("link `{}`", sec.get("name").unwrap_or("?")),
                            "[link] must directly follow the [joint] that moves it",
                        )
                    })?;
                    let link = LinkSpec {
                        name: sec.require("name")?.to_string(),
                        mass: sec.f64("mass")?,
                        com_offset: Vector3::from(sec.vec_n::<3>("com_offset")?),
                    };
                    pairs.push((joint, link));
                }
                "end_effector" => {
                    sec.check_keys(EE_KEYS)?;
                    let side_raw = sec.require("side")?;
                    let side = ArmSide::parse(side_raw).ok_or_else(|| {
                        ModelError::invalid("end_effector.side", format!("`{side_raw}` is not left|right"))
                    })?;
                    ees.push((
                        side,
                        sec.require("link")?.to_string(),
                        Vector3::from(sec.vec_n::<3>("distal_offset")?),
                    ));
                }
                other => {
                    return Err(ModelError::invalid(
                        format!("section [{other}]"),
                        "unknown section",
                    ))
                }
            }
        }
        if let Some(j) = pending_joint {
            return Err(ModelError::invalid(
                format!("joint `{}`", j.name),
                "missing its [link] section",
            ));
        }
        let base_sec = base_sec.ok_or_else(|| ModelError::invalid("base", "missing [base] section"))?;

        let name = base_sec.require("name")?.to_string();
        let base = BaseSpec {
            mass: base_sec.f64("mass")?,
            inertia: Vector3::from(base_sec.vec_n::<3>("inertia")?),
            default_height: base_sec.f64("default_height")?,
        };
        let lower_dof_count = base_sec.usize("lower_dof_count")?;

        let arms = assemble_chains(pairs, ees)?;
        let model = RobotModel {
            name,
            base,
            lower_dof_count,
            arms,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks every invariant; the error names the offending field.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.name.trim().is_empty() {
            return Err(ModelError::invalid("base.name", "empty"));
        }
        if !(self.base.mass >= 0.0 && self.base.mass.is_finite()) {
            return Err(ModelError::invalid("base.mass", "must be finite and >= 0"));
        }
        if self.base.inertia.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(ModelError::invalid("base.inertia", "must be finite and >= 0"));
        }
        if !(self.base.default_height >= 0.0 && self.base.default_height.is_finite()) {
            return Err(ModelError::invalid("base.default_height", "must be finite and >= 0"));
        }
        if self.arms.is_empty() || self.arms.len() > 2 {
            return Err(ModelError::invalid(
                "end_effector",
                format!("expected one or two arms, found {}", self.arms.len()),
            ));
        }
        if self.arms.len() == 2 {
            if self.arms[0].side == self.arms[1].side {
                return Err(ModelError::invalid("end_effector.side", "both arms have the same side"));
            }
            if self.arms[0].dof() != self.arms[1].dof() {
                return Err(ModelError::invalid(
                    "arms",
                    format!(
                        "arms must have equal joint counts ({} vs {})",
                        self.arms[0].dof(),
                        self.arms[1].dof()
                    ),
                ));
            }
        }

        let mut joint_names = HashSet::new();
        let mut link_names = HashSet::new();
        link_names.insert(BASE_LINK.to_string());
        for arm in &self.arms {
            if arm.joints.is_empty() || arm.joints.len() != arm.links.len() {
                return Err(ModelError::invalid(format!("{} arm", arm.side), "empty or unpaired chain"));
            }
            for (k, (j, l)) in arm.joints.iter().zip(&arm.links).enumerate() {
                if !joint_names.insert(j.name.clone()) {
                    return Err(ModelError::invalid(
                        format!("joint `{}`", j.name),
                        "duplicate joint name",
                    ));
                }
                if !link_names.insert(l.name.clone()) {
                    return Err(ModelError::invalid(format!("link `{}`", l.name), "duplicate link name"));
                }
                let expected_parent = if k == 0 { BASE_LINK } else { arm.links[k - 1].name.as_str() };
                if j.parent != expected_parent {
                    return Err(ModelError::invalid(
                        format!("joint `{}`.parent", j.name),
                        format!("expected `{expected_parent}`, found `{}`", j.parent),
                    ));
                }
                validate_joint(j)?;
                if !(l.mass >= 0.0 && l.mass.is_finite()) {
                    return Err(ModelError::invalid(format!("link `{}`.mass", l.name), "must be finite and >= 0"));
                }
                if l.com_offset.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::invalid(format!("link `{}`.com_offset", l.name), "non-finite"));
                }
            }
            let d = arm.distal_offset;
            let com = arm.ee_link().com_offset;
            let dn = d.norm();
            if !(dn > 0.0 && dn.is_finite()) {
                return Err(ModelError::invalid(
                    format!("end_effector `{}`.distal_offset", arm.ee_link().name),
                    "must be a non-zero finite vector",
                ));
            }
            if com.dot(&d) / dn > dn + 1e-12 {
                return Err(ModelError::invalid(
                    format!("end_effector `{}`.distal_offset", arm.ee_link().name),
                    "distal point lies before the link CoM along the link axis",
                ));
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> Document {
        let mut doc = Document::default();
        let mut base = Section::new("base");
        base.push("name", self.name.clone());
        base.push("mass", fmt_f64(self.base.mass));
        base.push("inertia", fmt_vec(self.base.inertia.as_slice()));
        base.push("default_height", fmt_f64(self.base.default_height));
        base.push("lower_dof_count", self.lower_dof_count.to_string());
        doc.sections.push(base);
        for arm in &self.arms {
            for (j, l) in arm.joints.iter().zip(&arm.links) {
                let mut js = Section::new("joint");
                js.push("name", j.name.clone());
                js.push("parent", j.parent.clone());
                js.push("axis", fmt_vec(j.axis.as_slice()));
                js.push("origin_translation", fmt_vec(j.origin_translation.as_slice()));
                js.push("origin_rotation", fmt_vec(j.origin_rotation.as_slice()));
                js.push("position_limits", fmt_vec(&[j.position_limits.0, j.position_limits.1]));
                js.push("torque_limit", fmt_f64(j.torque_limit));
                js.push("default_position", fmt_f64(j.default_position));
                js.push("pd_gains", fmt_vec(&[j.pd_gains.0, j.pd_gains.1]));
                js.push("effective_inertia", fmt_f64(j.effective_inertia));
                js.push("viscous_friction", fmt_f64(j.viscous_friction));
                doc.sections.push(js);
                let mut ls = Section::new("link");
                ls.push("name", l.name.clone());
                ls.push("mass", fmt_f64(l.mass));
                ls.push("com_offset", fmt_vec(l.com_offset.as_slice()));
                doc.sections.push(ls);
            }
        }
        for arm in &self.arms {
            let mut es = Section::new("end_effector");
            es.push("side", arm.side.as_str());
            es.push("link", arm.ee_link().name.clone());
            es.push("distal_offset", fmt_vec(arm.distal_offset.as_slice()));
            doc.sections.push(es);
        }
        doc
    }

    pub fn serialize(&self) -> String {
        self.to_document().render()
    }
}

fn parse_joint(sec: &Section) -> Result<JointSpec, ModelError> {
    let limits = sec.vec_n::<2>("position_limits")?;
    let gains = sec.vec_n::<2>("pd_gains")?;
    Ok(JointSpec {
        name: sec.require("name")?.to_string(),
        parent: sec.require("parent")?.to_string(),
        axis: Vector3::from(sec.vec_n::<3>("axis")?),
        origin_translation: Vector3::from(sec.vec_n::<3>("origin_translation")?),
        origin_rotation: Vector3::from(sec.vec_n::<3>("origin_rotation")?),
        position_limits: (limits[0], limits[1]),
        torque_limit: sec.f64("torque_limit")?,
        default_position: sec.f64("default_position")?,
        pd_gains: (gains[0], gains[1]),
        effective_inertia: sec.f64("effective_inertia")?,
        viscous_friction: sec.f64("viscous_friction")?,
    })
}

fn validate_joint(j: &JointSpec) -> Result<(), ModelError> {
    let field = |f: &str| format!("joint `{}`.{f}", j.name);
    if ((j.axis.norm()) - 1.0).abs() > 1e-9 {
        return Err(ModelError::invalid(field("axis"), format!("norm {} is not 1", j.axis.norm())));
    }
    if j.origin_translation.iter().chain(j.origin_rotation.iter()).any(|v| !v.is_finite()) {
        return Err(ModelError::invalid(field("origin"), "non-finite"));
    }
    let (lo, hi) = j.position_limits;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(ModelError::invalid(field("position_limits"), "need finite lower < upper"));
    }
    if !(j.default_position >= lo && j.default_position <= hi) {
        return Err(ModelError::invalid(field("default_position"), "outside position limits"));
    }
    if !(j.torque_limit >= 0.0 && j.torque_limit.is_finite()) {
        return Err(ModelError::invalid(
            field("torque_limit"),
            format!("must be finite and >= 0, got {}", j.torque_limit),
        ));
    }
    if !(j.pd_gains.0 >= 0.0 && j.pd_gains.1 >= 0.0 && j.pd_gains.0.is_finite() && j.pd_gains.1.is_finite()) {
        return Err(ModelError::invalid(field("pd_gains"), "must be finite and >= 0"));
    }
    if !(j.effective_inertia > 0.0 && j.effective_inertia.is_finite()) {
        return Err(ModelError::invalid(field("effective_inertia"), "must be finite and > 0"));
    }
    if !(j.viscous_friction >= 0.0 && j.viscous_friction.is_finite()) {
        return Err(ModelError::invalid(field("viscous_friction"), "must be finite and >= 0"));
    }
    Ok(())
}

/// Groups joint/link pairs into chains by walking parents from each
/// end-effector link back to the base.
fn assemble_chains(
    pairs: Vec<(JointSpec, LinkSpec)>,
    ees: Vec<(ArmSide, String, Vector3<f64>)>,
) -> Result<Vec<ArmChain>, ModelError> {
    let mut seen = HashSet::new();
    for (j, _) in &pairs {
        if !seen.insert(j.name.as_str()) {
            return Err(ModelError::invalid(format!("joint `{}`", j.name), "duplicate joint name"));
        }
    }
    let mut seen_links = HashSet::new();
    for (_, l) in &pairs {
        if l.name == BASE_LINK || !seen_links.insert(l.name.as_str()) {
            return Err(ModelError::invalid(format!("link `{}`", l.name), "duplicate link name"));
        }
    }

    let mut used = vec![false; pairs.len()];
    let mut arms = Vec::new();
    for (side, ee_link, distal) in ees {
        let mut chain_idx = Vec::new();
        let mut current = ee_link.clone();
        loop {
            let idx = pairs
                .iter()
                .position(|(_, l)| l.name == current)
                .ok_or_else(|| {
                    ModelError::invalid(
                        format!("link `{current}`"),
                        "referenced as parent or end-effector but not defined",
                    )
                })?;
            if used[idx] || chain_idx.contains(&idx) {
                return Err(ModelError::invalid(
                    format!("joint `{}`", pairs[idx].0.name),
                    "shared between chains or part of a cycle",
                ));
            }
            chain_idx.push(idx);
            let parent = &pairs[idx].0.parent;
            if parent == BASE_LINK {
                break;
            }
            current = parent.clone();
        }
        chain_idx.reverse();
        for &i in &chain_idx {
            used[i] = true;
        }
        let (joints, links) = chain_idx.iter().map(|&i| pairs[i].clone()).unzip();
        arms.push(ArmChain {
            side,
            joints,
            links,
            distal_offset: distal,
        });
    }
    if let Some(i) = used.iter().position(|u| !u) {
        return Err(ModelError::invalid(
            format!("joint `{}`", pairs[i].0.name),
            "not on any end-effector chain",
        ));
    }
    arms.sort_by_key(|a| a.side);
    Ok(arms)
}

const TOY_ARM: &str = include_str!("../models/toy-arm.model");
const MINI_HUMANOID: &str = include_str!("../models/mini-humanoid.model");

pub const BUILTIN_NAMES: &[&str] = &["toy-arm", "mini-humanoid"];

pub fn builtin_source(name: &str) -> Option<&'static str> {
    match name {
        "toy-arm" => Some(TOY_ARM),
        "mini-humanoid" => Some(MINI_HUMANOID),
        _ => None,
    }
}

/// Looks up a model that ships with the crate.
pub fn builtin_model(name: &str) -> Option<RobotModel> {
    builtin_source(name).map(|src| RobotModel::parse(src).expect("builtin model is valid"))
}

pub fn builtin_models() -> Vec<RobotModel> {
    BUILTIN_NAMES.iter().filter_map(|n| builtin_model(n)).collect()
}

/// Resolves a builtin name first, then a file path.
pub fn resolve_model(name_or_path: &str) -> Result<RobotModel, ModelError> {
    match builtin_model(name_or_path) {
        Some(m) => Ok(m),
        None => RobotModel::load(Path::new(name_or_path)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_humanoid_has_two_four_dof_arms() {
        let m = builtin_model("mini-humanoid").unwrap();
        assert_eq!(m.arms.len(), 2);
        assert!(m.arms.iter().all(|a| a.dof() == 4));
        assert_eq!(m.upper_dof_count(), 8);
        assert_eq!(m.lower_dof_count, 4);
        assert_eq!(m.dof(), 12);
        assert_eq!(m.arms[0].side, ArmSide::Left);
        let limits = m.arms[0].torque_limits();
        assert!(limits.windows(2).all(|w| w[0] >= w[1]), "{limits:?}");
    }

    #[test]
    fn toy_arm_is_planar_two_link() {
        let m = builtin_model("toy-arm").unwrap();
        assert_eq!(m.arms.len(), 1);
        let arm = &m.arms[0];
        assert_eq!(arm.dof(), 2);
        for j in &arm.joints {
            assert_eq!(j.axis, Vector3::new(0.0, -1.0, 0.0));
        }
        assert_eq!(arm.joints[1].origin_translation, Vector3::new(0.3, 0.0, 0.0));
        assert_eq!(arm.distal_offset, Vector3::new(0.3, 0.0, 0.0));
    }

    #[test]
    fn unknown_builtin_is_none() {
        assert!(builtin_model("atlas").is_none());
    }

    #[test]
    fn builtin_defaults_strictly_inside_limits() {
        for m in builtin_models() {
            for j in m.joints() {
                let (lo, hi) = j.position_limits;
                assert!(lo < j.default_position && j.default_position < hi, "{}", j.name);
            }
        }
    }

    #[test]
    fn negative_torque_limit_names_joint() {
        let src = builtin_source("toy-arm")
            .unwrap()
            .replacen("torque_limit = 20.0", "torque_limit = -1", 1);
        let err = RobotModel::parse(&src).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, ModelError::Validation { .. }));
        assert!(msg.contains("shoulder") && msg.contains("torque_limit"), "{msg}");
    }

    #[test]
    fn duplicate_joint_name_rejected() {
        let src = builtin_source("toy-arm")
            .unwrap()
            .replacen("name = elbow", "name = shoulder", 1);
        let err = RobotModel::parse(&src).unwrap_err();
        assert!(err.to_string().contains("duplicate joint name"), "{err}");
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let src = builtin_source("toy-arm")
            .unwrap()
            .replacen("[base]\n", "[base]\ncolor = red\n", 1);
        let err = RobotModel::parse(&src).unwrap_err();
        assert!(matches!(err, ModelError::Parse(_)));
        assert!(err.to_string().contains("color"));
    }

    #[test]
    fn non_unit_axis_rejected() {
        let src = builtin_source("toy-arm")
            .unwrap()
            .replacen("axis = 0.0 -1.0 0.0", "axis = 0.0 -1.1 0.0", 1);
        assert!(RobotModel::parse(&src).unwrap_err().to_string().contains("axis"));
    }

    #[test]
    fn distal_before_com_rejected() {
        let src = builtin_source("toy-arm")
            .unwrap()
            .replace("distal_offset = 0.3 0.0 0.0", "distal_offset = 0.1 0.0 0.0");
        let err = RobotModel::parse(&src).unwrap_err();
        assert!(err.to_string().contains("distal"), "{err}");
    }

    #[test]
    fn serialize_round_trips_builtins() {
        for m in builtin_models() {
            let again = RobotModel::parse(&m.serialize()).unwrap();
            assert_eq!(again, m);
        }
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.model");
        std::fs::write(&p, builtin_source("mini-humanoid").unwrap()).unwrap();
        let m = RobotModel::load(&p).unwrap();
        assert_eq!(m.upper_dof_count(), 8);
        assert!(matches!(
            RobotModel::load(&dir.path().join("missing")),
            Err(ModelError::Io { .. })
        ));
    }
}
