//! Scene templates parsed from the `[world]` / `[task <name>]` config
//! sections: object layouts with jitter ranges, named points, the expert's
//! phase plan, and the progress rubric derived from it.

use serde::{Deserialize, Serialize};

use crate::cfg::{Config, Section};
use crate::data::label::{Noun, Skill, SubtaskLabel};
use crate::error::{Error, Result};
use crate::sim::embodiment::EmbodimentSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectClass {
    Block,
    Pen,
    Holder,
    Book,
    Stand,
    Food,
    Plate,
    ContainerWithDoor,
    QuiltAnchor,
}

impl ObjectClass {
    pub fn parse(s: &str) -> Result<ObjectClass> {
        Ok(match s {
            "block" => ObjectClass::Block,
            "pen" => ObjectClass::Pen,
            "holder" => ObjectClass::Holder,
            "book" => ObjectClass::Book,
            "stand" => ObjectClass::Stand,
            "food" => ObjectClass::Food,
            "plate" => ObjectClass::Plate,
            "container_with_door" => ObjectClass::ContainerWithDoor,
            "quilt_anchor" => ObjectClass::QuiltAnchor,
            other => return Err(Error::config(format!("unknown object class `{other}`"))),
        })
    }

    /// Footprint radius used for rendering and support checks.
    pub fn radius(self) -> f64 {
        match self {
            ObjectClass::Block => 0.035,
            ObjectClass::Pen => 0.025,
            ObjectClass::Holder => 0.05,
            ObjectClass::Book => 0.05,
            ObjectClass::Stand => 0.055,
            ObjectClass::Food => 0.035,
            ObjectClass::Plate => 0.06,
            ObjectClass::ContainerWithDoor => 0.12,
            ObjectClass::QuiltAnchor => 0.05,
        }
    }

    /// Code rendered into the class channel, in (0, 1]. Lettered blocks get
    /// distinct codes above the base block code.
    pub fn class_code(self, letter: Option<char>) -> f32 {
        match self {
            ObjectClass::Pen => 0.08,
            ObjectClass::Holder => 0.16,
            ObjectClass::Book => 0.24,
            ObjectClass::Stand => 0.32,
            ObjectClass::Food => 0.40,
            ObjectClass::Plate => 0.48,
            ObjectClass::ContainerWithDoor => 0.56,
            ObjectClass::QuiltAnchor => 0.64,
            ObjectClass::Block => match letter {
                None => 0.72,
                Some(l) => 0.76 + 0.04 * (l as u8 - b'a') as f32,
            },
        }
    }

    /// Whether released objects can come to rest on this class.
    pub fn is_support(self) -> bool {
        matches!(
            self,
            ObjectClass::Holder
                | ObjectClass::Stand
                | ObjectClass::Plate
                | ObjectClass::Block
                | ObjectClass::ContainerWithDoor
        )
    }
}

/// Object template within a scene: base pose plus uniform jitter range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTemplate {
    pub id: String,
    pub class: ObjectClass,
    pub base: (f64, f64),
    pub jitter: f64,
    pub letter: Option<char>,
    pub noun: Noun,
    pub height: f64,
}

/// Skill category a rubric point is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SkillCategory {
    Chassis,
    Torso,
    Arm,
}

impl SkillCategory {
    pub fn name(self) -> &'static str {
        match self {
            SkillCategory::Chassis => "chassis",
            SkillCategory::Torso => "torso",
            SkillCategory::Arm => "arm",
        }
    }

    pub fn parse(s: &str) -> Result<SkillCategory> {
        Ok(match s {
            "chassis" => SkillCategory::Chassis,
            "torso" => SkillCategory::Torso,
            "arm" => SkillCategory::Arm,
            other => return Err(Error::config(format!("unknown skill category `{other}`"))),
        })
    }
}

/// One entry of the expert's phase plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhaseKind {
    /// Reach an object and close the gripper on it.
    Pick { object: String },
    /// Carry the held object to a target object's position and release.
    Place {
        object: String,
        target: String,
        tol: f64,
        /// Rendered with the stack verb when true.
        stacking: bool,
    },
    /// Grab the door handle and swing it open.
    OpenDoor { object: String },
    /// Grab the door handle and swing it shut.
    CloseDoor { object: String },
    /// Drive the chassis to a named point.
    Drive { point: String, tol: f64 },
    /// Move the torso lift to a value.
    TorsoLift { value: f64 },
    /// Move the torso pitch to a value.
    TorsoPitch { value: f64 },
    /// Drive toward a point while holding an object until it is flattened.
    Flatten {
        object: String,
        drive_point: String,
        target_point: String,
    },
    /// Open the gripper wherever it is.
    Release,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub kind: PhaseKind,
    pub label: SubtaskLabel,
    /// None means the phase contributes no rubric point.
    pub score: Option<SkillCategory>,
}

/// World-level constants shared by every scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub bounds: (f64, f64),
    pub dt: f64,
    pub grasp_radius: f64,
    pub grasp_height_tol: f64,
    pub support_radius: f64,
    pub place_tol: f64,
    pub head_grid: usize,
    pub wrist_grid: usize,
    pub wrist_cell: f64,
    pub expert_budget: usize,
    pub stuck_patience: usize,
}

impl WorldParams {
    pub fn from_config(cfg: &Config) -> Result<WorldParams> {
        let w = cfg.require_section("world")?;
        let bounds = w.floats("bounds")?;
        if bounds.len() != 2 {
            return Err(Error::config("[world] bounds needs two fields"));
        }
        Ok(WorldParams {
            bounds: (bounds[0], bounds[1]),
            dt: w.f64_or("dt", 0.1)?,
            grasp_radius: w.f64_or("grasp_radius", 0.12)?,
            grasp_height_tol: w.f64_or("grasp_height_tol", 0.18)?,
            support_radius: w.f64_or("support_radius", 0.09)?,
            place_tol: w.f64_or("place_tol", 0.055)?,
            head_grid: w.usize_or("head_grid", 32)?,
            wrist_grid: w.usize_or("wrist_grid", 16)?,
            wrist_cell: w.f64_or("wrist_cell", 0.025)?,
            expert_budget: w.usize_or("expert_budget", 600)?,
            stuck_patience: w.usize_or("stuck_patience", 150)?,
        })
    }
}

/// A task template: everything needed to reset a world and script its expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub task: String,
    pub embodiment: String,
    pub instruction: String,
    pub max_points: u32,
    pub start: (f64, f64, f64),
    pub objects: Vec<ObjectTemplate>,
    pub points: Vec<(String, (f64, f64))>,
    pub rects: Vec<(String, (f64, f64, f64, f64))>,
    pub plan: Vec<PhaseSpec>,
    pub world: WorldParams,
}

impl SceneSpec {
    pub fn point(&self, name: &str) -> Result<(f64, f64)> {
        self.points
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::config(format!("task {}: unknown point `{name}`", self.task)))
    }

    pub fn object(&self, id: &str) -> Result<&ObjectTemplate> {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .ok_or_else(|| Error::config(format!("task {}: unknown object `{id}`", self.task)))
    }

    pub fn embodiment_spec(&self) -> Result<EmbodimentSpec> {
        EmbodimentSpec::by_id(&self.embodiment)
    }

    /// Scored plan phases in order; these are the rubric milestones.
    pub fn milestones(&self) -> Vec<(usize, SkillCategory)> {
        self.plan
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.score.map(|cat| (i, cat)))
            .collect()
    }

    pub fn from_config(cfg: &Config, task: &str) -> Result<SceneSpec> {
        let world = WorldParams::from_config(cfg)?;
        let section = cfg
            .section(&format!("task {task}"))
            .ok_or_else(|| Error::config(format!("unknown task template `{task}`")))?;
        SceneSpec::from_section(task, section, world)
    }

    /// All task templates in file order.
    pub fn all_tasks(cfg: &Config) -> Result<Vec<SceneSpec>> {
        let world = WorldParams::from_config(cfg)?;
        cfg.sections_with_prefix("task")
            .into_iter()
            .map(|(name, s)| SceneSpec::from_section(name, s, world.clone()))
            .collect()
    }

    fn from_section(task: &str, s: &Section, world: WorldParams) -> Result<SceneSpec> {
        let start_f = s.floats("start")?;
        if start_f.len() != 3 {
            return Err(Error::config(format!("task {task}: start needs x y theta")));
        }
        let mut objects = Vec::new();
        for (id, val) in s.prefixed("object") {
            objects.push(parse_object(task, id, val)?);
        }
        let mut points = Vec::new();
        for (id, val) in s.prefixed("point") {
            let f = parse_floats(task, id, val, 2)?;
            points.push((id.to_string(), (f[0], f[1])));
        }
        let mut rects = Vec::new();
        for (id, val) in s.prefixed("rect") {
            let f = parse_floats(task, id, val, 4)?;
            rects.push((id.to_string(), (f[0], f[1], f[2], f[3])));
        }
        let mut plan = Vec::new();
        let mut idx = 0usize;
        while let Some(val) = s.get(&format!("plan.{idx}")) {
            plan.push(parse_phase(task, val, &objects)?);
            idx += 1;
        }
        if plan.is_empty() {
            return Err(Error::config(format!("task {task}: empty plan")));
        }
        let spec = SceneSpec {
            task: task.to_string(),
            embodiment: s.require("embodiment")?.to_string(),
            instruction: s.require("instruction")?.to_string(),
            max_points: s.usize_or("max_points", 0)? as u32,
            start: (start_f[0], start_f[1], start_f[2]),
            objects,
            points,
            rects,
            plan,
            world,
        };
        let scored = spec.milestones().len() as u32;
        if spec.max_points != scored {
            return Err(Error::config(format!(
                "task {task}: max_points {} != scored plan entries {scored}",
                spec.max_points
            )));
        }
        spec.embodiment_spec()?.validate()?;
        Ok(spec)
    }
}

fn parse_floats(task: &str, key: &str, val: &str, n: usize) -> Result<Vec<f64>> {
    let f: Vec<f64> = val
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::config(format!("task {task} {key}: `{t}` is not a number")))
        })
        .collect::<Result<_>>()?;
    if f.len() != n {
        return Err(Error::config(format!(
            "task {task} {key}: expected {n} numeric fields"
        )));
    }
    Ok(f)
}

fn parse_object(task: &str, id: &str, val: &str) -> Result<ObjectTemplate> {
    let toks: Vec<&str> = val.split_whitespace().collect();
    if toks.len() < 4 {
        return Err(Error::config(format!(
            "task {task} object.{id}: need `class x y jitter [letter L] [noun N] [height H]`"
        )));
    }
    let class = ObjectClass::parse(toks[0])?;
    let nums: Vec<f64> = toks[1..4]
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::config(format!("task {task} object.{id}: bad number `{t}`")))
        })
        .collect::<Result<_>>()?;
    let mut letter = None;
    let mut noun = None;
    let mut height = 0.0;
    let mut rest = toks[4..].iter();
    while let Some(tok) = rest.next() {
        let arg = rest
            .next()
            .ok_or_else(|| Error::config(format!("task {task} object.{id}: `{tok}` needs a value")))?;
        match *tok {
            "letter" => {
                let ch = arg.chars().next().unwrap_or(' ');
                letter = Some(ch);
            }
            "noun" => noun = Some(Noun::parse(arg)?),
            "height" => {
                height = arg
                    .parse()
                    .map_err(|_| Error::config(format!("task {task} object.{id}: bad height")))?
            }
            other => {
                return Err(Error::config(format!(
                    "task {task} object.{id}: unknown attribute `{other}`"
                )))
            }
        }
    }
    if class == ObjectClass::ContainerWithDoor && noun.is_none() {
        noun = Some(Noun::Microwave);
    }
    let noun = match noun {
        Some(n) => n,
        None => match class {
            ObjectClass::Block => match letter {
                Some(l) => Noun::block_for_letter(l)?,
                None => Noun::Block,
            },
            ObjectClass::Pen => Noun::Pen,
            ObjectClass::Book => Noun::Book,
            ObjectClass::Holder => Noun::Holder,
            ObjectClass::Stand => Noun::Stand,
            ObjectClass::Food => Noun::Food,
            ObjectClass::Plate => Noun::Plate,
            ObjectClass::QuiltAnchor => Noun::Quilt,
            ObjectClass::ContainerWithDoor => Noun::Microwave,
        },
    };
    Ok(ObjectTemplate {
        id: id.to_string(),
        class,
        base: (nums[0], nums[1]),
        jitter: nums[2],
        letter,
        noun,
        height,
    })
}

fn parse_phase(task: &str, val: &str, objects: &[ObjectTemplate]) -> Result<PhaseSpec> {
    let toks: Vec<&str> = val.split_whitespace().collect();
    if toks.is_empty() {
        return Err(Error::config(format!("task {task}: empty plan entry")));
    }
    let noun_of = |id: &str| -> Result<Noun> {
        objects
            .iter()
            .find(|o| o.id == id)
            .map(|o| o.noun)
            .ok_or_else(|| Error::config(format!("task {task}: plan references unknown object `{id}`")))
    };
    // Defaults per verb; trailing `label S N`, `score C`, `noscore`, `tol F`
    // override them.
    let mut i = 0usize;
    let verb = toks[i];
    i += 1;
    let mut need = |what: &str| -> Result<String> {
        let t = toks
            .get(i)
            .ok_or_else(|| Error::config(format!("task {task}: `{verb}` needs {what}")))?;
        i += 1;
        Ok(t.to_string())
    };
    let (kind, mut label, mut score): (PhaseKind, SubtaskLabel, Option<SkillCategory>) = match verb {
        "pick" => {
            let object = need("an object")?;
            let label = SubtaskLabel::new(Skill::Pick, noun_of(&object)?);
            (PhaseKind::Pick { object }, label, Some(SkillCategory::Arm))
        }
        "place" | "stack" => {
            let object = need("an object")?;
            let target = need("a target")?;
            let stacking = verb == "stack";
            let skill = if stacking { Skill::Stack } else { Skill::Place };
            let label = SubtaskLabel::new(skill, noun_of(&object)?);
            (
                PhaseKind::Place {
                    object,
                    target,
                    tol: 0.0, // patched below via `tol` or world default at build time
                    stacking,
                },
                label,
                Some(SkillCategory::Arm),
            )
        }
        "open_door" => {
            let object = need("an object")?;
            let label = SubtaskLabel::new(Skill::Open, noun_of(&object)?);
            (PhaseKind::OpenDoor { object }, label, Some(SkillCategory::Arm))
        }
        "close_door" => {
            let object = need("an object")?;
            let label = SubtaskLabel::new(Skill::Close, noun_of(&object)?);
            (PhaseKind::CloseDoor { object }, label, Some(SkillCategory::Arm))
        }
        "drive" => {
            let point = need("a point")?;
            let tol = need("a tolerance")?
                .parse::<f64>()
                .map_err(|_| Error::config(format!("task {task}: drive tolerance must be numeric")))?;
            (
                PhaseKind::Drive { point, tol },
                SubtaskLabel::new(Skill::MoveTo, Noun::Bed),
                Some(SkillCategory::Chassis),
            )
        }
        "torso_lift" => {
            let value = need("a value")?
                .parse::<f64>()
                .map_err(|_| Error::config(format!("task {task}: torso_lift value must be numeric")))?;
            (
                PhaseKind::TorsoLift { value },
                SubtaskLabel::new(Skill::LiftTorso, Noun::Quilt),
                Some(SkillCategory::Torso),
            )
        }
        "torso_pitch" => {
            let value = need("a value")?
                .parse::<f64>()
                .map_err(|_| Error::config(format!("task {task}: torso_pitch value must be numeric")))?;
            (
                PhaseKind::TorsoPitch { value },
                SubtaskLabel::new(Skill::LeanBack, Noun::Quilt),
                Some(SkillCategory::Torso),
            )
        }
        "flatten" => {
            let object = need("an object")?;
            let drive_point = need("a drive point")?;
            let target_point = need("a target point")?;
            let label = SubtaskLabel::new(Skill::Flatten, noun_of(&object)?);
            (
                PhaseKind::Flatten {
                    object,
                    drive_point,
                    target_point,
                },
                label,
                Some(SkillCategory::Chassis),
            )
        }
        "release" => (
            PhaseKind::Release,
            SubtaskLabel::new(Skill::Flatten, Noun::Quilt),
            None,
        ),
        other => return Err(Error::config(format!("task {task}: unknown plan verb `{other}`"))),
    };
    let mut kind = kind;
    while i < toks.len() {
        match toks[i] {
            "label" => {
                let skill = Skill::parse(
                    toks.get(i + 1)
                        .ok_or_else(|| Error::config(format!("task {task}: label needs skill noun")))?,
                )?;
                let noun = Noun::parse(
                    toks.get(i + 2)
                        .ok_or_else(|| Error::config(format!("task {task}: label needs skill noun")))?,
                )?;
                label = SubtaskLabel::new(skill, noun);
                i += 3;
            }
            "score" => {
                score = Some(SkillCategory::parse(toks.get(i + 1).ok_or_else(|| {
                    Error::config(format!("task {task}: score needs a category"))
                })?)?);
                i += 2;
            }
            "noscore" => {
                score = None;
                i += 1;
            }
            "tol" => {
                let t: f64 = toks
                    .get(i + 1)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::config(format!("task {task}: tol needs a number")))?;
                if let PhaseKind::Place { tol, .. } = &mut kind {
                    *tol = t;
                }
                i += 2;
            }
            other => {
                return Err(Error::config(format!(
                    "task {task}: unknown plan attribute `{other}`"
                )))
            }
        }
    }
    Ok(PhaseSpec { kind, label, score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::Config;

    #[test]
    fn default_tasks_parse() {
        let cfg = Config::default_config();
        let tasks = SceneSpec::all_tasks(&cfg).unwrap();
        assert_eq!(tasks.len(), 6);
        let tb = tasks.iter().find(|t| t.task == "table_bussing").unwrap();
        assert_eq!(tb.max_points, 6);
        assert_eq!(tb.plan.len(), 6);
        let mw = tasks.iter().find(|t| t.task == "microwave").unwrap();
        assert_eq!(mw.max_points, 5);
        let bm = tasks.iter().find(|t| t.task == "bed_making").unwrap();
        assert_eq!(bm.max_points, 4);
        let bs = tasks.iter().find(|t| t.task == "blocks_stacking").unwrap();
        assert_eq!(bs.max_points, 6);
        assert_eq!(bs.objects.len(), 6);
    }

    #[test]
    fn unknown_task_is_config_error() {
        let cfg = Config::default_config();
        assert!(SceneSpec::from_config(&cfg, "juggling").is_err());
    }

    #[test]
    fn milestone_categories_cover_bed_making() {
        let cfg = Config::default_config();
        let bm = SceneSpec::from_config(&cfg, "bed_making").unwrap();
        let cats: Vec<SkillCategory> = bm.milestones().iter().map(|(_, c)| *c).collect();
        assert_eq!(
            cats,
            vec![
                SkillCategory::Chassis,
                SkillCategory::Arm,
                SkillCategory::Torso,
                SkillCategory::Chassis
            ]
        );
    }
}
