use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{kind_of, EntityKind};
use super::state::{Relation, Triple, WorldState};
use crate::error::{Result, TmowError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskCategory {
    Fetch,
    Relocate,
    OpenPlace,
    MultiStep,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 4] = [
        TaskCategory::Fetch,
        TaskCategory::Relocate,
        TaskCategory::OpenPlace,
        TaskCategory::MultiStep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskCategory::Fetch => "fetch",
            TaskCategory::Relocate => "relocate",
            TaskCategory::OpenPlace => "open-place",
            TaskCategory::MultiStep => "multi-step",
        }
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskCategory {
    type Err = TmowError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| TmowError::Config(format!("unknown task category {s:?}")))
    }
}

/// Room pair and furniture pools of one scene category.
struct SceneTemplate {
    rooms: [&'static str; 2],
    surfaces: [&'static [&'static str]; 2],
    containers: [&'static [&'static str]; 2],
    objects: &'static [&'static str],
    devices: &'static [&'static str],
}

const SCENES: [SceneTemplate; 6] = [
    SceneTemplate {
        rooms: ["kitchen", "livingroom"],
        surfaces: [&["counter", "table"], &["sofa", "shelf"]],
        containers: [&["fridge", "microwave"], &["box", "cabinet"]],
        objects: &["cup", "apple", "plate", "bottle", "remote", "book"],
        devices: &["tv", "lamp"],
    },
    SceneTemplate {
        rooms: ["bedroom", "office"],
        surfaces: [&["shelf", "sofa"], &["desk", "table"]],
        containers: [&["drawer", "box"], &["cabinet", "drawer"]],
        objects: &["book", "pillow", "pen", "phone", "cup", "towel"],
        devices: &["lamp", "radio"],
    },
    SceneTemplate {
        rooms: ["bathroom", "garage"],
        surfaces: [&["counter", "shelf"], &["table", "shelf"]],
        containers: [&["cabinet", "box"], &["box", "drawer"]],
        objects: &["towel", "bottle", "phone", "pen", "apple", "plate"],
        devices: &["fan", "radio"],
    },
    SceneTemplate {
        rooms: ["kitchen", "bedroom"],
        surfaces: [&["table", "counter"], &["desk", "sofa"]],
        containers: [&["cabinet", "microwave"], &["drawer", "box"]],
        objects: &["apple", "cup", "pillow", "book", "remote", "bottle"],
        devices: &["fan", "tv"],
    },
    SceneTemplate {
        rooms: ["livingroom", "office"],
        surfaces: [&["sofa", "table"], &["desk", "shelf"]],
        containers: [&["box", "cabinet"], &["drawer", "cabinet"]],
        objects: &["remote", "phone", "pen", "plate", "pillow", "cup"],
        devices: &["tv", "lamp"],
    },
    SceneTemplate {
        rooms: ["garage", "kitchen"],
        surfaces: [&["shelf", "table"], &["counter", "desk"]],
        containers: [&["box", "drawer"], &["fridge", "cabinet"]],
        objects: &["bottle", "towel", "apple", "book", "plate", "pen"],
        devices: &["radio", "fan"],
    },
];

pub const SCENE_CATEGORIES: usize = SCENES.len();
pub const OBJECTS_PER_SCENE: usize = 4;

/// One (task, scene) combination with a fixed entity catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub scene_seed: u64,
    pub scene_category: usize,
    pub task_category: TaskCategory,
    /// Entity names, agent first; unique within the domain.
    pub entities: Vec<String>,
    /// Room assignment for every non-room entity except the agent, as (entity, room).
    pub layout: Vec<(String, String)>,
    pub relations: Vec<Relation>,
}

/// Instruction token sequence. `domain_id` is provenance metadata only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_id: Option<String>,
}

impl Instruction {
    pub fn new(tokens: &[&str]) -> Self {
        Self {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            domain_id: None,
        }
    }
}

/// A sampled task instance: instruction, goal triples and initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub domain_id: String,
    pub instruction: Instruction,
    pub goal: Vec<Triple>,
    pub initial: WorldState,
}

fn scene_seed(run_seed: u64, scene_category: usize) -> u64 {
    run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((scene_category as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

pub fn domain_id(scene_category: usize, task: TaskCategory) -> String {
    format!("s{scene_category}-{task}")
}

/// Builds the domain for `(task, scene)` under run seed `seed`.
/// All tasks of one scene category share the scene layout within a run.
pub fn generate_domain(seed: u64, task: TaskCategory, scene_category: usize) -> Result<DomainSpec> {
    if scene_category >= SCENE_CATEGORIES {
        return Err(TmowError::Config(format!(
            "unknown scene category {scene_category} (have {SCENE_CATEGORIES})"
        )));
    }
    let mut spec = generate_scene(scene_seed(seed, scene_category), scene_category)?;
    spec.task_category = task;
    spec.domain_id = domain_id(scene_category, task);
    Ok(spec)
}

/// Scene layout for a raw scene seed; the task defaults to fetch.
pub fn generate_scene(scene_seed: u64, scene_category: usize) -> Result<DomainSpec> {
    let template = SCENES
        .get(scene_category)
        .ok_or_else(|| TmowError::Config(format!("unknown scene category {scene_category}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let mut entities = vec!["agent".to_string()];
    let mut layout = Vec::new();
    for r in template.rooms {
        entities.push(r.to_string());
    }
    for (ri, room) in template.rooms.iter().enumerate() {
        for pool in [template.surfaces[ri], template.containers[ri]] {
            let choices: Vec<&str> = pool
                .iter()
                .copied()
                .filter(|n| !entities.iter().any(|e| e == n))
                .collect();
            let pick = choices
                .choose(&mut rng)
                .ok_or_else(|| TmowError::Generation(format!("furniture pool exhausted in {room}")))?;
            entities.push(pick.to_string());
            layout.push((pick.to_string(), room.to_string()));
        }
    }
    let mut objects: Vec<&str> = template.objects.to_vec();
    objects.shuffle(&mut rng);
    for o in objects.into_iter().take(OBJECTS_PER_SCENE) {
        entities.push(o.to_string());
    }
    let device = template.devices.choose(&mut rng).expect("nonempty pool");
    let device_room = template.rooms[rng.random_range(0..2)];
    entities.push(device.to_string());
    layout.push((device.to_string(), device_room.to_string()));
    Ok(DomainSpec {
        domain_id: format!("scene{scene_category}"),
        scene_seed,
        scene_category,
        task_category: TaskCategory::Fetch,
        entities,
        layout,
        relations: Relation::ALL.to_vec(),
    })
}

impl DomainSpec {
    fn of_kind(&self, kind: EntityKind) -> Vec<&str> {
        self.entities
            .iter()
            .filter(|e| kind_of(e) == Some(kind))
            .map(String::as_str)
            .collect()
    }

    pub fn rooms(&self) -> Vec<&str> {
        self.of_kind(EntityKind::Room)
    }

    pub fn objects(&self) -> Vec<&str> {
        self.of_kind(EntityKind::Object)
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.of_kind(EntityKind::Surface)
    }

    pub fn containers(&self) -> Vec<&str> {
        self.of_kind(EntityKind::Container)
    }

    pub fn devices(&self) -> Vec<&str> {
        self.of_kind(EntityKind::Device)
    }

    /// Samples an instruction and a randomized initial state.
    pub fn sample_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Episode> {
        let mut state = WorldState::new(&self.entities)?;
        let entities = &self.entities;
        let idx = |n: &str| {
            entities
                .iter()
                .position(|e| e == n)
                .expect("entity of this domain")
        };
        let rooms = self.rooms();
        let agent_room = idx(rooms.choose(rng).expect("two rooms"));
        state.place_in_room(0, agent_room);
        for (e, r) in &self.layout {
            let (e, r) = (idx(e), idx(r));
            state.place_in_room(e, r);
        }
        let containers = self.containers();
        for c in &containers {
            let open = rng.random_bool(0.5);
            state.set_open(idx(c), open);
        }
        let holders: Vec<&str> = self
            .surfaces()
            .into_iter()
            .chain(containers.iter().copied())
            .collect();
        for o in self.objects() {
            let h = *holders.choose(rng).expect("holders exist");
            let rel = if kind_of(h) == Some(EntityKind::Surface) {
                Relation::On
            } else {
                Relation::In
            };
            let (oi, hi) = (idx(o), idx(h));
            state.place_on(oi, rel, hi);
        }

        let objects = self.objects();
        let target = *objects.choose(rng).expect("objects exist");
        let ti = idx(target);
        let (tokens, goal): (Vec<&str>, Vec<Triple>) = match self.task_category {
            TaskCategory::Fetch => (
                vec!["fetch", target],
                vec![Triple::new("agent", Relation::Holds, target)],
            ),
            TaskCategory::Relocate => {
                let current = state.support_of(ti).map(|s| s.holder);
                let options: Vec<&str> = self
                    .surfaces()
                    .into_iter()
                    .filter(|s| Some(idx(s)) != current)
                    .collect();
                let dest = *options.choose(rng).expect("two surfaces");
                (
                    vec!["put", target, "on", dest],
                    vec![Triple::new(target, Relation::On, dest)],
                )
            }
            TaskCategory::OpenPlace | TaskCategory::MultiStep => {
                let current = state.support_of(ti).map(|s| s.holder);
                let options: Vec<&str> = containers
                    .iter()
                    .copied()
                    .filter(|c| Some(idx(c)) != current)
                    .collect();
                let dest = *options.choose(rng).expect("two containers");
                state.set_open(idx(dest), false);
                let mut goal = vec![Triple::new(target, Relation::In, dest)];
                let mut tokens = vec!["place", target, "in", dest];
                if self.task_category == TaskCategory::MultiStep {
                    let device = self.devices()[0];
                    state.set_powered(idx(device), false);
                    tokens.extend(["then", "switch", device]);
                    goal.push(Triple::new(device, Relation::Is, "switched_on"));
                }
                (tokens, goal)
            }
        };
        let mut instruction = Instruction::new(&tokens);
        instruction.domain_id = Some(self.domain_id.clone());
        Ok(Episode {
            domain_id: self.domain_id.clone(),
            instruction,
            goal,
            initial: state,
        })
    }
}

/// Ordered seen and unseen (scene, task) pairs.
pub fn default_seen_domains() -> Vec<(usize, TaskCategory)> {
    let mut out = Vec::new();
    for scene in 0..4 {
        for task in [TaskCategory::Fetch, TaskCategory::Relocate, TaskCategory::OpenPlace] {
            out.push((scene, task));
        }
    }
    out
}

pub fn default_unseen_domains() -> Vec<(usize, TaskCategory)> {
    vec![
        (4, TaskCategory::Fetch),
        (4, TaskCategory::Relocate),
        (5, TaskCategory::OpenPlace),
        (5, TaskCategory::Fetch),
        (0, TaskCategory::MultiStep),
        (1, TaskCategory::MultiStep),
    ]
}
