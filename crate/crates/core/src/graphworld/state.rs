use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::catalog::{catalog_index, feature_width, kind_of, EntityKind, CATALOG};
use crate::error::{Result, TmowError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Inside,
    On,
    In,
    Close,
    Holds,
    Is,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Inside,
        Relation::On,
        Relation::In,
        Relation::Close,
        Relation::Holds,
        Relation::Is,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Inside => "inside",
            Relation::On => "on",
            Relation::In => "in",
            Relation::Close => "close",
            Relation::Holds => "holds",
            Relation::Is => "is",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }

    /// Spatial relations become edges; `is` describes node state.
    pub fn is_spatial(self) -> bool {
        self != Relation::Is
    }
}

pub const STATE_WORDS: [&str; 4] = ["open", "closed", "switched_on", "switched_off"];

/// A relational triple `(subject, relation, object)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple(pub String, pub Relation, pub String);

impl Triple {
    pub fn new(s: &str, r: Relation, o: &str) -> Self {
        Triple(s.to_string(), r, o.to_string())
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.0, self.1.name(), self.2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Walk,
    Grab,
    Open,
    Put,
    PutIn,
    Switch,
}

impl Verb {
    pub const ALL: [Verb; 6] = [
        Verb::Walk,
        Verb::Grab,
        Verb::Open,
        Verb::Put,
        Verb::PutIn,
        Verb::Switch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verb::Walk => "walk",
            Verb::Grab => "grab",
            Verb::Open => "open",
            Verb::Put => "put",
            Verb::PutIn => "putin",
            Verb::Switch => "switch",
        }
    }
}

/// A primitive action: a verb applied to one entity, written `verb(target)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Action {
    pub verb: Verb,
    pub target: String,
}

impl Action {
    pub fn new(verb: Verb, target: &str) -> Self {
        Self {
            verb,
            target: target.to_string(),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.verb.name(), self.target)
    }
}

impl FromStr for Action {
    type Err = TmowError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || TmowError::Parse(format!("malformed action {s:?}; expected verb(target)"));
        let (verb, rest) = s.trim().split_once('(').ok_or_else(bad)?;
        let target = rest.strip_suffix(')').ok_or_else(bad)?;
        let verb = Verb::ALL
            .into_iter()
            .find(|v| v.name() == verb)
            .ok_or_else(|| TmowError::Parse(format!("unknown verb {verb:?} in {s:?}")))?;
        if catalog_index(target).is_none() {
            return Err(TmowError::Parse(format!("unknown entity {target:?} in {s:?}")));
        }
        Ok(Action::new(verb, target))
    }
}

impl Serialize for Action {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Support {
    pub relation: Relation,
    pub holder: usize,
}

/// Full symbolic state of one domain. Entity 0 is always the agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WorldState {
    names: Vec<String>,
    kinds: Vec<EntityKind>,
    room_of: Vec<Option<usize>>,
    support: Vec<Option<Support>>,
    open: Vec<bool>,
    powered: Vec<bool>,
    held: Option<usize>,
    close: BTreeSet<usize>,
}

/// Result of applying one action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub state: WorldState,
    /// The action was well formed but its preconditions failed; the state is unchanged.
    pub noop: bool,
}

impl WorldState {
    /// Empty layout over the given entity names; the agent must come first.
    pub fn new(names: &[String]) -> Result<Self> {
        let mut kinds = Vec::with_capacity(names.len());
        let mut seen = BTreeSet::new();
        for n in names {
            let k = kind_of(n)
                .ok_or_else(|| TmowError::Config(format!("entity {n:?} not in catalog")))?;
            if !seen.insert(n.as_str()) {
                return Err(TmowError::Config(format!("duplicate entity {n:?}")));
            }
            kinds.push(k);
        }
        if kinds.first() != Some(&EntityKind::Agent) {
            return Err(TmowError::Config("entity list must start with the agent".into()));
        }
        let n = names.len();
        Ok(Self {
            names: names.to_vec(),
            kinds,
            room_of: vec![None; n],
            support: vec![None; n],
            open: vec![false; n],
            powered: vec![false; n],
            held: None,
            close: BTreeSet::new(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kinds(&self) -> &[EntityKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn agent_room(&self) -> Option<usize> {
        self.room_of[0]
    }

    pub fn room_of(&self, e: usize) -> Option<usize> {
        self.room_of[e]
    }

    pub fn support_of(&self, e: usize) -> Option<Support> {
        self.support[e]
    }

    pub fn is_open(&self, e: usize) -> bool {
        self.open[e]
    }

    pub fn is_powered(&self, e: usize) -> bool {
        self.powered[e]
    }

    pub fn held(&self) -> Option<usize> {
        self.held
    }

    pub fn is_close(&self, e: usize) -> bool {
        self.close.contains(&e)
    }

    pub(crate) fn place_in_room(&mut self, e: usize, room: usize) {
        self.room_of[e] = Some(room);
    }

    pub(crate) fn place_on(&mut self, e: usize, relation: Relation, holder: usize) {
        self.support[e] = Some(Support { relation, holder });
        self.room_of[e] = self.room_of[holder];
    }

    pub(crate) fn set_open(&mut self, e: usize, open: bool) {
        self.open[e] = open;
    }

    pub(crate) fn set_powered(&mut self, e: usize, on: bool) {
        self.powered[e] = on;
    }

    /// True if the entity sits inside a closed container.
    pub fn is_enclosed(&self, e: usize) -> bool {
        matches!(self.support[e], Some(Support { relation: Relation::In, holder }) if !self.open[holder])
    }

    /// Applies the transition rules. Inapplicable actions leave the state unchanged.
    pub fn step(&self, action: &Action) -> StepOutcome {
        match self.apply(action) {
            Some(state) => StepOutcome { state, noop: false },
            None => StepOutcome {
                state: self.clone(),
                noop: true,
            },
        }
    }

    fn apply(&self, action: &Action) -> Option<WorldState> {
        let x = self.index(&action.target)?;
        let kind = self.kinds[x];
        let mut next = self.clone();
        match action.verb {
            Verb::Walk => {
                if kind == EntityKind::Room {
                    next.room_of[0] = Some(x);
                    next.close.clear();
                } else {
                    if kind == EntityKind::Agent || self.held == Some(x) {
                        return None;
                    }
                    if self.room_of[x].is_none() || self.room_of[x] != self.room_of[0] {
                        return None;
                    }
                    next.close.clear();
                    next.close.insert(x);
                    if let Some(s) = self.support[x] {
                        next.close.insert(s.holder);
                    }
                }
            }
            Verb::Grab => {
                if !kind.grabbable() || self.held.is_some() || !self.close.contains(&x) {
                    return None;
                }
                if self.is_enclosed(x) {
                    return None;
                }
                next.held = Some(x);
                next.room_of[x] = None;
                next.support[x] = None;
            }
            Verb::Open => {
                if !kind.openable() || self.open[x] || !self.close.contains(&x) {
                    return None;
                }
                next.open[x] = true;
            }
            Verb::Put | Verb::PutIn => {
                let wanted = if action.verb == Verb::Put {
                    EntityKind::Surface
                } else {
                    EntityKind::Container
                };
                let h = self.held?;
                if kind != wanted || !self.close.contains(&x) {
                    return None;
                }
                if kind == EntityKind::Container && !self.open[x] {
                    return None;
                }
                let relation = if kind == EntityKind::Surface {
                    Relation::On
                } else {
                    Relation::In
                };
                next.held = None;
                next.place_on(h, relation, x);
            }
            Verb::Switch => {
                if !kind.switchable() || !self.close.contains(&x) {
                    return None;
                }
                next.powered[x] = !self.powered[x];
            }
        }
        Some(next)
    }

    /// The state as a sorted set of relational triples.
    pub fn triples(&self) -> BTreeSet<Triple> {
        let mut out = BTreeSet::new();
        let name = |i: usize| self.names[i].as_str();
        for e in 0..self.len() {
            if let Some(r) = self.room_of[e] {
                out.insert(Triple::new(name(e), Relation::Inside, name(r)));
            }
            if let Some(s) = self.support[e] {
                out.insert(Triple::new(name(e), s.relation, name(s.holder)));
            }
            match self.kinds[e] {
                EntityKind::Container => {
                    let w = if self.open[e] { "open" } else { "closed" };
                    out.insert(Triple::new(name(e), Relation::Is, w));
                }
                EntityKind::Device => {
                    let w = if self.powered[e] {
                        "switched_on"
                    } else {
                        "switched_off"
                    };
                    out.insert(Triple::new(name(e), Relation::Is, w));
                }
                _ => {}
            }
        }
        for &c in &self.close {
            out.insert(Triple::new(name(0), Relation::Close, name(c)));
        }
        if let Some(h) = self.held {
            out.insert(Triple::new(name(0), Relation::Holds, name(h)));
        }
        out
    }

    /// Rebuilds a state from its entity list and triples (inverse of [`Self::triples`]).
    pub fn from_triples<'a>(
        names: &[String],
        triples: impl IntoIterator<Item = &'a Triple>,
    ) -> Result<Self> {
        let mut s = Self::new(names)?;
        let idx = |n: &str| {
            names
                .iter()
                .position(|e| e == n)
                .ok_or_else(|| TmowError::Input(format!("triple references unknown entity {n:?}")))
        };
        let mut supports = Vec::new();
        for t in triples {
            let a = idx(&t.0)?;
            match t.1 {
                Relation::Inside => s.room_of[a] = Some(idx(&t.2)?),
                Relation::On | Relation::In => supports.push((a, t.1, idx(&t.2)?)),
                Relation::Close => {
                    s.close.insert(idx(&t.2)?);
                }
                Relation::Holds => s.held = Some(idx(&t.2)?),
                Relation::Is => match t.2.as_str() {
                    "open" => s.open[a] = true,
                    "closed" => s.open[a] = false,
                    "switched_on" => s.powered[a] = true,
                    "switched_off" => s.powered[a] = false,
                    other => return Err(TmowError::Input(format!("unknown state word {other:?}"))),
                },
            }
        }
        for (a, relation, holder) in supports {
            s.support[a] = Some(Support { relation, holder });
        }
        Ok(s)
    }

    /// True iff every goal triple holds. Goals naming unknown entities are configuration errors.
    pub fn satisfies(&self, goal: &[Triple]) -> Result<bool> {
        for t in goal {
            if self.index(&t.0).is_none() {
                return Err(TmowError::Config(format!("goal references unknown entity {:?}", t.0)));
            }
            if !STATE_WORDS.contains(&t.2.as_str()) && self.index(&t.2).is_none() {
                return Err(TmowError::Config(format!("goal references unknown entity {:?}", t.2)));
            }
        }
        let triples = self.triples();
        Ok(goal.iter().all(|t| triples.contains(t)))
    }

    /// Renders the graph view used by the router.
    pub fn observe(&self, weights: &RelationWeights) -> ObservationGraph {
        let n = self.len();
        let d = feature_width();
        let mut features = vec![0.0; n * d];
        for e in 0..n {
            let row = &mut features[e * d..(e + 1) * d];
            let ci = catalog_index(&self.names[e]).expect("validated at construction");
            row[ci] = 1.0;
            let k = self.kinds[e];
            let base = CATALOG.len();
            row[base] = f64::from(u8::from(k.grabbable()));
            row[base + 1] = f64::from(u8::from(k.openable()));
            row[base + 2] = f64::from(u8::from(k.switchable()));
            row[base + 3] = f64::from(u8::from(k.supports()));
            let sb = base + 4;
            row[sb] = f64::from(u8::from(self.open[e]));
            row[sb + 1] = f64::from(u8::from(self.powered[e]));
            row[sb + 2] = f64::from(u8::from(self.held == Some(e)));
            row[sb + 3] = f64::from(u8::from(self.close.contains(&e)));
        }
        let mut adjacency = vec![0.0; n * n];
        let mut relation = vec![0.0; n * n];
        for i in 0..n {
            relation[i * n + i] = weights.self_loop;
        }
        for t in self.triples() {
            if !t.1.is_spatial() {
                continue;
            }
            let (Some(a), Some(b)) = (self.index(&t.0), self.index(&t.2)) else {
                continue;
            };
            let w = weights.weight(t.1);
            for (i, j) in [(a, b), (b, a)] {
                adjacency[i * n + j] = 1.0;
                relation[i * n + j] = relation[i * n + j].max(w);
            }
        }
        ObservationGraph {
            n,
            feature_width: d,
            features,
            adjacency,
            relation,
            labels: self.names.clone(),
        }
    }
}

/// Per-relation edge weights for the relation mask `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelationWeights {
    pub inside: f64,
    pub on: f64,
    #[serde(rename = "in")]
    pub in_: f64,
    pub close: f64,
    pub holds: f64,
    pub self_loop: f64,
}

impl Default for RelationWeights {
    fn default() -> Self {
        Self {
            inside: 1.0,
            on: 1.0,
            in_: 1.0,
            close: 1.0,
            holds: 1.0,
            self_loop: 1.0,
        }
    }
}

impl RelationWeights {
    pub fn weight(&self, r: Relation) -> f64 {
        match r {
            Relation::Inside => self.inside,
            Relation::On => self.on,
            Relation::In => self.in_,
            Relation::Close => self.close,
            Relation::Holds => self.holds,
            Relation::Is => 0.0,
        }
    }
}

/// Node features `V`, binary symmetric adjacency `A`, relation mask `R` and node labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationGraph {
    pub n: usize,
    pub feature_width: usize,
    /// n × feature_width, row-major.
    pub features: Vec<f64>,
    /// n × n, zero diagonal.
    pub adjacency: Vec<f64>,
    /// n × n, positive only on edges and the diagonal.
    pub relation: Vec<f64>,
    pub labels: Vec<String>,
}

impl ObservationGraph {
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if self.features.len() != n * self.feature_width
            || self.adjacency.len() != n * n
            || self.relation.len() != n * n
            || self.labels.len() != n
        {
            return Err(TmowError::Contract("observation graph buffers disagree with n".into()));
        }
        for i in 0..n {
            if self.adjacency[i * n + i] != 0.0 {
                return Err(TmowError::Contract(format!("adjacency diagonal set at {i}")));
            }
            for j in 0..n {
                let a = self.adjacency[i * n + j];
                if a != self.adjacency[j * n + i] || (a != 0.0 && a != 1.0) {
                    return Err(TmowError::Contract(format!("adjacency not symmetric binary at ({i},{j})")));
                }
                let r = self.relation[i * n + j];
                if !(0.0..=1.0).contains(&r) {
                    return Err(TmowError::Contract(format!("relation mask out of [0,1] at ({i},{j})")));
                }
                if r > 0.0 && a == 0.0 && i != j {
                    return Err(TmowError::Contract(format!("relation mask set off-edge at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    /// Same graph with nodes reordered so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> ObservationGraph {
        let n = self.n;
        let d = self.feature_width;
        let mut g = self.clone();
        for (k, &old) in perm.iter().enumerate() {
            g.features[k * d..(k + 1) * d].copy_from_slice(&self.features[old * d..(old + 1) * d]);
            g.labels[k] = self.labels[old].clone();
            for (m, &old2) in perm.iter().enumerate() {
                g.adjacency[k * n + m] = self.adjacency[old * n + old2];
                g.relation[k * n + m] = self.relation[old * n + old2];
            }
        }
        g
    }
}
