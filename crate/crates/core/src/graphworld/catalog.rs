use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Agent,
    Room,
    Surface,
    Container,
    Object,
    Device,
}

impl EntityKind {
    pub fn grabbable(self) -> bool {
        self == EntityKind::Object
    }

    pub fn openable(self) -> bool {
        self == EntityKind::Container
    }

    pub fn switchable(self) -> bool {
        self == EntityKind::Device
    }

    pub fn supports(self) -> bool {
        matches!(self, EntityKind::Surface | EntityKind::Container)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub kind: EntityKind,
}

const fn entry(name: &'static str, kind: EntityKind) -> CatalogEntry {
    CatalogEntry { name, kind }
}

/// Every entity name any domain may use. Order fixes one-hot positions and vocabulary ids.
pub const CATALOG: &[CatalogEntry] = &[
    entry("agent", EntityKind::Agent),
    entry("kitchen", EntityKind::Room),
    entry("livingroom", EntityKind::Room),
    entry("bedroom", EntityKind::Room),
    entry("bathroom", EntityKind::Room),
    entry("office", EntityKind::Room),
    entry("garage", EntityKind::Room),
    entry("table", EntityKind::Surface),
    entry("counter", EntityKind::Surface),
    entry("desk", EntityKind::Surface),
    entry("shelf", EntityKind::Surface),
    entry("sofa", EntityKind::Surface),
    entry("cabinet", EntityKind::Container),
    entry("fridge", EntityKind::Container),
    entry("drawer", EntityKind::Container),
    entry("box", EntityKind::Container),
    entry("microwave", EntityKind::Container),
    entry("cup", EntityKind::Object),
    entry("apple", EntityKind::Object),
    entry("book", EntityKind::Object),
    entry("plate", EntityKind::Object),
    entry("remote", EntityKind::Object),
    entry("towel", EntityKind::Object),
    entry("phone", EntityKind::Object),
    entry("bottle", EntityKind::Object),
    entry("pen", EntityKind::Object),
    entry("pillow", EntityKind::Object),
    entry("lamp", EntityKind::Device),
    entry("tv", EntityKind::Device),
    entry("radio", EntityKind::Device),
    entry("fan", EntityKind::Device),
];

pub fn catalog_index(name: &str) -> Option<usize> {
    CATALOG.iter().position(|e| e.name == name)
}

pub fn kind_of(name: &str) -> Option<EntityKind> {
    catalog_index(name).map(|i| CATALOG[i].kind)
}

pub fn names_of_kind(kind: EntityKind) -> impl Iterator<Item = &'static str> {
    CATALOG.iter().filter(move |e| e.kind == kind).map(|e| e.name)
}

/// Node feature layout: catalog one-hot ‖ 4 attribute flags ‖ 4 state bits.
pub const ATTRIBUTE_FLAGS: usize = 4;
pub const STATE_BITS: usize = 4;

pub fn feature_width() -> usize {
    CATALOG.len() + ATTRIBUTE_FLAGS + STATE_BITS
}
