//! Synthetic floorplan corpus: guillotine-split layouts on a 32×32 grid and
//! the JSONL dataset format.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{BubbleDiagram, GraphError, RoomType, NUM_ROOM_TYPES};
use crate::metrics::extract_bubble_diagram;

pub const GRID: i32 = 32;
pub const MIN_SIDE: i32 = 3;
pub const WALL: i32 = 1;
pub const MAX_ROOMS: usize = 20;
const MAX_ATTEMPTS: usize = 50;
const SCHEMA_VERSION: u32 = 1;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)` on the 32×32 grid.
/// `x` indexes columns and `y` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Result<Self, SynthError> {
        let r = Rect { x0, y0, x1, y1 };
        if r.is_valid() {
            Ok(r)
        } else {
            Err(SynthError::InvalidRect(r))
        }
    }

    pub fn full() -> Self {
        Rect { x0: 0, y0: 0, x1: GRID, y1: GRID }
    }

    pub fn is_valid(&self) -> bool {
        0 <= self.x0 && self.x0 < self.x1 && self.x1 <= GRID && 0 <= self.y0 && self.y0 < self.y1 && self.y1 <= GRID
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i32 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: i32, y: i32) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }

    pub fn to_array(self) -> [i32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})x[{},{})", self.x0, self.x1, self.y0, self.y1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("cannot tile the canvas with {0} rooms of side >= {MIN_SIDE}")]
    Unsatisfiable(usize),
    #[error("invalid rectangle {0}")]
    InvalidRect(Rect),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: schema version {found}, expected {SCHEMA_VERSION}")]
    SchemaVersionMismatch { line: usize, found: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutSample {
    pub diagram: BubbleDiagram,
    pub rects: Vec<Rect>,
}

impl LayoutSample {
    pub fn num_rooms(&self) -> usize {
        self.diagram.num_rooms()
    }
}

/// Split a rectangle into `m` interior-disjoint rooms separated by walls.
fn guillotine(rng: &mut impl Rng, m: usize) -> Option<Vec<Rect>> {
    let mut rects = vec![Rect::full()];
    let min_split = 2 * MIN_SIDE + WALL;
    while rects.len() < m {
        let splittable: Vec<usize> = (0..rects.len())
            .filter(|&i| rects[i].width() >= min_split || rects[i].height() >= min_split)
            .collect();
        // bigger rooms are split more often, which keeps sizes balanced
        let &idx = splittable
            .choose_weighted(rng, |&i| rects[i].area())
            .ok()?;
        let r = rects[idx];
        let vertical = match (r.width() >= min_split, r.height() >= min_split) {
            (true, true) => rng.random_bool(r.width() as f64 / (r.width() + r.height()) as f64),
            (v, _) => v,
        };
        let (a, b) = if vertical {
            let cut = rng.random_range(r.x0 + MIN_SIDE..=r.x1 - MIN_SIDE - WALL);
            (Rect { x1: cut, ..r }, Rect { x0: cut + WALL, ..r })
        } else {
            let cut = rng.random_range(r.y0 + MIN_SIDE..=r.y1 - MIN_SIDE - WALL);
            (Rect { y1: cut, ..r }, Rect { y0: cut + WALL, ..r })
        };
        rects[idx] = a;
        rects.push(b);
    }
    Some(rects)
}

/// Uniform room types with at most one living room.
pub fn sample_room_types(rng: &mut impl Rng, m: usize) -> Vec<RoomType> {
    let mut has_living = false;
    (0..m)
        .map(|_| {
            let t = if has_living {
                RoomType::ALL[rng.random_range(1..NUM_ROOM_TYPES)]
            } else {
                RoomType::ALL[rng.random_range(0..NUM_ROOM_TYPES)]
            };
            has_living |= t == RoomType::LivingRoom;
            t
        })
        .collect()
}

pub fn sample_floorplan(rng: &mut impl Rng, m: usize) -> Result<LayoutSample, SynthError> {
    if m == 0 || m > MAX_ROOMS {
        return Err(SynthError::Unsatisfiable(m));
    }
    for _ in 0..MAX_ATTEMPTS {
        if let Some(rects) = guillotine(rng, m) {
            let types = sample_room_types(rng, m);
            let diagram = extract_bubble_diagram(&rects, &types);
            return Ok(LayoutSample { diagram, rects });
        }
    }
    Err(SynthError::Unsatisfiable(m))
}

/// Room-count distribution for corpus generation: uniform on `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomCountRange {
    pub min: usize,
    pub max: usize,
}

impl Default for RoomCountRange {
    fn default() -> Self {
        Self { min: 1, max: 16 }
    }
}

pub fn sample_corpus(rng: &mut impl Rng, count: usize, rooms: RoomCountRange) -> Result<Vec<LayoutSample>, SynthError> {
    (0..count)
        .map(|_| {
            let m = rng.random_range(rooms.min..=rooms.max);
            sample_floorplan(rng, m)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Record {
    v: u64,
    rooms: Vec<usize>,
    edges: Vec<[usize; 2]>,
    rects: Vec<[i32; 4]>,
}

impl From<&LayoutSample> for Record {
    fn from(s: &LayoutSample) -> Self {
        Record {
            v: SCHEMA_VERSION as u64,
            rooms: s.diagram.room_types().iter().map(|t| t.id()).collect(),
            edges: s.diagram.edges().iter().map(|&(i, j)| [i, j]).collect(),
            rects: s.rects.iter().map(|r| r.to_array()).collect(),
        }
    }
}

enum RecordError {
    Version(u64),
    Invalid(String),
}

impl From<String> for RecordError {
    fn from(s: String) -> Self {
        RecordError::Invalid(s)
    }
}

fn parse_record(line: &str) -> Result<LayoutSample, RecordError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    match value.get("v").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(RecordError::Version(v)),
        None => return Err(RecordError::Invalid("missing schema version key \"v\"".into())),
    }
    let rec: Record = serde_json::from_value(value).map_err(|e| e.to_string())?;
    let types = rec
        .rooms
        .iter()
        .map(|&id| RoomType::from_id(id).ok_or_else(|| format!("room type id {id} out of range")))
        .collect::<Result<Vec<_>, _>>()?;
    if rec.rects.len() != types.len() {
        return Err(format!("{} rooms but {} rects", types.len(), rec.rects.len()).into());
    }
    let rects = rec
        .rects
        .iter()
        .map(|&[x0, y0, x1, y1]| Rect::new(x0, y0, x1, y1).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let diagram = BubbleDiagram::new(types, rec.edges.iter().map(|&[i, j]| (i, j)))
        .map_err(|e: GraphError| e.to_string())?;
    Ok(LayoutSample { diagram, rects })
}

pub fn write_dataset(samples: &[LayoutSample], path: &Path) -> Result<(), SynthError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, &Record::from(s)).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<LayoutSample>, SynthError> {
    let reader = BufReader::new(File::open(path)?);
    let mut samples = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line) {
            Ok(s) => samples.push(s),
            Err(RecordError::Version(found)) => return Err(SynthError::SchemaVersionMismatch { line: k + 1, found }),
            Err(RecordError::Invalid(reason)) => return Err(SynthError::Parse { line: k + 1, reason }),
        }
    }
    Ok(samples)
}

/// Room-count buckets of the cross-subset evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Bucket {
    R1to3,
    R4to6,
    R7to9,
    R10to12,
    R13Plus,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [Bucket::R1to3, Bucket::R4to6, Bucket::R7to9, Bucket::R10to12, Bucket::R13Plus];

    pub fn of(num_rooms: usize) -> Bucket {
        match num_rooms {
            0..=3 => Bucket::R1to3,
            4..=6 => Bucket::R4to6,
            7..=9 => Bucket::R7to9,
            10..=12 => Bucket::R10to12,
            _ => Bucket::R13Plus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::R1to3 => "1-3",
            Bucket::R4to6 => "4-6",
            Bucket::R7to9 => "7-9",
            Bucket::R10to12 => "10-12",
            Bucket::R13Plus => "13+",
        }
    }

    pub fn contains(self, num_rooms: usize) -> bool {
        num_rooms >= 1 && Bucket::of(num_rooms) == self
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Bucket {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Bucket::ALL
            .into_iter()
            .find(|b| b.label() == s)
            .ok_or_else(|| format!("unknown bucket '{s}' (expected 1-3, 4-6, 7-9, 10-12 or 13+)"))
    }
}

impl From<Bucket> for String {
    fn from(b: Bucket) -> String {
        b.label().to_string()
    }
}

impl TryFrom<String> for Bucket {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub bucket: Bucket,
    pub samples: Vec<LayoutSample>,
}

/// Partition by room count. Empty buckets are omitted.
pub fn bucket_split(samples: &[LayoutSample]) -> BTreeMap<Bucket, DatasetSplit> {
    let mut out: BTreeMap<Bucket, DatasetSplit> = BTreeMap::new();
    for s in samples {
        let b = Bucket::of(s.num_rooms());
        out.entry(b)
            .or_insert_with(|| DatasetSplit { bucket: b, samples: Vec::new() })
            .samples
            .push(s.clone());
    }
    out
}

/// Every sample whose room count is outside `bucket`.
pub fn exclude(samples: &[LayoutSample], bucket: Bucket) -> Vec<LayoutSample> {
    samples.iter().filter(|s| !bucket.contains(s.num_rooms())).cloned().collect()
}

/// Every sample whose room count is inside `bucket`.
pub fn select(samples: &[LayoutSample], bucket: Bucket) -> Vec<LayoutSample> {
    samples.iter().filter(|s| bucket.contains(s.num_rooms())).cloned().collect()
}
