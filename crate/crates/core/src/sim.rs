//! Layered 2D tabletop world.
//!
//! Objects are rigid polygons resting on a `W x H` cell grid. Where footprints
//! overlap, the object later in `stack_order` lies on top. There is no
//! physics: pushes translate whatever the swept corridor touches, grasps
//! succeed or fail by a fixed geometric rule.
//!
//! Continuous coordinates run over `[0, W) x [0, H)`; cell `(i, j)` covers
//! `[i, i+1) x [j, j+1)` and an object occupies a cell when the cell centre
//! lies inside its polygon.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::angles::{self, cos_sin, normalize_angle};
use crate::raster::Mask;

pub const DEFAULT_WORKSPACE: usize = 64;
pub const PUSH_LENGTH: f64 = 10.0;
pub const PUSH_WIDTH: f64 = 4.0;
/// Distance from the grasp point to each finger centre, across the closing axis.
pub const FINGER_OFFSET: f64 = 4.0;
/// Finger extent along the closing axis.
pub const FINGER_THICKNESS: f64 = 2.0;
/// Finger extent along the primitive direction.
pub const FINGER_LENGTH: f64 = 6.0;
/// A grasped object may be covered by objects above it on at most this fraction of its cells.
pub const MAX_GRASP_COVERAGE: f64 = 0.1;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
pub const PALETTE_SIZE: u8 = 8;
pub const MIN_SHAPE_AREA: f64 = 4.0;
pub const MAX_SHAPE_VERTICES: usize = 12;

pub type ObjectId = u32;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place object after {0} attempts")]
    SceneFull(usize),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("object {0} is not in the scene")]
    UnknownObject(ObjectId),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("scene json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Push,
    Grasp,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Push => "push",
            ActionKind::Grasp => "grasp",
        }
    }
}

/// One parameterized robot motion: a cell and one of 16 orientations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub kind: ActionKind,
    pub x: usize,
    pub y: usize,
    pub rot_index: usize,
}

impl MotionPrimitive {
    pub fn new(kind: ActionKind, x: usize, y: usize, rot_index: usize) -> Self {
        assert!(rot_index < angles::ROTATIONS, "rot_index {rot_index}");
        Self {
            kind,
            x,
            y,
            rot_index,
        }
    }

    pub fn angle(&self) -> f64 {
        angles::rotation_angle(self.rot_index)
    }

    fn origin(&self) -> [f64; 2] {
        [self.x as f64 + 0.5, self.y as f64 + 0.5]
    }
}

/// Polygon outline in the object frame plus identity and colour.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub color_id: u8,
    pub vertices: Vec<[f64; 2]>,
}

impl ObjectSpec {
    pub fn new(id: ObjectId, color_id: u8, vertices: Vec<[f64; 2]>) -> Result<Self> {
        validate_polygon(&vertices)?;
        if color_id >= PALETTE_SIZE {
            return Err(SimError::InvalidShape(format!(
                "color_id {color_id} >= {PALETTE_SIZE}"
            )));
        }
        Ok(Self {
            id,
            color_id,
            vertices,
        })
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in `[0, 2π)`.
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub spec: ObjectSpec,
    pub pose: Pose,
}

impl SceneObject {
    pub fn id(&self) -> ObjectId {
        self.spec.id
    }

    pub fn world_vertices(&self) -> Vec<[f64; 2]> {
        let (c, s) = cos_sin(self.pose.theta);
        self.spec
            .vertices
            .iter()
            .map(|&[vx, vy]| [c * vx - s * vy + self.pose.x, s * vx + c * vy + self.pose.y])
            .collect()
    }
}

/// Rasterized footprint of one object, with its height in the stack.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub id: ObjectId,
    pub level: usize,
    /// Row-major cell indices, ascending.
    pub cells: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
    /// Object ids bottom to top.
    pub stack_order: Vec<ObjectId>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushOutcome {
    pub moved: Vec<ObjectId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraspOutcome {
    pub grasped_id: Option<ObjectId>,
    pub success: bool,
    pub target_was_grasped: bool,
}

/// Shapes available to the random spawner, in object-frame coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePool {
    shapes: Vec<Vec<[f64; 2]>>,
}

impl ShapePool {
    pub fn new(shapes: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(SimError::InvalidShape("shape pool is empty".into()));
        }
        for s in &shapes {
            validate_polygon(s)?;
        }
        Ok(Self { shapes })
    }

    pub fn shapes(&self) -> &[Vec<[f64; 2]>] {
        &self.shapes
    }
}

fn regular_polygon(n: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

impl Default for ShapePool {
    /// Blocks, bars, a wedge, an elbow and two round-ish prisms. Every shape has a
    /// width under the gripper opening in at least one direction.
    fn default() -> Self {
        let shapes = vec![
            vec![[-2.0, -2.0], [2.0, -2.0], [2.0, 2.0], [-2.0, 2.0]],
            vec![[-1.5, -3.0], [1.5, -3.0], [1.5, 3.0], [-1.5, 3.0]],
            vec![[-1.0, -2.0], [1.0, -2.0], [1.0, 2.0], [-1.0, 2.0]],
            vec![[-2.5, -2.0], [2.5, -2.0], [0.0, 2.5]],
            vec![
                [-2.5, -2.5],
                [2.5, -2.5],
                [2.5, -0.5],
                [-0.5, -0.5],
                [-0.5, 2.5],
                [-2.5, 2.5],
            ],
            regular_polygon(6, 2.6),
            regular_polygon(8, 2.5),
        ];
        Self::new(shapes).expect("built-in shapes are valid")
    }
}

fn polygon_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let a = v[i];
            let b = v[(i + 1) % n];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn segments_cross(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

fn validate_polygon(v: &[[f64; 2]]) -> Result<()> {
    if v.len() < 3 || v.len() > MAX_SHAPE_VERTICES {
        return Err(SimError::InvalidShape(format!("{} vertices", v.len())));
    }
    if v.iter().flatten().any(|c| !c.is_finite()) {
        return Err(SimError::InvalidShape("non-finite vertex".into()));
    }
    let area = polygon_area(v);
    if area < MIN_SHAPE_AREA {
        return Err(SimError::InvalidShape(format!(
            "area {area} < {MIN_SHAPE_AREA}"
        )));
    }
    let n = v.len();
    for i in 0..n {
        for j in i + 1..n {
            // adjacent edges share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                return Err(SimError::InvalidShape("self-intersecting outline".into()));
            }
        }
    }
    Ok(())
}

fn bbox(v: &[[f64; 2]]) -> [f64; 4] {
    v.iter().fold(
        [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ],
        |b, p| {
            [
                b[0].min(p[0]),
                b[1].min(p[1]),
                b[2].max(p[0]),
                b[3].max(p[1]),
            ]
        },
    )
}

/// Cell-index range `[lo, hi)` of cells whose centres fall in `[min, max]`, clipped to `len`.
fn cell_span(min: f64, max: f64, len: usize) -> (usize, usize) {
    let lo = (min - 0.5).ceil().max(0.0);
    let hi = ((max - 0.5).floor() + 1.0).min(len as f64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn point_in_polygon(p: [f64; 2], v: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = v.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Cells of a `width x height` grid whose centres lie inside the polygon.
pub fn rasterize_polygon(vertices: &[[f64; 2]], width: usize, height: usize) -> Vec<usize> {
    let b = bbox(vertices);
    let (x0, x1) = cell_span(b[0], b[2], width);
    let (y0, y1) = cell_span(b[1], b[3], height);
    let mut cells = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if point_in_polygon([x as f64 + 0.5, y as f64 + 0.5], vertices) {
                cells.push(y * width + x);
            }
        }
    }
    cells
}

/// Cells whose centres `q` satisfy `u in [u_lo, u_hi)` and `v in [v_lo, v_hi)`
/// where `u = (q - origin)·dir` and `v = (q - origin)·normal`.
pub fn rasterize_oriented_rect(
    origin: [f64; 2],
    dir: (f64, f64),
    u_range: (f64, f64),
    v_range: (f64, f64),
    width: usize,
    height: usize,
) -> Vec<usize> {
    let (c, s) = dir;
    let normal = (-s, c);
    let corners: Vec<[f64; 2]> = [
        (u_range.0, v_range.0),
        (u_range.1, v_range.0),
        (u_range.1, v_range.1),
        (u_range.0, v_range.1),
    ]
    .iter()
    .map(|&(u, v)| {
        [
            origin[0] + u * c + v * normal.0,
            origin[1] + u * s + v * normal.1,
        ]
    })
    .collect();
    let b = bbox(&corners);
    let (x0, x1) = cell_span(b[0], b[2], width);
    let (y0, y1) = cell_span(b[1], b[3], height);
    let mut cells = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - origin[0];
            let dy = y as f64 + 0.5 - origin[1];
            let u = dx * c + dy * s;
            let v = dx * normal.0 + dy * normal.1;
            if u >= u_range.0 && u < u_range.1 && v >= v_range.0 && v < v_range.1 {
                cells.push(y * width + x);
            }
        }
    }
    cells
}

fn sorted_intersects(a: &[usize], b: &[usize]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

impl Scene {
    pub fn new(width: usize, height: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            objects: Vec::new(),
            stack_order: Vec::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.objects.iter().map(|o| o.id())
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.objects.iter().any(|o| o.id() == id)
    }

    pub fn object(&self, id: ObjectId) -> Result<&SceneObject> {
        self.objects
            .iter()
            .find(|o| o.id() == id)
            .ok_or(SimError::UnknownObject(id))
    }

    pub fn level_of(&self, id: ObjectId) -> Result<usize> {
        self.stack_order
            .iter()
            .position(|&s| s == id)
            .ok_or(SimError::UnknownObject(id))
    }

    fn next_id(&self) -> ObjectId {
        self.ids().max().map_or(0, |m| m + 1)
    }

    pub fn footprint(&self, id: ObjectId) -> Result<Vec<usize>> {
        let obj = self.object(id)?;
        Ok(rasterize_polygon(
            &obj.world_vertices(),
            self.width,
            self.height,
        ))
    }

    pub fn footprint_mask(&self, id: ObjectId) -> Result<Mask> {
        Ok(Mask::from_indices(
            self.width,
            self.height,
            &self.footprint(id)?,
        ))
    }

    /// Footprints of all objects, bottom of the stack first.
    pub fn footprints(&self) -> Vec<Footprint> {
        self.stack_order
            .iter()
            .enumerate()
            .map(|(level, &id)| Footprint {
                id,
                level,
                cells: self.footprint(id).expect("stack_order holds live ids"),
            })
            .collect()
    }

    /// Translation that brings `vertices` fully inside the workspace.
    fn clamp_shift(&self, vertices: &[[f64; 2]]) -> (f64, f64) {
        let b = bbox(vertices);
        let shift = |lo: f64, hi: f64, len: f64| {
            if lo < 0.0 {
                -lo
            } else if hi > len {
                len - hi
            } else {
                0.0
            }
        };
        (
            shift(b[0], b[2], self.width as f64),
            shift(b[1], b[3], self.height as f64),
        )
    }

    fn clamp_pose(&self, spec: &ObjectSpec, pose: Pose) -> Pose {
        let obj = SceneObject {
            spec: spec.clone(),
            pose,
        };
        let (dx, dy) = self.clamp_shift(&obj.world_vertices());
        Pose {
            x: pose.x + dx,
            y: pose.y + dy,
            ..pose
        }
    }

    /// Drop `n_objects` random shapes at uniformly random in-bounds poses.
    /// Each new object lands on top of everything already present.
    pub fn spawn_random<R: Rng + ?Sized>(
        &self,
        n_objects: usize,
        pool: &ShapePool,
        rng: &mut R,
    ) -> Result<Scene> {
        if n_objects == 0 {
            return Err(SimError::InvalidScene("n_objects must be >= 1".into()));
        }
        let mut scene = self.clone();
        for _ in 0..n_objects {
            let id = scene.next_id();
            let placed = (0..MAX_PLACEMENT_ATTEMPTS).find_map(|_| {
                let shape = &pool.shapes[rng.gen_range(0..pool.shapes.len())];
                let color_id = rng.gen_range(0..PALETTE_SIZE);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let spec = ObjectSpec {
                    id,
                    color_id,
                    vertices: shape.clone(),
                };
                let probe = SceneObject {
                    spec,
                    pose: Pose::new(0.0, 0.0, theta),
                };
                let b = bbox(&probe.world_vertices());
                let (x_lo, x_hi) = (-b[0], scene.width as f64 - b[2]);
                let (y_lo, y_hi) = (-b[1], scene.height as f64 - b[3]);
                if x_hi <= x_lo || y_hi <= y_lo {
                    return None;
                }
                let obj = SceneObject {
                    pose: Pose::new(rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi), theta),
                    spec: probe.spec,
                };
                let cells = rasterize_polygon(&obj.world_vertices(), scene.width, scene.height);
                (!cells.is_empty()).then_some(obj)
            });
            let obj = placed.ok_or(SimError::SceneFull(MAX_PLACEMENT_ATTEMPTS))?;
            scene.stack_order.push(id);
            scene.objects.push(obj);
        }
        Ok(scene)
    }

    /// Cells swept by a push primitive.
    pub fn push_corridor(&self, primitive: &MotionPrimitive) -> Vec<usize> {
        rasterize_oriented_rect(
            primitive.origin(),
            angles::rotation_cos_sin(primitive.rot_index),
            (0.0, PUSH_LENGTH),
            (-PUSH_WIDTH / 2.0, PUSH_WIDTH / 2.0),
            self.width,
            self.height,
        )
    }

    /// Cells of the two gripper fingers of a grasp primitive.
    pub fn finger_cells(&self, primitive: &MotionPrimitive) -> [Vec<usize>; 2] {
        let (c, s) = angles::rotation_cos_sin(primitive.rot_index);
        let o = primitive.origin();
        let normal = (-s, c);
        [1.0, -1.0].map(|side| {
            let centre = [
                o[0] + side * FINGER_OFFSET * normal.0,
                o[1] + side * FINGER_OFFSET * normal.1,
            ];
            rasterize_oriented_rect(
                centre,
                (c, s),
                (-FINGER_LENGTH / 2.0, FINGER_LENGTH / 2.0),
                (-FINGER_THICKNESS / 2.0, FINGER_THICKNESS / 2.0),
                self.width,
                self.height,
            )
        })
    }

    /// Translate every object touched by the push corridor by the full stroke,
    /// then clamp it back inside the workspace.
    pub fn apply_push(&self, primitive: &MotionPrimitive) -> (Scene, PushOutcome) {
        debug_assert_eq!(primitive.kind, ActionKind::Push);
        let mut corridor = self.push_corridor(primitive);
        corridor.sort_unstable();
        let (c, s) = angles::rotation_cos_sin(primitive.rot_index);
        let (dx, dy) = (PUSH_LENGTH * c, PUSH_LENGTH * s);
        let mut next = self.clone();
        let mut moved = Vec::new();
        for obj in &mut next.objects {
            let cells = rasterize_polygon(&obj.world_vertices(), self.width, self.height);
            if !sorted_intersects(&cells, &corridor) {
                continue;
            }
            let shifted = Pose {
                x: obj.pose.x + dx,
                y: obj.pose.y + dy,
                ..obj.pose
            };
            obj.pose = self.clamp_pose(&obj.spec, shifted);
            moved.push(obj.id());
        }
        moved.sort_unstable();
        (next, PushOutcome { moved })
    }

    /// Close the gripper at the primitive's cell. The topmost object under the
    /// gripper centre is lifted out when both fingers land on free table and
    /// at most [`MAX_GRASP_COVERAGE`] of that object is buried.
    pub fn apply_grasp(
        &self,
        primitive: &MotionPrimitive,
        target_id: ObjectId,
    ) -> Result<(Scene, GraspOutcome)> {
        debug_assert_eq!(primitive.kind, ActionKind::Grasp);
        if !self.contains(target_id) {
            return Err(SimError::UnknownObject(target_id));
        }
        let failed = GraspOutcome {
            grasped_id: None,
            success: false,
            target_was_grasped: false,
        };
        if primitive.x >= self.width || primitive.y >= self.height {
            return Ok((self.clone(), failed));
        }
        let centre = primitive.y * self.width + primitive.x;
        let prints = self.footprints();
        let Some(top) = prints
            .iter()
            .rev()
            .find(|f| f.cells.binary_search(&centre).is_ok())
        else {
            return Ok((self.clone(), failed));
        };
        let mut fingers: Vec<usize> = self.finger_cells(primitive).concat();
        fingers.sort_unstable();
        if prints.iter().any(|f| sorted_intersects(&f.cells, &fingers)) {
            return Ok((self.clone(), failed));
        }
        let mut above = vec![false; self.width * self.height];
        for f in prints.iter().filter(|f| f.level > top.level) {
            for &c in &f.cells {
                above[c] = true;
            }
        }
        let covered = top.cells.iter().filter(|&&c| above[c]).count();
        if covered as f64 > MAX_GRASP_COVERAGE * top.cells.len() as f64 {
            return Ok((self.clone(), failed));
        }
        let mut next = self.clone();
        next.objects.retain(|o| o.id() != top.id);
        next.stack_order.retain(|&id| id != top.id);
        Ok((
            next,
            GraspOutcome {
                grasped_id: Some(top.id),
                success: true,
                target_was_grasped: top.id == target_id,
            },
        ))
    }

    /// The scene rotated a quarter turn counter-clockwise about the workspace
    /// centre. Requires a square workspace.
    pub fn rotated_quarter(&self) -> Scene {
        assert_eq!(
            self.width, self.height,
            "quarter-turn needs a square workspace"
        );
        let c = self.width as f64 / 2.0;
        let mut next = self.clone();
        for obj in &mut next.objects {
            let (vx, vy) = (obj.pose.x - c, obj.pose.y - c);
            obj.pose = Pose::new(c - vy, c + vx, obj.pose.theta + std::f64::consts::FRAC_PI_2);
        }
        next
    }

    /// Check every structural invariant of the scene.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<ObjectId> = self.ids().collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::InvalidScene("duplicate object id".into()));
        }
        let mut order = self.stack_order.clone();
        order.sort_unstable();
        if order != ids {
            return Err(SimError::InvalidScene(
                "stack_order is not a permutation of object ids".into(),
            ));
        }
        for obj in &self.objects {
            validate_polygon(&obj.spec.vertices)?;
            if obj.spec.color_id >= PALETTE_SIZE {
                return Err(SimError::InvalidScene(format!(
                    "object {} color_id",
                    obj.id()
                )));
            }
            let b = bbox(&obj.world_vertices());
            let tol = 1e-9;
            if b[0] < -tol
                || b[1] < -tol
                || b[2] > self.width as f64 + tol
                || b[3] > self.height as f64 + tol
            {
                return Err(SimError::InvalidScene(format!(
                    "object {} leaves the workspace",
                    obj.id()
                )));
            }
            if self.footprint(obj.id())?.is_empty() {
                return Err(SimError::InvalidScene(format!(
                    "object {} has an empty footprint",
                    obj.id()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&SceneFile::from(self)).expect("scene serializes")
    }

    pub fn from_json(text: &str) -> Result<Scene> {
        let file: SceneFile = serde_json::from_str(text)?;
        let scene = file.into_scene()?;
        scene.validate()?;
        Ok(scene)
    }
}

/// On-disk scene layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub workspace: [usize; 2],
    pub objects: Vec<ObjectFile>,
    pub stack_order: Vec<ObjectId>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectFile {
    pub id: ObjectId,
    pub color_id: u8,
    pub vertices: Vec<[f64; 2]>,
    pub pose: [f64; 3],
}

impl From<&Scene> for SceneFile {
    fn from(scene: &Scene) -> Self {
        Self {
            workspace: [scene.width, scene.height],
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectFile {
                    id: o.id(),
                    color_id: o.spec.color_id,
                    vertices: o.spec.vertices.clone(),
                    pose: [o.pose.x, o.pose.y, o.pose.theta],
                })
                .collect(),
            stack_order: scene.stack_order.clone(),
            seed: scene.seed,
        }
    }
}

impl SceneFile {
    pub fn into_scene(self) -> Result<Scene> {
        let [width, height] = self.workspace;
        if width == 0 || height == 0 {
            return Err(SimError::InvalidScene("empty workspace".into()));
        }
        let objects = self
            .objects
            .into_iter()
            .map(|o| {
                Ok(SceneObject {
                    spec: ObjectSpec::new(o.id, o.color_id, o.vertices)?,
                    pose: Pose {
                        x: o.pose[0],
                        y: o.pose[1],
                        theta: normalize_angle(o.pose[2]),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            width,
            height,
            objects,
            stack_order: self.stack_order,
            seed: self.seed,
        })
    }
}

impl Serialize for Scene {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SceneFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Scene {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        SceneFile::deserialize(d)?
            .into_scene()
            .map_err(serde::de::Error::custom)
    }
}
