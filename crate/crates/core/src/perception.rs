//! Heightmap rendering and exact occlusion measurements.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use opg_tensor::Tensor;

use crate::raster::{Grid, Mask};
use crate::sim::{Footprint, ObjectId, Result, Scene, SimError};

/// Input channels fed to the Q-networks: RGB, depth, target amodal mask.
pub const STATE_CHANNELS: usize = 5;
pub const DEFAULT_BORDER_RADIUS: usize = 10;

pub const PALETTE: [[u8; 3]; 8] = [
    [230, 57, 70],
    [42, 157, 143],
    [233, 196, 106],
    [38, 70, 83],
    [244, 162, 97],
    [131, 56, 236],
    [58, 134, 255],
    [112, 224, 0],
];

/// Top-down state of the workspace: colour and depth of the pile plus the
/// target's full footprint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeightmapStack {
    pub color: Grid<[u8; 3]>,
    /// Number of objects covering each cell.
    pub depth: Grid<u16>,
    pub amodal: Mask,
}

impl HeightmapStack {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    /// `[5, H, W]` network input. Colour is scaled to `[0, 1]`, depth stays in object counts.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h) = (self.width(), self.height());
        let plane = w * h;
        let mut data = vec![0.0f32; STATE_CHANNELS * plane];
        for i in 0..plane {
            let rgb = self.color.cells()[i];
            for c in 0..3 {
                data[c * plane + i] = rgb[c] as f32 / 255.0;
            }
            data[3 * plane + i] = self.depth.cells()[i] as f32;
            data[4 * plane + i] = if self.amodal.cells()[i] { 1.0 } else { 0.0 };
        }
        Tensor::from_vec(&[STATE_CHANNELS, h, w], data).expect("sizes agree")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionReport {
    pub full_mask: Mask,
    pub visible_mask: Mask,
    /// Hidden fraction of the target's full footprint.
    pub occluded_rate: f64,
    /// Border-strip cells covered by occluders.
    pub o_b: usize,
    /// Border-strip size.
    pub t_b: usize,
    /// Full-footprint size.
    pub t_m: usize,
    pub a_b: f64,
    pub a_n: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OcclusionOptions {
    pub border_radius: usize,
    /// Count border cells covered by any object, not only objects stacked above the target.
    pub border_any_overlap: bool,
}

impl Default for OcclusionOptions {
    fn default() -> Self {
        Self {
            border_radius: DEFAULT_BORDER_RADIUS,
            border_any_overlap: false,
        }
    }
}

/// Stack level of the topmost object on every cell.
fn top_levels(scene: &Scene, prints: &[Footprint]) -> Grid<Option<usize>> {
    let mut top = Grid::new(scene.width, scene.height, None);
    for f in prints {
        for &c in &f.cells {
            top.cells_mut()[c] = Some(f.level);
        }
    }
    top
}

fn target_print(prints: &[Footprint], target_id: ObjectId) -> Result<&Footprint> {
    prints
        .iter()
        .find(|f| f.id == target_id)
        .ok_or(SimError::UnknownObject(target_id))
}

pub fn render(scene: &Scene, target_id: ObjectId) -> Result<HeightmapStack> {
    render_from(scene, &scene.footprints(), target_id)
}

/// [`render`] with footprints already rasterized.
pub fn render_from(
    scene: &Scene,
    prints: &[Footprint],
    target_id: ObjectId,
) -> Result<HeightmapStack> {
    let target = target_print(prints, target_id)?;
    let (w, h) = (scene.width, scene.height);
    let mut color = Grid::new(w, h, [0u8; 3]);
    let mut depth = Grid::new(w, h, 0u16);
    for f in prints {
        let rgb = PALETTE[scene.object(f.id)?.spec.color_id as usize];
        for &c in &f.cells {
            color.cells_mut()[c] = rgb;
            depth.cells_mut()[c] += 1;
        }
    }
    Ok(HeightmapStack {
        color,
        depth,
        amodal: Mask::from_indices(w, h, &target.cells),
    })
}

pub fn occlusion_report(
    scene: &Scene,
    target_id: ObjectId,
    opts: &OcclusionOptions,
) -> Result<OcclusionReport> {
    occlusion_report_from(scene, &scene.footprints(), target_id, opts)
}

/// [`occlusion_report`] with footprints already rasterized.
pub fn occlusion_report_from(
    scene: &Scene,
    prints: &[Footprint],
    target_id: ObjectId,
    opts: &OcclusionOptions,
) -> Result<OcclusionReport> {
    let target = target_print(prints, target_id)?;
    let (w, h) = (scene.width, scene.height);
    let top = top_levels(scene, prints);
    let full_mask = Mask::from_indices(w, h, &target.cells);
    let visible: Vec<usize> = target
        .cells
        .iter()
        .copied()
        .filter(|&c| top.cells()[c] == Some(target.level))
        .collect();
    let visible_mask = Mask::from_indices(w, h, &visible);
    let border = full_mask
        .dilate_square(opts.border_radius)
        .minus(&full_mask);
    let o_b = border
        .cells()
        .iter()
        .zip(top.cells())
        .filter(|&(&b, t)| {
            b && match *t {
                Some(_) if opts.border_any_overlap => true,
                Some(level) => level > target.level,
                None => false,
            }
        })
        .count();
    let t_m = target.cells.len();
    let t_b = border.count();
    Ok(OcclusionReport {
        occluded_rate: (t_m - visible.len()) as f64 / t_m as f64,
        o_b,
        t_b,
        t_m,
        a_b: if t_b == 0 {
            0.0
        } else {
            o_b as f64 / t_b as f64
        },
        a_n: o_b as f64 / t_m as f64,
        full_mask,
        visible_mask,
    })
}

/// The candidate with the highest occluded rate; ties go to the lowest id.
pub fn most_occluded_target(scene: &Scene, candidates: &[ObjectId]) -> Result<ObjectId> {
    if candidates.is_empty() {
        return Err(SimError::NoCandidates);
    }
    let prints = scene.footprints();
    let opts = OcclusionOptions::default();
    let mut best: Option<(f64, ObjectId)> = None;
    for &id in candidates {
        let o = occlusion_report_from(scene, &prints, id, &opts)?.occluded_rate;
        best = match best {
            Some((bo, bid)) if bo > o || (bo == o && bid < id) => Some((bo, bid)),
            _ => Some((o, id)),
        };
    }
    Ok(best.expect("nonempty").1)
}

fn write_netpbm(
    path: &Path,
    magic: &str,
    width: usize,
    height: usize,
    maxval: u16,
    bytes: &[u8],
) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "{magic}\n{width} {height}\n{maxval}\n")?;
    f.write_all(bytes)?;
    f.flush()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> io::Result<()> {
    write_netpbm(path, "P5", width, height, 255, values)
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> io::Result<()> {
    let bytes: Vec<u8> = rgb.iter().flatten().copied().collect();
    write_netpbm(path, "P6", width, height, 255, &bytes)
}

/// Write `<trial>_<step>_{color.ppm,depth.pgm,amodal.pgm}` into `dir`.
/// Depth is stretched so the tallest pile is white.
pub fn dump_stack(
    stack: &HeightmapStack,
    dir: &Path,
    trial: usize,
    step: usize,
) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let (w, h) = (stack.width(), stack.height());
    let stem = format!("{trial}_{step}");
    let color = dir.join(format!("{stem}_color.ppm"));
    write_ppm(&color, w, h, stack.color.cells())?;
    let max_depth = stack
        .depth
        .cells()
        .iter()
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as u32;
    let depth_bytes: Vec<u8> = stack
        .depth
        .cells()
        .iter()
        .map(|&d| (d as u32 * 255 / max_depth) as u8)
        .collect();
    let depth = dir.join(format!("{stem}_depth.pgm"));
    write_pgm(&depth, w, h, &depth_bytes)?;
    let amodal_bytes: Vec<u8> = stack
        .amodal
        .cells()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    let amodal = dir.join(format!("{stem}_amodal.pgm"));
    write_pgm(&amodal, w, h, &amodal_bytes)?;
    Ok(vec![color, depth, amodal])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{ObjectSpec, Pose, SceneObject};

    fn block(id: ObjectId, color_id: u8, x: f64, y: f64) -> SceneObject {
        SceneObject {
            spec: ObjectSpec::new(
                id,
                color_id,
                vec![[-2.0, -2.0], [2.0, -2.0], [2.0, 2.0], [-2.0, 2.0]],
            )
            .unwrap(),
            pose: Pose::new(x, y, 0.0),
        }
    }

    fn scene_with(objs: Vec<SceneObject>) -> Scene {
        let mut s = Scene::new(32, 32, 0);
        for o in objs {
            s.stack_order.push(o.id());
            s.objects.push(o);
        }
        s
    }

    #[test]
    fn lone_target_render() {
        let s = scene_with(vec![block(0, 2, 10.0, 10.0)]);
        let r = render(&s, 0).unwrap();
        let fp = s.footprint(0).unwrap();
        for i in 0..32 * 32 {
            let on = fp.contains(&i);
            assert_eq!(r.color.cells()[i] != [0, 0, 0], on);
            assert_eq!(r.depth.cells()[i], on as u16);
            assert_eq!(r.amodal.cells()[i], on);
        }
        assert!(render(&s, 5).is_err());
    }

    #[test]
    fn occluder_colour_over_target() {
        let s = scene_with(vec![block(0, 0, 10.0, 10.0), block(1, 3, 12.0, 10.0)]);
        let r = render(&s, 0).unwrap();
        assert_eq!(*r.color.get(11, 10), PALETTE[3]);
        assert_eq!(*r.color.get(8, 10), PALETTE[0]);
        assert_eq!(*r.depth.get(11, 10), 2);
        assert_eq!(r.amodal.count(), 16);
        let t = r.to_tensor();
        assert_eq!(t.dims(), &[5, 32, 32]);
        assert_eq!(t.at(&[3, 10, 11]), 2.0);
        assert_eq!(t.at(&[4, 10, 11]), 1.0);
    }

    #[test]
    fn half_covered_target() {
        let s = scene_with(vec![block(0, 0, 10.0, 10.0), block(1, 1, 12.0, 10.0)]);
        let rep = occlusion_report(&s, 0, &OcclusionOptions::default()).unwrap();
        assert_eq!(rep.t_m, 16);
        assert_eq!(rep.occluded_rate, 0.5);
        assert_eq!(rep.visible_mask.count(), 8);
        assert!(rep.visible_mask.is_subset_of(&rep.full_mask));
        // Occluder sticks out 2 columns to the right of the target, 4 rows tall.
        assert_eq!(rep.o_b, 8);
        // Lower object is only counted with the any-overlap switch.
        let below = occlusion_report(&s, 1, &OcclusionOptions::default()).unwrap();
        assert_eq!((below.o_b, below.occluded_rate), (0, 0.0));
        let any = OcclusionOptions {
            border_any_overlap: true,
            ..Default::default()
        };
        assert_eq!(occlusion_report(&s, 1, &any).unwrap().o_b, 8);
    }

    #[test]
    fn isolated_target_has_no_occlusion() {
        let s = scene_with(vec![block(0, 0, 5.0, 5.0), block(1, 0, 27.0, 27.0)]);
        let rep = occlusion_report(&s, 0, &OcclusionOptions::default()).unwrap();
        assert_eq!(
            (rep.occluded_rate, rep.o_b, rep.a_b, rep.a_n),
            (0.0, 0, 0.0, 0.0)
        );
        // Radius 10 around a 4x4 block at cells 3..7, clipped at the wall.
        assert_eq!(rep.t_b, 17 * 17 - 16);
    }

    #[test]
    fn most_occluded_picks_max_then_lowest_id() {
        let s = scene_with(vec![
            block(0, 0, 20.0, 20.0),
            block(1, 0, 8.0, 8.0),
            block(2, 0, 9.0, 8.0),
        ]);
        assert_eq!(most_occluded_target(&s, &[0]).unwrap(), 0);
        assert_eq!(most_occluded_target(&s, &[0, 1, 2]).unwrap(), 1);
        assert_eq!(most_occluded_target(&s, &[2, 0]).unwrap(), 0);
        assert!(matches!(
            most_occluded_target(&s, &[]),
            Err(SimError::NoCandidates)
        ));
    }

    #[test]
    fn dump_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = scene_with(vec![block(0, 0, 10.0, 10.0)]);
        let files = dump_stack(&render(&s, 0).unwrap(), dir.path(), 3, 1).unwrap();
        assert_eq!(files.len(), 3);
        let depth = fs::read(dir.path().join("3_1_depth.pgm")).unwrap();
        assert!(depth.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(depth.len(), 13 + 32 * 32);
        let color = fs::read(dir.path().join("3_1_color.ppm")).unwrap();
        assert_eq!(color.len(), 13 + 3 * 32 * 32);
    }
}
