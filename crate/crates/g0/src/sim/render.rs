//! Deterministic top-down rasterization: one global head view over the whole
//! workspace plus a fine crop centered on each gripper. Channel 0 is
//! occupancy, channel 1 the object-class code, channel 2 the gripper mask.

use crate::sim::scene::ObjectClass;
use crate::sim::world::{door_handle, door_hinge, WorldState};

pub const CHANNELS: usize = 3;
pub const CH_OCCUPANCY: usize = 0;
pub const CH_CLASS: usize = 1;
pub const CH_GRIPPER: usize = 2;

const ROBOT_RADIUS: f64 = 0.18;
const GRIPPER_RADIUS: f64 = 0.06;

/// Square multi-channel raster, `[channel][y][x]` layout, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub size: usize,
    /// World coordinates of the cell (0, 0) corner.
    pub origin: (f64, f64),
    pub cell: f64,
    pub data: Vec<f32>,
}

impl Grid {
    fn new(size: usize, origin: (f64, f64), cell: f64) -> Grid {
        Grid {
            size,
            origin,
            cell,
            data: vec![0.0; CHANNELS * size * size],
        }
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.size + y) * self.size + x]
    }

    /// Raise the cell covering a world point to at least `value`.
    fn mark(&mut self, ch: usize, p: (f64, f64), value: f32) {
        let x = ((p.0 - self.origin.0) / self.cell).floor() as i64;
        let y = ((p.1 - self.origin.1) / self.cell).floor() as i64;
        if x < 0 || y < 0 || x >= self.size as i64 || y >= self.size as i64 {
            return;
        }
        let idx = (ch * self.size + y as usize) * self.size + x as usize;
        if self.data[idx] < value {
            self.data[idx] = value;
        }
    }

    /// Fill every cell whose center lies within `radius` of `center`; the
    /// cell containing the center is always marked so small objects never
    /// fall between cell centers.
    fn disc(&mut self, ch: usize, center: (f64, f64), radius: f64, value: f32) {
        self.mark(ch, center, value);
        let lo_x = (((center.0 - radius) - self.origin.0) / self.cell).floor() as i64;
        let hi_x = (((center.0 + radius) - self.origin.0) / self.cell).ceil() as i64;
        let lo_y = (((center.1 - radius) - self.origin.1) / self.cell).floor() as i64;
        let hi_y = (((center.1 + radius) - self.origin.1) / self.cell).ceil() as i64;
        for y in lo_y.max(0)..(hi_y + 1).min(self.size as i64) {
            for x in lo_x.max(0)..(hi_x + 1).min(self.size as i64) {
                let cx = self.origin.0 + (x as f64 + 0.5) * self.cell;
                let cy = self.origin.1 + (y as f64 + 0.5) * self.cell;
                let d2 = (cx - center.0).powi(2) + (cy - center.1).powi(2);
                if d2 <= radius * radius {
                    let idx = (ch * self.size + y as usize) * self.size + x as usize;
                    if self.data[idx] < value {
                        self.data[idx] = value;
                    }
                }
            }
        }
    }

    fn segment(&mut self, ch: usize, a: (f64, f64), b: (f64, f64), value: f32) {
        let steps = ((crate::sim::world::dist(a, b) / self.cell).ceil() as usize).max(1) * 2;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.mark(ch, (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)), value);
        }
    }

    fn rect(&mut self, ch: usize, r: (f64, f64, f64, f64), value: f32) {
        let lo_x = ((r.0 - self.origin.0) / self.cell).floor() as i64;
        let hi_x = ((r.2 - self.origin.0) / self.cell).ceil() as i64;
        let lo_y = ((r.1 - self.origin.1) / self.cell).floor() as i64;
        let hi_y = ((r.3 - self.origin.1) / self.cell).ceil() as i64;
        for y in lo_y.max(0)..hi_y.min(self.size as i64) {
            for x in lo_x.max(0)..hi_x.min(self.size as i64) {
                let cx = self.origin.0 + (x as f64 + 0.5) * self.cell;
                let cy = self.origin.1 + (y as f64 + 0.5) * self.cell;
                if cx >= r.0 && cx <= r.2 && cy >= r.1 && cy <= r.3 {
                    let idx = (ch * self.size + y as usize) * self.size + x as usize;
                    if self.data[idx] < value {
                        self.data[idx] = value;
                    }
                }
            }
        }
    }
}

/// Head view plus one crop per gripper (second crop all zeros for one-armed
/// bodies).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub head: Grid,
    pub wrists: [Grid; 2],
}

impl Observation {
    /// Flattened float count for the configured grid sizes.
    pub fn flat_len(head_grid: usize, wrist_grid: usize) -> usize {
        CHANNELS * head_grid * head_grid + 2 * CHANNELS * wrist_grid * wrist_grid
    }

    /// Head grid, then each wrist grid, `[channel][y][x]` within each.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out =
            Vec::with_capacity(self.head.data.len() + 2 * self.wrists[0].data.len());
        out.extend_from_slice(&self.head.data);
        out.extend_from_slice(&self.wrists[0].data);
        out.extend_from_slice(&self.wrists[1].data);
        out
    }
}

fn draw_world(grid: &mut Grid, w: &WorldState) {
    for (_, r) in &w.scene.rects {
        grid.rect(CH_OCCUPANCY, *r, 0.3);
    }
    for obj in &w.objects {
        let code = obj.class.class_code(obj.letter);
        match obj.class {
            ObjectClass::ContainerWithDoor => {
                grid.disc(CH_OCCUPANCY, obj.pos, obj.class.radius(), 1.0);
                grid.disc(CH_CLASS, obj.pos, obj.class.radius(), code);
                let angle = obj.door_angle.unwrap_or(0.0);
                let hinge = door_hinge(obj.pos);
                let handle = door_handle(obj.pos, angle);
                grid.segment(CH_OCCUPANCY, hinge, handle, 1.0);
                grid.segment(CH_CLASS, hinge, handle, code);
            }
            _ => {
                grid.disc(CH_OCCUPANCY, obj.pos, obj.class.radius(), 1.0);
                grid.disc(CH_CLASS, obj.pos, obj.class.radius(), code);
            }
        }
    }
    grid.disc(CH_OCCUPANCY, (w.chassis.0, w.chassis.1), ROBOT_RADIUS, 0.6);
    for arm in 0..w.spec.arms {
        let base = w.arm_base(arm);
        let elbow = w.elbow_pos(arm);
        let grip = w.gripper_pos(arm);
        grid.segment(CH_OCCUPANCY, base, elbow, 0.8);
        grid.segment(CH_OCCUPANCY, elbow, grip, 0.8);
        let openness = w.grippers[arm] as f32;
        grid.disc(CH_GRIPPER, grip, GRIPPER_RADIUS, 1.0 - 0.5 * openness);
    }
}

/// Rasterize the world into the three camera grids. Pure function of the
/// world state.
pub fn render(w: &WorldState) -> Observation {
    let params = &w.scene.world;
    let head_cell = params.bounds.0 / params.head_grid as f64;
    let mut head = Grid::new(params.head_grid, (0.0, 0.0), head_cell);
    draw_world(&mut head, w);

    let wrist_window = params.wrist_cell * params.wrist_grid as f64;
    let make_wrist = |arm: usize| -> Grid {
        if arm >= w.spec.arms {
            return Grid::new(params.wrist_grid, (0.0, 0.0), params.wrist_cell);
        }
        let g = w.gripper_pos(arm);
        let half = wrist_window / 2.0;
        // Clamp the crop so it stays inside the world bounds.
        let cx = g.0.clamp(half, params.bounds.0 - half);
        let cy = g.1.clamp(half, params.bounds.1 - half);
        let mut grid = Grid::new(
            params.wrist_grid,
            (cx - half, cy - half),
            params.wrist_cell,
        );
        draw_world(&mut grid, w);
        grid
    };
    let wrists = [make_wrist(0), make_wrist(1)];
    Observation { head, wrists }
}
