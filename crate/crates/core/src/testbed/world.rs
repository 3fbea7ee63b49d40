use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::MeanModel;
use crate::{Error, Result};

/// Interpolants checked between consecutive waypoints.
pub const SEGMENT_INTERPOLANTS: usize = 10;

pub type Point = [f64; 2];

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Point,
    pub radius: f64,
}

impl Obstacle {
    /// Strict interior test.
    pub fn contains(&self, p: Point) -> bool {
        dist(self.center, p) < self.radius
    }
}

fn default_step_limit() -> usize {
    200
}

fn default_control_limit() -> f64 {
    0.5
}

/// 2D workspace with circular obstacles. Loaded from JSON with keys
/// `bounds` (`[xmin, ymin, xmax, ymax]`), `obstacles`, `start`, `goal`,
/// `goal_radius`, and optionally `step_limit` and `control_limit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMassWorld {
    pub bounds: [f64; 4],
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub start: Point,
    pub goal: Point,
    pub goal_radius: f64,
    #[serde(default = "default_step_limit")]
    pub step_limit: usize,
    /// Per-axis magnitude limit of one command.
    #[serde(default = "default_control_limit")]
    pub control_limit: f64,
}

impl PointMassWorld {
    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bounds;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::Config("world bounds must satisfy xmin < xmax and ymin < ymax".into()));
        }
        if self.obstacles.iter().any(|o| !(o.radius > 0.0)) {
            return Err(Error::Config("obstacle radii must be positive".into()));
        }
        if !(self.goal_radius > 0.0 && self.control_limit > 0.0) || self.step_limit == 0 {
            return Err(Error::Config("goal_radius, control_limit and step_limit must be positive".into()));
        }
        for (name, p) in [("start", self.start), ("goal", self.goal)] {
            if !self.is_free(p) {
                return Err(Error::Config(format!("{name} {p:?} is out of bounds or inside an obstacle")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let world: Self = serde_json::from_str(text)?;
        world.validate()?;
        Ok(world)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Inclusive bounds test.
    pub fn in_bounds(&self, p: Point) -> bool {
        let [x0, y0, x1, y1] = self.bounds;
        (x0..=x1).contains(&p[0]) && (y0..=y1).contains(&p[1])
    }

    pub fn collides(&self, p: Point) -> bool {
        self.obstacles.iter().any(|o| o.contains(p))
    }

    pub fn is_free(&self, p: Point) -> bool {
        p[0].is_finite() && p[1].is_finite() && self.in_bounds(p) && !self.collides(p)
    }

    pub fn reached_goal(&self, p: Point) -> bool {
        dist(p, self.goal) <= self.goal_radius
    }

    /// Random collision-free start/goal pair at least `min_separation` apart.
    pub fn sample_task(&self, seed: u64, min_separation: f64) -> Result<(Point, Point)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [x0, y0, x1, y1] = self.bounds;
        let draw = |rng: &mut ChaCha8Rng| [rng.gen_range(x0..=x1), rng.gen_range(y0..=y1)];
        for _ in 0..10_000 {
            let (s, g) = (draw(&mut rng), draw(&mut rng));
            if self.is_free(s) && self.is_free(g) && dist(s, g) >= min_separation {
                return Ok((s, g));
            }
        }
        Err(Error::Config("could not sample a free start/goal pair".into()))
    }
}

/// True iff every waypoint and [`SEGMENT_INTERPOLANTS`] interior points per
/// segment are in bounds and outside every obstacle.
pub fn feasibility_check(waypoints: &[Point], world: &PointMassWorld) -> bool {
    if !waypoints.iter().all(|p| world.is_free(*p)) {
        return false;
    }
    waypoints.windows(2).all(|w| {
        (1..=SEGMENT_INTERPOLANTS).all(|k| {
            let u = k as f64 / (SEGMENT_INTERPOLANTS + 1) as f64;
            world.is_free([w[0][0] + u * (w[1][0] - w[0][0]), w[0][1] + u * (w[1][1] - w[0][1])])
        })
    })
}

/// Waypoints in world frame from ego offsets relative to `origin`.
pub fn to_world(origin: Point, offsets: &Array2<f64>) -> Vec<Point> {
    offsets.rows().into_iter().map(|r| [origin[0] + r[0], origin[1] + r[1]]).collect()
}

/// Reference plan for the point-mass world: equal steps toward the goal,
/// capped at `step_len`, with each waypoint pushed radially out of obstacles
/// inflated by `margin`. Context is `[px, py, gx, gy]`; output rows are
/// offsets from `(px, py)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointPrior {
    pub horizon: usize,
    pub step_len: f64,
    pub margin: f64,
    pub obstacles: Vec<Obstacle>,
}

impl WaypointPrior {
    pub fn new(world: &PointMassWorld, horizon: usize, step_len: f64, margin: f64) -> Result<Self> {
        if horizon == 0 || !(step_len > 0.0) || !(margin >= 0.0) {
            return Err(Error::InvalidArgument("prior horizon, step_len and margin must be positive".into()));
        }
        Ok(Self { horizon, step_len, margin, obstacles: world.obstacles.clone() })
    }
}

impl MeanModel for WaypointPrior {
    fn shape(&self) -> (usize, usize) {
        (self.horizon, 2)
    }

    fn context_dim(&self) -> usize {
        4
    }

    fn mean(&self, context: &[f64]) -> Result<Array2<f64>> {
        if context.len() != 4 {
            return Err(Error::DimensionMismatch { left: 4, right: context.len() });
        }
        let (p, g) = ([context[0], context[1]], [context[2], context[3]]);
        let gap = dist(p, g);
        let step = (gap / self.horizon as f64).min(self.step_len);
        let dir = if gap > 0.0 { [(g[0] - p[0]) / gap, (g[1] - p[1]) / gap] } else { [0.0, 0.0] };
        let mut out = Array2::zeros((self.horizon, 2));
        for h in 0..self.horizon {
            let along = step * (h + 1) as f64;
            let mut w = [p[0] + dir[0] * along, p[1] + dir[1] * along];
            for o in &self.obstacles {
                let r = o.radius + self.margin;
                let d = dist(w, o.center);
                if d < r && d > 0.0 {
                    w = [o.center[0] + (w[0] - o.center[0]) * r / d, o.center[1] + (w[1] - o.center[1]) * r / d];
                }
            }
            out[[h, 0]] = w[0] - p[0];
            out[[h, 1]] = w[1] - p[1];
        }
        Ok(out)
    }
}
