use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Synthetic object classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Disk,
    Rectangle,
    Triangle,
    Ring,
    Cross,
    Ellipse,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        ShapeClass::Disk,
        ShapeClass::Rectangle,
        ShapeClass::Triangle,
        ShapeClass::Ring,
        ShapeClass::Cross,
        ShapeClass::Ellipse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Rectangle => "rectangle",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Ring => "ring",
            ShapeClass::Cross => "cross",
            ShapeClass::Ellipse => "ellipse",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape class `{s}`")))
    }
}

/// Which side of the class split an episode belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "held_out",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "held_out" => Ok(Split::HeldOut),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Disjoint train / held-out class lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub train: Vec<ShapeClass>,
    pub held_out: Vec<ShapeClass>,
}

impl Default for ClassSplit {
    fn default() -> Self {
        Self {
            train: vec![ShapeClass::Disk, ShapeClass::Rectangle, ShapeClass::Triangle, ShapeClass::Cross],
            held_out: vec![ShapeClass::Ring, ShapeClass::Ellipse],
        }
    }
}

impl ClassSplit {
    pub fn new(train: Vec<ShapeClass>, held_out: Vec<ShapeClass>) -> Result<Self> {
        let s = Self { train, held_out };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.held_out.is_empty() {
            return Err(Error::Config("both class splits must be nonempty".into()));
        }
        if let Some(c) = self.train.iter().find(|c| self.held_out.contains(c)) {
            return Err(Error::Config(format!("class `{c}` is in both splits")));
        }
        for list in [&self.train, &self.held_out] {
            for (i, c) in list.iter().enumerate() {
                if list[..i].contains(c) {
                    return Err(Error::Config(format!("class `{c}` listed twice")));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self, split: Split) -> &[ShapeClass] {
        match split {
            Split::Train => &self.train,
            Split::HeldOut => &self.held_out,
        }
    }

    /// Classes that may appear as distractors in a split. Training images
    /// never show a held-out class.
    pub fn distractor_pool(&self, split: Split) -> Vec<ShapeClass> {
        match split {
            Split::Train => self.train.clone(),
            Split::HeldOut => self.train.iter().chain(&self.held_out).copied().collect(),
        }
    }
}

/// Placement of one rendered shape, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    pub cy: f64,
    pub cx: f64,
    pub scale: f64,
    /// Minor/major axis ratio for rectangles and ellipses.
    pub aspect: f64,
    pub angle: f64,
}

impl ShapeParams {
    /// Random placement; from `r = 32` up the whole shape fits the frame.
    pub fn random(class: ShapeClass, r: usize, rng: &mut RngStream) -> Self {
        let rf = r as f64;
        // absolute floor keeps the smallest classes above the coverage filter on tiny frames
        let scale = rng.uniform((0.12 * rf).max(5.0), (0.22 * rf).max(6.0));
        let aspect = match class {
            ShapeClass::Rectangle => rng.uniform(0.5, 1.0),
            ShapeClass::Ellipse => rng.uniform(0.45, 0.7),
            _ => 1.0,
        };
        // radius of the smallest centred disk containing the shape
        let extent = match class {
            ShapeClass::Rectangle => scale * (1.0 + aspect * aspect).sqrt(),
            ShapeClass::Cross => scale * 1.09f64.sqrt(),
            _ => scale,
        };
        let margin = extent + 1.0;
        Self {
            cy: rng.uniform(margin, (rf - margin).max(margin)),
            cx: rng.uniform(margin, (rf - margin).max(margin)),
            scale,
            aspect,
            angle: rng.uniform(0.0, std::f64::consts::PI),
        }
    }
}

/// Whether the point `(y, x)` lies inside the shape.
pub fn inside(class: ShapeClass, p: &ShapeParams, y: f64, x: f64) -> bool {
    let (s, c) = p.angle.sin_cos();
    let (dy, dx) = (y - p.cy, x - p.cx);
    // coordinates in the shape frame
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    let r = p.scale;
    match class {
        ShapeClass::Disk => u * u + v * v <= r * r,
        ShapeClass::Ring => {
            let d2 = u * u + v * v;
            d2 <= r * r && d2 >= (0.55 * r).powi(2)
        }
        ShapeClass::Ellipse => (u / r).powi(2) + (v / (r * p.aspect)).powi(2) <= 1.0,
        ShapeClass::Rectangle => u.abs() <= r && v.abs() <= r * p.aspect,
        ShapeClass::Cross => {
            let w = 0.3 * r;
            (u.abs() <= r && v.abs() <= w) || (v.abs() <= r && u.abs() <= w)
        }
        ShapeClass::Triangle => {
            // equilateral, circumradius r, one vertex along +v
            let verts = [0.0f64, 2.0, 4.0].map(|k| {
                let a = std::f64::consts::FRAC_PI_2 + k * std::f64::consts::PI / 3.0;
                (r * a.cos(), r * a.sin())
            });
            let cross = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (v - ay) - (by - ay) * (u - ax);
            let d = [cross(verts[0], verts[1]), cross(verts[1], verts[2]), cross(verts[2], verts[0])];
            d.iter().all(|&x| x >= 0.0) || d.iter().all(|&x| x <= 0.0)
        }
    }
}

/// Binary mask of a shape sampled at pixel centres.
pub fn rasterize(class: ShapeClass, p: &ShapeParams, r: usize) -> Vec<bool> {
    (0..r * r)
        .map(|i| inside(class, p, (i / r) as f64 + 0.5, (i % r) as f64 + 0.5))
        .collect()
}
