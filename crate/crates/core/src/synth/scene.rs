use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::rng;
use crate::registration::{mask_downsample, PreservationMask, RigidTransform};
use crate::voxel::{upsample_coords, DenseGrid, SparseVoxelTensor, OCCUPANCY_THRESHOLD};

use super::vocab::{Color, EditInstruction, Position, Shape, Verb};

/// Resolution assets are rasterized at.
pub const FINE_RES: usize = 64;
/// Sparse latent resolution.
pub const SLAT_RES: usize = 32;
/// Structure (occupancy) resolution.
pub const STRUCT_RES: usize = 16;
/// Sparse latent channels: occupancy, then a 7-wide color code.
pub const SLAT_CHANNELS: usize = 8;

/// Part labels of the fine raster.
const EMPTY: u8 = 0;
const BASE: u8 = 1;
const ATTACHMENT: u8 = 2;

/// Feature code of a color in channels 1..8.
pub fn color_code(c: Color) -> [f64; 7] {
    let k = c as usize;
    let mut v = [0.0; 7];
    if k < 7 {
        v[k] = 1.0;
    } else {
        v = [0.5; 7];
    }
    v
}

/// Axis-aligned solid. Spheres are ellipsoids; cylinders run along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub half: [f64; 3],
}

impl Primitive {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|a| (p[a] - self.center[a]) / self.half[a]);
        match self.shape {
            Shape::Box => d.iter().all(|v| v.abs() <= 1.0),
            Shape::Sphere => d.iter().map(|v| v * v).sum::<f64>() <= 1.0,
            Shape::Cylinder => d[0] * d[0] + d[1] * d[1] <= 1.0 && d[2].abs() <= 1.0,
        }
    }

    fn inside_unit_cube(&self) -> bool {
        (0..3).all(|a| self.center[a] - self.half[a] >= 0.0 && self.center[a] + self.half[a] <= 1.0)
    }
}

/// A secondary part placed against one face of the base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub shape: Shape,
    pub position: Position,
    /// Half extent along every axis.
    pub size: f64,
    /// Feature label of the attachment voxels.
    pub color: Color,
}

impl Attachment {
    /// Placed so that 40% of its extent overlaps the base.
    pub fn primitive(&self, base: &Primitive) -> Primitive {
        let dir = self.position.direction();
        let center = [0, 1, 2].map(|a| base.center[a] + dir[a] * (base.half[a] + 0.6 * self.size));
        Primitive { shape: self.shape, center, half: [self.size; 3] }
    }
}

/// An original asset: a base primitive and an optional attachment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub base: Primitive,
    pub base_color: Color,
    pub attachment: Option<Attachment>,
    pub seed: u64,
}

/// Smallest half extent: two fine voxels.
const MIN_HALF: f64 = 2.0 / FINE_RES as f64;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let mut prims = vec![self.base];
        prims.extend(self.attachment.map(|a| a.primitive(&self.base)));
        for p in prims {
            if p.half.iter().any(|&h| !(h >= MIN_HALF)) {
                return Err(Error::Generation(format!("degenerate primitive {p:?}")));
            }
            if !p.inside_unit_cube() {
                return Err(Error::Generation(format!("primitive {p:?} leaves the unit cube")));
            }
        }
        Ok(())
    }

    /// Parameters of the attachment an `add` edit creates, drawn from the seed.
    fn added_attachment(&self, shape: Shape, position: Position) -> Attachment {
        let mut r = rng(self.seed ^ 0xadd0_add0);
        Attachment { shape, position, size: r.random_range(0.07..0.11), color: Color::ALL[r.random_range(0..Color::ALL.len())] }
    }
}

/// Rasterized asset: part labels on the fine lattice plus part colors.
#[derive(Debug, Clone, PartialEq)]
pub struct Asset {
    parts: Vec<u8>,
    base_color: Color,
    attachment_color: Option<Color>,
}

fn fine_center(i: usize) -> [f64; 3] {
    let r = FINE_RES;
    let (x, y, z) = (i / (r * r), (i / r) % r, i % r);
    [x, y, z].map(|c| (c as f64 + 0.5) / r as f64)
}

impl Asset {
    /// A voxel is occupied iff its center lies inside a primitive; the
    /// attachment wins where both contain it.
    pub fn render(base: &Primitive, base_color: Color, attachment: Option<(Primitive, Color)>) -> Self {
        let parts = (0..FINE_RES.pow(3))
            .map(|i| {
                let p = fine_center(i);
                match attachment {
                    Some((a, _)) if a.contains(p) => ATTACHMENT,
                    _ if base.contains(p) => BASE,
                    _ => EMPTY,
                }
            })
            .collect();
        Self { parts, base_color, attachment_color: attachment.map(|a| a.1) }
    }

    pub fn from_spec(spec: &SceneSpec) -> Self {
        Self::render(&spec.base, spec.base_color, spec.attachment.map(|a| (a.primitive(&spec.base), a.color)))
    }

    /// Color of fine voxel `i`, `None` when empty.
    pub fn color_at(&self, i: usize) -> Option<Color> {
        match self.parts[i] {
            BASE => Some(self.base_color),
            ATTACHMENT => self.attachment_color,
            _ => None,
        }
    }

    pub fn is_occupied(&self, i: usize) -> bool {
        self.parts[i] != EMPTY
    }

    /// Occupancy at `res` (a divisor of the fine resolution) by union pooling.
    pub fn occupancy(&self, res: usize) -> Result<DenseGrid> {
        let mut fine = DenseGrid::unit(FINE_RES, 1)?;
        for (v, &p) in fine.values_mut().iter_mut().zip(&self.parts) {
            *v = f64::from(u8::from(p != EMPTY));
        }
        if res == FINE_RES {
            return Ok(fine);
        }
        fine.pool_occupancy(res, OCCUPANCY_THRESHOLD)
    }

    /// Sparse latent on the children of the occupied structure voxels:
    /// channel 0 is the latent-resolution occupancy, channels 1..8 the color
    /// code (the attachment's when any fine child belongs to it).
    pub fn slat(&self) -> Result<SparseVoxelTensor> {
        let f = FINE_RES / SLAT_RES;
        let mut label = vec![EMPTY; SLAT_RES.pow(3)];
        for (i, &p) in self.parts.iter().enumerate() {
            let (x, y, z) = (i / (FINE_RES * FINE_RES), (i / FINE_RES) % FINE_RES, i % FINE_RES);
            let j = ((x / f) * SLAT_RES + y / f) * SLAT_RES + z / f;
            label[j] = label[j].max(p);
        }
        let coords = upsample_coords(&self.occupancy(STRUCT_RES)?, SLAT_RES, OCCUPANCY_THRESHOLD)?;
        let mut feats = Vec::with_capacity(coords.len() * SLAT_CHANNELS);
        for c in &coords {
            let l = label[(c[0] as usize * SLAT_RES + c[1] as usize) * SLAT_RES + c[2] as usize];
            let color = match l {
                BASE => Some(self.base_color),
                ATTACHMENT => self.attachment_color,
                _ => None,
            };
            match color {
                Some(col) => {
                    feats.push(1.0);
                    feats.extend(color_code(col));
                }
                None => feats.extend([0.0; SLAT_CHANNELS]),
            }
        }
        SparseVoxelTensor::new(SLAT_RES, SLAT_CHANNELS, coords, feats)
    }
}

/// Original and edited assets with the instruction relating them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub spec: SceneSpec,
    pub instruction: EditInstruction,
    pub orig: Asset,
    pub edit: Asset,
    /// Fine voxels occupied in both assets. Features are not compared: a
    /// recolored part is geometrically preserved.
    pub preserved: Vec<bool>,
}

fn inapplicable(spec: &SceneSpec, instr: &EditInstruction, why: &str) -> Error {
    Error::Generation(format!("`{instr}` does not apply ({why}) to a scene with attachment {:?}", spec.attachment.map(|a| a.shape)))
}

/// Renders `spec` and its edit under `instr`.
pub fn gen_pair(spec: &SceneSpec, instr: &EditInstruction) -> Result<PairedSample> {
    spec.validate()?;
    let att = spec.attachment;
    let edited: Option<Attachment> = match (*instr, att) {
        (EditInstruction::Keep, a) => a,
        (EditInstruction::Add { shape, position }, None) => Some(spec.added_attachment(shape, position)),
        (EditInstruction::Add { .. }, Some(_)) => return Err(inapplicable(spec, instr, "an attachment is already present")),
        (EditInstruction::Remove { shape }, Some(a)) if a.shape == shape => None,
        (EditInstruction::Replace { from, to }, Some(a)) if a.shape == from && from != to => Some(Attachment { shape: to, ..a }),
        (EditInstruction::Recolor { shape, color }, Some(a)) if a.shape == shape && a.color != color => Some(Attachment { color, ..a }),
        _ => return Err(inapplicable(spec, instr, "attachment missing or mismatched")),
    };
    let edit_spec = SceneSpec { attachment: edited, ..*spec };
    edit_spec.validate()?;
    let orig = Asset::from_spec(spec);
    let edit = Asset::from_spec(&edit_spec);
    let preserved = (0..FINE_RES.pow(3)).map(|i| orig.is_occupied(i) && edit.is_occupied(i)).collect();
    Ok(PairedSample { spec: *spec, instruction: *instr, orig, edit, preserved })
}

/// An applicable random scene and instruction for `verb`.
pub fn random_pair(seed: u64, verb: Verb) -> (SceneSpec, EditInstruction) {
    let mut r = rng(seed);
    let pick_shape = |r: &mut crate::numcore::Rng| Shape::ALL[r.random_range(0..Shape::ALL.len())];
    let pick_color = |r: &mut crate::numcore::Rng| Color::ALL[r.random_range(0..Color::ALL.len())];
    let base =
        Primitive { shape: pick_shape(&mut r), center: [0; 3].map(|_| 0.5 + r.random_range(-0.04..0.04)), half: [0; 3].map(|_| r.random_range(0.15..0.22)) };
    let base_color = pick_color(&mut r);
    let attachment = Attachment {
        shape: pick_shape(&mut r),
        position: Position::ALL[r.random_range(0..Position::ALL.len())],
        size: r.random_range(0.07..0.11),
        color: pick_color(&mut r),
    };
    let other_shape = |r: &mut crate::numcore::Rng, s: Shape| loop {
        let t = pick_shape(r);
        if t != s {
            break t;
        }
    };
    let (attachment, instr) = match verb {
        Verb::Add => (None, EditInstruction::Add { shape: attachment.shape, position: attachment.position }),
        Verb::Remove => (Some(attachment), EditInstruction::Remove { shape: attachment.shape }),
        Verb::Replace => {
            let to = other_shape(&mut r, attachment.shape);
            (Some(attachment), EditInstruction::Replace { from: attachment.shape, to })
        }
        Verb::Recolor => {
            let color = loop {
                let c = pick_color(&mut r);
                if c != attachment.color {
                    break c;
                }
            };
            (Some(attachment), EditInstruction::Recolor { shape: attachment.shape, color })
        }
        Verb::Keep => (Some(attachment), EditInstruction::Keep),
    };
    (SceneSpec { base, base_color, attachment, seed }, instr)
}

/// Verb of the `i`-th corpus item: verbs cycle so every class is balanced.
pub fn corpus_verb(i: usize) -> Verb {
    Verb::ALL[i % Verb::ALL.len()]
}

/// The recorded preserved set at `resolution` (16, 32 or 64). Coarse bits use
/// the all-children rule over the original's occupied fine voxels.
pub fn ground_truth_mask(p: &PairedSample, resolution: usize) -> Result<PreservationMask> {
    if ![STRUCT_RES, SLAT_RES, FINE_RES].contains(&resolution) {
        return Err(shape_err!("ground-truth masks exist at 16, 32 and 64, not {resolution}"));
    }
    let fine = PreservationMask::new(FINE_RES, p.preserved.clone(), 1.0 / FINE_RES as f64, RigidTransform::identity())?;
    if resolution == FINE_RES {
        return Ok(fine);
    }
    mask_downsample(&fine, &p.orig.occupancy(FINE_RES)?, resolution)
}
