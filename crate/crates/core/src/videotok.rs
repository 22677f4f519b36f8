//! Clip tokenisation: space-time cube embedding, positional embedding, and the
//! `(class, pose, visual)` token layout.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Frames per cube.
pub const CUBE_FRAMES: usize = 2;
/// Pixels per cube side.
pub const CUBE_PIXELS: usize = 16;

/// Input clip geometry, `T×C×H×W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipSpec {
    pub const REFERENCE: ClipSpec = ClipSpec { frames: 16, channels: 1, height: 224, width: 224 };
    pub const TOY: ClipSpec = ClipSpec { frames: 8, channels: 1, height: 32, width: 32 };

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::shape(format!("clip dims must be positive: {self:?}")));
        }
        if !self.frames.is_multiple_of(CUBE_FRAMES) {
            return Err(Error::shape(format!("T={} is not divisible by {CUBE_FRAMES}", self.frames)));
        }
        if !self.height.is_multiple_of(CUBE_PIXELS) || !self.width.is_multiple_of(CUBE_PIXELS) {
            return Err(Error::shape(format!("H×W={}×{} is not divisible by {CUBE_PIXELS}", self.height, self.width)));
        }
        Ok(())
    }

    /// Cube grid `(t, h, w)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames / CUBE_FRAMES, self.height / CUBE_PIXELS, self.width / CUBE_PIXELS)
    }

    pub fn num_visual(&self) -> usize {
        let (t, h, w) = self.grid();
        t * h * w
    }

    /// One pose token per spatial cube position.
    pub fn num_pose(&self) -> usize {
        let (_, h, w) = self.grid();
        h * w
    }

    /// Flattened length of one cube.
    pub fn cube_len(&self) -> usize {
        CUBE_FRAMES * self.channels * CUBE_PIXELS * CUBE_PIXELS
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }

    pub fn layout(&self, pose_tokens: bool) -> TokenLayout {
        TokenLayout { pose: if pose_tokens { self.num_pose() } else { 0 }, visual: self.num_visual() }
    }
}

/// Token counts; the class token is always exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub pose: usize,
    pub visual: usize,
}

impl TokenLayout {
    pub fn total(&self) -> usize {
        1 + self.pose + self.visual
    }

    /// Row of the first visual token.
    pub fn visual_start(&self) -> usize {
        1 + self.pose
    }
}

/// Cube a visual token came from. Merged tokens keep their source's origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VisualOrigin {
    pub t: usize,
    pub row: usize,
    pub col: usize,
    pub merged: bool,
}

impl VisualOrigin {
    /// Linear cube index in `(t, h, w)` row-major order.
    pub fn cube_index(&self, grid: (usize, usize, usize)) -> usize {
        (self.t * grid.1 + self.row) * grid.2 + self.col
    }
}

/// Token sequence `(class, pose, visual)` on a graph, with provenance.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Var,
    pub layout: TokenLayout,
    /// One entry per current visual token.
    pub visual_origin: Vec<VisualOrigin>,
    /// Indexed by original cube; false once a cube's token has been removed.
    pub alive_mask: Vec<bool>,
    pub grid: (usize, usize, usize),
}

impl TokenBatch {
    /// Visual token rows on the tape, in batch order.
    pub fn visual_rows(&self) -> std::ops::Range<usize> {
        self.layout.visual_start()..self.layout.total()
    }
}

/// Split a `T×C×H×W` clip into `N_vis` flattened cubes in `(t, h, w)` order;
/// each row is laid out `(frame, channel, y, x)`.
pub fn extract_cubes<F: Scalar>(clip: &Tensor<F>, spec: &ClipSpec) -> Result<Tensor<F>> {
    spec.validate()?;
    if clip.dims() != spec.dims() {
        return Err(Error::shape(format!("clip dims {:?} != {:?}", clip.dims(), spec.dims())));
    }
    let (t, h, w) = spec.grid();
    let (c, hh, ww) = (spec.channels, spec.height, spec.width);
    let mut out = Vec::with_capacity(spec.num_visual() * spec.cube_len());
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                for dt in 0..CUBE_FRAMES {
                    let f = ti * CUBE_FRAMES + dt;
                    for ci in 0..c {
                        for dy in 0..CUBE_PIXELS {
                            let y = hi * CUBE_PIXELS + dy;
                            let base = ((f * c + ci) * hh + y) * ww + wi * CUBE_PIXELS;
                            out.extend_from_slice(&clip.data()[base..base + CUBE_PIXELS]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![spec.num_visual(), spec.cube_len()], out)
}

/// Inverse of [`extract_cubes`].
pub fn assemble_clip<F: Scalar>(cubes: &Tensor<F>, spec: &ClipSpec) -> Result<Tensor<F>> {
    spec.validate()?;
    if cubes.dims() != [spec.num_visual(), spec.cube_len()] {
        return Err(Error::shape(format!("cube tensor {:?} does not fit {spec:?}", cubes.dims())));
    }
    let (t, h, w) = spec.grid();
    let (c, hh, ww) = (spec.channels, spec.height, spec.width);
    let mut clip = Tensor::zeros(&spec.dims());
    let mut rows = cubes.data().chunks(CUBE_PIXELS);
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                for dt in 0..CUBE_FRAMES {
                    let f = ti * CUBE_FRAMES + dt;
                    for ci in 0..c {
                        for dy in 0..CUBE_PIXELS {
                            let y = hi * CUBE_PIXELS + dy;
                            let base = ((f * c + ci) * hh + y) * ww + wi * CUBE_PIXELS;
                            let src = rows.next().expect("cube rows match spec");
                            clip.data_mut()[base..base + CUBE_PIXELS].copy_from_slice(src);
                        }
                    }
                }
            }
        }
    }
    Ok(clip)
}

/// Graph handles of the embedding parameters.
#[derive(Debug, Clone, Copy)]
pub struct EmbedVars {
    /// `cube_len × D`
    pub proj_w: Var,
    /// `D`
    pub proj_b: Var,
    /// `N_vis × D`
    pub pos: Var,
    /// `1 × D`
    pub cls: Var,
    /// `N_p × D`, absent for models without pose tokens.
    pub pose: Option<Var>,
}

/// Project cubes to `D`, add positional embeddings, and prepend the class and
/// pose tokens.
pub fn cube_embed<F: Scalar>(
    g: &mut Graph<F>,
    clip: &Tensor<F>,
    spec: &ClipSpec,
    vars: &EmbedVars,
) -> Result<TokenBatch> {
    let cubes = extract_cubes(clip, spec)?;
    let cubes = g.constant(cubes);
    let proj = g.matmul(cubes, vars.proj_w)?;
    let visual = g.add_bias(proj, vars.proj_b)?;

    let d = g.dims(visual)[1];
    if g.dims(vars.cls) != [1, d] {
        return Err(Error::shape(format!("class token must be 1×{d}, got {:?}", g.dims(vars.cls))));
    }
    let mut parts = vec![vars.cls];
    let mut pose = 0;
    if let Some(p) = vars.pose {
        if g.dims(p) != [spec.num_pose(), d] {
            return Err(Error::shape(format!("pose tokens must be {}×{d}, got {:?}", spec.num_pose(), g.dims(p))));
        }
        parts.push(p);
        pose = spec.num_pose();
    }
    parts.push(visual);
    let tokens = g.concat_rows(&parts)?;

    let grid = spec.grid();
    let (t, h, w) = grid;
    let mut visual_origin = Vec::with_capacity(spec.num_visual());
    for ti in 0..t {
        for row in 0..h {
            for col in 0..w {
                visual_origin.push(VisualOrigin { t: ti, row, col, merged: false });
            }
        }
    }
    let batch = TokenBatch {
        tokens,
        layout: TokenLayout { pose, visual: spec.num_visual() },
        visual_origin,
        alive_mask: vec![true; spec.num_visual()],
        grid,
    };
    positional_embed(g, batch, vars.pos)
}

/// Add row `i` of `table` to visual token `i`. Class and pose tokens are left
/// untouched.
pub fn positional_embed<F: Scalar>(g: &mut Graph<F>, batch: TokenBatch, table: Var) -> Result<TokenBatch> {
    let d = g.dims(batch.tokens)[1];
    if g.dims(table) != [batch.layout.visual, d] {
        return Err(Error::shape(format!(
            "positional table {:?} does not match {} visual tokens of width {d}",
            g.dims(table),
            batch.layout.visual
        )));
    }
    let prefix: Vec<usize> = (0..batch.layout.visual_start()).collect();
    let visual: Vec<usize> = batch.visual_rows().collect();
    let head = g.gather_rows(batch.tokens, &prefix)?;
    let vis = g.gather_rows(batch.tokens, &visual)?;
    let vis = g.add(vis, table)?;
    let tokens = g.concat_rows(&[head, vis])?;
    Ok(TokenBatch { tokens, ..batch })
}
