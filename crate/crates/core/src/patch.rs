//! Token-grid plumbing: patch partitioning, shifted-window partitioning,
//! patch merging and patch expanding.
//!
//! Every spatial layout here is row-major with the last axis fastest; token
//! `i` of a grid with extents `(d0, d1, ..)` sits at the row-major
//! coordinate of `i`. All ops work for any number of spatial axes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Graph, Tensor, Var};

/// Additive pre-softmax value for blocked attention pairs.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub axes: Vec<usize>,
    pub channels: usize,
}

impl GridShape {
    pub fn new(axes: impl Into<Vec<usize>>, channels: usize) -> Result<Self> {
        let axes = axes.into();
        if axes.is_empty() || axes.contains(&0) || channels == 0 {
            return Err(Error::shape(format!("invalid grid {axes:?} x {channels}")));
        }
        Ok(GridShape { axes, channels })
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn tokens(&self) -> usize {
        numel(&self.axes)
    }

    /// Shape after merging blocks of `factors` tokens: extents divided, channels doubled.
    pub fn merged(&self, factors: &[usize]) -> Result<GridShape> {
        check_divisible(&self.axes, factors, "merge")?;
        GridShape::new(div(&self.axes, factors), 2 * self.channels)
    }

    /// Shape after expanding: extents multiplied, channels `2C / prod(factors)`.
    pub fn expanded(&self, factors: &[usize]) -> Result<GridShape> {
        if factors.len() != self.ndim() || factors.contains(&0) {
            return Err(Error::shape(format!("expand factors {factors:?} for grid {:?}", self.axes)));
        }
        let f = numel(factors);
        if !(2 * self.channels).is_multiple_of(f) {
            return Err(Error::shape(format!(
                "expand: 2C = {} not divisible by prod(factors) = {f}",
                2 * self.channels
            )));
        }
        GridShape::new(self.axes.iter().zip(factors).map(|(a, f)| a * f).collect::<Vec<_>>(), 2 * self.channels / f)
    }
}

impl std::fmt::Display for GridShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for a in &self.axes {
            write!(f, "{a}x")?;
        }
        write!(f, "{}", self.channels)
    }
}

/// A batch of token grids living on a graph: `tokens` is `[batch, tokens, channels]`.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub shape: GridShape,
    pub tokens: Var,
    pub batch: usize,
    pub level: usize,
}

impl TokenGrid {
    pub fn new<T: Scalar>(g: &Graph<T>, tokens: Var, shape: GridShape, level: usize) -> Result<Self> {
        let s = g.shape(tokens);
        if s.len() != 3 || s[1] != shape.tokens() || s[2] != shape.channels {
            return Err(Error::shape(format!("tokens {s:?} do not match grid {shape}")));
        }
        Ok(TokenGrid { batch: s[0], shape, tokens, level })
    }

    pub fn with_tokens(&self, tokens: Var) -> TokenGrid {
        TokenGrid { tokens, ..self.clone() }
    }
}

fn check_divisible(axes: &[usize], by: &[usize], what: &str) -> Result<()> {
    if axes.len() != by.len() || by.contains(&0) || axes.iter().zip(by).any(|(a, b)| a % b != 0) {
        return Err(Error::shape(format!("{what}: extents {axes:?} not divisible by {by:?}")));
    }
    Ok(())
}

fn div(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().zip(b).map(|(x, y)| x / y).collect()
}

/// Row-major coordinates of flat index `i` within `extents`.
pub(crate) fn unravel(mut i: usize, extents: &[usize], out: &mut [usize]) {
    for ax in (0..extents.len()).rev() {
        out[ax] = i % extents[ax];
        i /= extents[ax];
    }
}

pub(crate) fn ravel(coord: &[usize], extents: &[usize]) -> usize {
    coord.iter().zip(extents).fold(0, |acc, (c, e)| acc * e + c)
}

/// For a grid split into blocks of `block` extents, lists source flat
/// indices block by block (blocks row-major, then offsets row-major).
fn blocked_order(extents: &[usize], block: &[usize]) -> Vec<usize> {
    let outer = div(extents, block);
    let (nb, nt) = (numel(&outer), numel(block));
    let d = extents.len();
    let (mut bc, mut oc, mut c) = (vec![0; d], vec![0; d], vec![0; d]);
    let mut order = Vec::with_capacity(nb * nt);
    for b in 0..nb {
        unravel(b, &outer, &mut bc);
        for o in 0..nt {
            unravel(o, block, &mut oc);
            for ax in 0..d {
                c[ax] = bc[ax] * block[ax] + oc[ax];
            }
            order.push(ravel(&c, extents));
        }
    }
    order
}

/// Repeats a per-sample row index for every sample of a batch.
fn batched(index: &[usize], batch: usize, rows_per_sample: usize) -> Arc<[usize]> {
    (0..batch).flat_map(|b| index.iter().map(move |&i| b * rows_per_sample + i)).collect()
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Flat voxel index for each (token, in-patch offset) pair of a patch partition.
pub fn partition_index(spatial: &[usize], patch: &[usize]) -> Result<Vec<usize>> {
    check_divisible(spatial, patch, "patch_partition")?;
    Ok(blocked_order(spatial, patch))
}

/// Splits `volume` (`[batch, spatial..]` or `[batch, spatial.., c_in]`)
/// into non-overlapping patches whose raw values form the token features.
pub fn patch_partition<T: Scalar>(g: &mut Graph<T>, volume: Var, patch: &[usize]) -> Result<TokenGrid> {
    let vs = g.shape(volume).to_vec();
    let d = patch.len();
    let c_in = match vs.len() {
        r if r == d + 1 => 1,
        r if r == d + 2 => vs[d + 1],
        _ => return Err(Error::shape(format!("volume {vs:?} does not have {d} spatial axes"))),
    };
    let spatial = &vs[1..d + 1];
    let order = partition_index(spatial, patch)?;
    let batch = vs[0];
    let voxels = numel(spatial);
    let flat = g.reshape(volume, vec![batch * voxels, c_in])?;
    let rows = g.gather_rows(flat, batched(&order, batch, voxels))?;
    let shape = GridShape::new(div(spatial, patch), numel(patch) * c_in)?;
    let tokens = g.reshape(rows, vec![batch, shape.tokens(), shape.channels])?;
    TokenGrid::new(g, tokens, shape, 0)
}

/// Exact inverse of [`patch_partition`]; returns `[batch, spatial..]` (plus a
/// trailing channel axis when `c_in > 1`).
pub fn patch_reassemble<T: Scalar>(g: &mut Graph<T>, grid: &TokenGrid, patch: &[usize], c_in: usize) -> Result<Var> {
    if patch.len() != grid.shape.ndim() || grid.shape.channels != numel(patch) * c_in {
        return Err(Error::shape(format!(
            "patch_reassemble: grid {} does not carry {:?} patches of {c_in} channel(s)",
            grid.shape, patch
        )));
    }
    let spatial: Vec<usize> = grid.shape.axes.iter().zip(patch).map(|(a, p)| a * p).collect();
    let inv = inverse(&partition_index(&spatial, patch)?);
    let voxels = numel(&spatial);
    let rows = g.reshape(grid.tokens, vec![grid.batch * voxels, c_in])?;
    let vol = g.gather_rows(rows, batched(&inv, grid.batch, voxels))?;
    let mut shape = vec![grid.batch];
    shape.extend(&spatial);
    if c_in > 1 {
        shape.push(c_in);
    }
    g.reshape(vol, shape)
}

/// Window extents and cyclic shift for one attention layer, plus the
/// token permutation and shifted-window mask they induce.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub axes: Vec<usize>,
    pub window: Vec<usize>,
    pub shift: Vec<usize>,
    order: Arc<[usize]>,
    inverse: Arc<[usize]>,
    blocked: Option<Arc<[bool]>>,
}

impl WindowLayout {
    pub fn new(axes: &[usize], window: &[usize], shift: &[usize]) -> Result<Self> {
        check_divisible(axes, window, "window_partition")?;
        if shift.len() != window.len() || shift.iter().zip(window).any(|(s, w)| s >= w) {
            return Err(Error::shape(format!("shift {shift:?} must satisfy 0 <= shift < window {window:?}")));
        }
        let order = window_order(axes, window, shift);
        let inverse = inverse(&order);
        let blocked = shift.iter().any(|&s| s > 0).then(|| Arc::from(shift_mask(axes, window, shift)));
        Ok(WindowLayout {
            axes: axes.to_vec(),
            window: window.to_vec(),
            shift: shift.to_vec(),
            order: order.into(),
            inverse: inverse.into(),
            blocked,
        })
    }

    /// Layout for a transformer sub-block on a grid: the window is clamped
    /// to the grid, and a shifted layout moves by half a window on every
    /// axis that holds more than one window.
    pub fn for_grid(axes: &[usize], window: &[usize], shifted: bool) -> Result<Self> {
        if axes.len() != window.len() {
            return Err(Error::shape(format!("window {window:?} for grid {axes:?}")));
        }
        let win: Vec<usize> = axes.iter().zip(window).map(|(&a, &w)| a.min(w)).collect();
        let shift: Vec<usize> =
            axes.iter().zip(&win).map(|(&a, &w)| if shifted && a > w { w / 2 } else { 0 }).collect();
        Self::new(axes, &win, &shift)
    }

    pub fn num_windows(&self) -> usize {
        numel(&self.axes) / self.window_tokens()
    }

    pub fn window_tokens(&self) -> usize {
        numel(&self.window)
    }

    pub fn is_shifted(&self) -> bool {
        self.blocked.is_some()
    }

    /// Grid token index at window-major position `p`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `[num_windows * T * T]` pattern, true where attention is blocked; `None` when unshifted.
    pub fn blocked(&self) -> Option<&[bool]> {
        self.blocked.as_deref()
    }

    /// Additive mask `[num_windows, 1, T, T]` (0 or [`MASK_NEG`]).
    pub fn mask_tensor<T: Scalar>(&self) -> Option<Tensor<T>> {
        let t = self.window_tokens();
        self.blocked.as_ref().map(|b| {
            Tensor::from_parts(
                vec![self.num_windows(), 1, t, t],
                b.iter().map(|&x| if x { T::lit(MASK_NEG) } else { T::zero() }).collect(),
            )
        })
    }
}

/// Window-major token order after a cyclic shift by `-shift`: position
/// `w * T + o` holds the grid token that lands at offset `o` of window `w`.
pub fn window_order(axes: &[usize], window: &[usize], shift: &[usize]) -> Vec<usize> {
    let d = axes.len();
    let mut c = vec![0; d];
    blocked_order(axes, window)
        .into_iter()
        .map(|s| {
            unravel(s, axes, &mut c);
            for ax in 0..d {
                c[ax] = (c[ax] + shift[ax]) % axes[ax];
            }
            ravel(&c, axes)
        })
        .collect()
}

/// Shifted-window attention mask. In the shifted frame each axis splits
/// into the regions `[0, E-w)`, `[E-w, E-s)`, `[E-s, E)`; tokens sharing a
/// window but not a region came from opposite sides of the wrap-around
/// and may not attend to each other.
pub fn shift_mask(axes: &[usize], window: &[usize], shift: &[usize]) -> Vec<bool> {
    let d = axes.len();
    let region = |ax: usize, s: usize| -> usize {
        let (e, w, sh) = (axes[ax], window[ax], shift[ax]);
        if sh == 0 || s < e - w {
            0
        } else if s < e - sh {
            1
        } else {
            2
        }
    };
    let mut c = vec![0; d];
    let labels: Vec<usize> = blocked_order(axes, window)
        .into_iter()
        .map(|s| {
            unravel(s, axes, &mut c);
            (0..d).fold(0, |acc, ax| acc * 3 + region(ax, c[ax]))
        })
        .collect();
    let t = numel(window);
    let mut out = Vec::with_capacity(labels.len() * t);
    for win in labels.chunks(t) {
        for &li in win {
            for &lj in win {
                out.push(li != lj);
            }
        }
    }
    out
}

/// Cyclically shifts and cuts the grid into windows: `[batch * num_windows, T, C]`.
pub fn window_partition<T: Scalar>(g: &mut Graph<T>, grid: &TokenGrid, layout: &WindowLayout) -> Result<Var> {
    if layout.axes != grid.shape.axes {
        return Err(Error::shape(format!("layout for {:?} applied to grid {}", layout.axes, grid.shape)));
    }
    let (n, c) = (grid.shape.tokens(), grid.shape.channels);
    let rows = g.reshape(grid.tokens, vec![grid.batch * n, c])?;
    let w = g.gather_rows(rows, batched(&layout.order, grid.batch, n))?;
    g.reshape(w, vec![grid.batch * layout.num_windows(), layout.window_tokens(), c])
}

/// Inverse of [`window_partition`], undoing the cyclic shift.
pub fn window_reverse<T: Scalar>(
    g: &mut Graph<T>,
    windows: Var,
    layout: &WindowLayout,
    shape: &GridShape,
    level: usize,
) -> Result<TokenGrid> {
    let ws = g.shape(windows).to_vec();
    let (nw, t) = (layout.num_windows(), layout.window_tokens());
    if layout.axes != shape.axes || ws.len() != 3 || !ws[0].is_multiple_of(nw) || ws[1] != t || ws[2] != shape.channels
    {
        return Err(Error::shape(format!("window_reverse: windows {ws:?} inconsistent with grid {shape} / layout")));
    }
    let batch = ws[0] / nw;
    let n = shape.tokens();
    let rows = g.reshape(windows, vec![batch * n, shape.channels])?;
    let back = g.gather_rows(rows, batched(&layout.inverse, batch, n))?;
    let tokens = g.reshape(back, vec![batch, n, shape.channels])?;
    TokenGrid::new(g, tokens, shape.clone(), level)
}

/// Concatenates each block of `factors` neighbouring tokens (`C * prod(factors)`
/// channels) and maps the result to `2C` channels with `w_reduce` (`[C * prod, 2C]`).
pub fn patch_merge<T: Scalar>(
    g: &mut Graph<T>,
    grid: &TokenGrid,
    factors: &[usize],
    w_reduce: Var,
) -> Result<TokenGrid> {
    let out_shape = grid.shape.merged(factors)?;
    let concat = patch_merge_concat(g, grid, factors)?;
    let ws = g.shape(w_reduce);
    let cc = grid.shape.channels * numel(factors);
    if ws != [cc, out_shape.channels] {
        return Err(Error::shape(format!("merge weight {ws:?}, expected [{cc}, {}]", out_shape.channels)));
    }
    let y = g.linear(concat, w_reduce, None)?;
    TokenGrid::new(g, y, out_shape, grid.level + 1)
}

/// The concatenation half of [`patch_merge`]: `[batch, tokens / prod, C * prod]`.
pub fn patch_merge_concat<T: Scalar>(g: &mut Graph<T>, grid: &TokenGrid, factors: &[usize]) -> Result<Var> {
    check_divisible(&grid.shape.axes, factors, "patch_merge")?;
    let order = blocked_order(&grid.shape.axes, factors);
    let (n, c) = (grid.shape.tokens(), grid.shape.channels);
    let f = numel(factors);
    let rows = g.reshape(grid.tokens, vec![grid.batch * n, c])?;
    let gathered = g.gather_rows(rows, batched(&order, grid.batch, n))?;
    g.reshape(gathered, vec![grid.batch, n / f, f * c])
}

/// Maps channels `C -> 2C` with `w_expand` (`[C, 2C]`), then distributes
/// each token's channels over a `factors` block of new tokens, leaving
/// `2C / prod(factors)` channels per token.
pub fn patch_expand<T: Scalar>(
    g: &mut Graph<T>,
    grid: &TokenGrid,
    factors: &[usize],
    w_expand: Var,
) -> Result<TokenGrid> {
    let out_shape = grid.shape.expanded(factors)?;
    let c = grid.shape.channels;
    if g.shape(w_expand) != [c, 2 * c] {
        return Err(Error::shape(format!("expand weight {:?}, expected [{c}, {}]", g.shape(w_expand), 2 * c)));
    }
    let y = g.linear(grid.tokens, w_expand, None)?;
    let f = numel(factors);
    let (n, n_out) = (grid.shape.tokens(), out_shape.tokens());
    // row (token * f + sub) of the split tensor goes to output token blocked_order[token * f + sub]
    let dest = blocked_order(&out_shape.axes, factors);
    let src = inverse(&dest);
    let rows = g.reshape(y, vec![grid.batch * n * f, out_shape.channels])?;
    let placed = g.gather_rows(rows, batched(&src, grid.batch, n_out))?;
    let tokens = g.reshape(placed, vec![grid.batch, n_out, out_shape.channels])?;
    TokenGrid::new(g, tokens, out_shape, grid.level.saturating_sub(1))
}
