//! Tensor-product grids, nodal fields, masks and boundary traces.
//!
//! Conventions used throughout the crate:
//!
//! * The domain is a box `∏_a (low_a, high_a)` split into `cells_a` uniform
//!   cells per axis, spacing `h_a = (high_a - low_a) / cells_a`. Lattice
//!   nodes sit at `low_a + i_a h_a`, `i_a = 0..=cells_a`.
//! * *Interior* nodes have every `i_a` in `1..cells_a`. They are enumerated
//!   row-major with the **last axis fastest**: in 2D the node `(i_0, i_1)`
//!   has linear index `(i_0 - 1) * (cells_1 - 1) + (i_1 - 1)`.
//! * *Boundary* nodes are the nodes of the open faces; corners and edges
//!   where two coordinates are extreme carry no data (they are a null set of
//!   the surface measure and have no well-defined normal). Faces are
//!   enumerated axis by axis, low side before high side, and each face
//!   row-major over the remaining axes' interior indices.
//! * Homogeneous-Dirichlet fields ([`Field`]) store interior values only;
//!   the boundary value is implicitly zero. Fields with genuine boundary
//!   data (liftings, harmonic samples) are [`ExtendedField`]s.
//! * The discrete `L^2` product weighs nodes by the cell volume `∏_a h_a`;
//!   boundary integrals weigh face nodes by the transverse cell area
//!   `∏_{b≠axis} h_b` (in 1D that empty product is 1).
//! * The discrete outward normal derivative at a face node uses the
//!   second-order one-sided stencil `(3 u_0 - 4 u_1 + u_2) / (2 h)` along
//!   the inward axis, sign-flipped to point outward; `u_1`, `u_2` are the
//!   first two interior nodes behind the face.

use crate::scalar::Scalar;
use crate::{Error, Result};

/// Uniform tensor-product grid over a box in dimension 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<S> {
    bounds: Vec<(S, S)>,
    cells: Vec<usize>,
}

/// Which side of an axis a face lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Low,
    High,
}

/// One open face of the box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    pub axis: usize,
    pub side: Side,
}

/// Reference to a lattice node from an interior node's neighborhood.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRef {
    Interior(usize),
    Boundary(usize),
}

/// Validated grid constructor.
///
/// Requires dimension 1 or 2, finite bounds with positive extent, and at
/// least 4 interior nodes per axis (5 cells), the minimum the one-sided
/// boundary stencils need.
pub fn build_grid<S: Scalar>(bounds: &[(S, S)], cells: &[usize]) -> Result<Grid<S>> {
    if bounds.is_empty() || bounds.len() > 2 {
        return Err(Error::Config(format!("grid dimension must be 1 or 2, got {}", bounds.len())));
    }
    if bounds.len() != cells.len() {
        return Err(Error::Config("bounds and cell counts must have the same length".into()));
    }
    for (a, &(lo, hi)) in bounds.iter().enumerate() {
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::Config(format!("axis {a}: bounds must be finite with low < high")));
        }
        if cells[a] < 5 {
            return Err(Error::Config(format!(
                "axis {a}: at least 5 cells (4 interior nodes) required, got {}",
                cells[a]
            )));
        }
    }
    Ok(Grid { bounds: bounds.to_vec(), cells: cells.to_vec() })
}

impl<S: Scalar> Grid<S> {
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(S, S)] {
        &self.bounds
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Grid spacing along `axis`.
    pub fn spacing(&self, axis: usize) -> S {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / S::from_usize(self.cells[axis]).expect("cell count fits scalar")
    }

    /// Interior nodes along `axis`.
    pub fn interior_len(&self, axis: usize) -> usize {
        self.cells[axis] - 1
    }

    /// Total interior node count.
    pub fn n_interior(&self) -> usize {
        (0..self.dim()).map(|a| self.interior_len(a)).product()
    }

    /// Total boundary node count (open faces, corners excluded).
    pub fn n_boundary(&self) -> usize {
        (0..self.dim())
            .map(|a| 2 * (0..self.dim()).filter(|b| *b != a).map(|b| self.interior_len(b)).product::<usize>())
            .sum()
    }

    /// Volume of one cell, the weight of the discrete `L^2` product.
    pub fn cell_volume(&self) -> S {
        (0..self.dim()).map(|a| self.spacing(a)).fold(S::one(), |p, h| p * h)
    }

    /// Euclidean diameter of the box.
    pub fn diameter(&self) -> S {
        (0..self.dim())
            .map(|a| {
                let (lo, hi) = self.bounds[a];
                (hi - lo) * (hi - lo)
            })
            .fold(S::zero(), |s, d| s + d)
            .sqrt()
    }

    /// Linear index of the interior node with lattice multi-index `multi`
    /// (entries in `1..cells_a`).
    pub fn interior_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.dim());
        let mut idx = 0;
        for a in 0..self.dim() {
            debug_assert!(multi[a] >= 1 && multi[a] < self.cells[a]);
            idx = idx * self.interior_len(a) + (multi[a] - 1);
        }
        idx
    }

    /// Lattice multi-index of the interior node `idx` (entries in `1..cells_a`).
    pub fn interior_multi(&self, idx: usize) -> Vec<usize> {
        let mut rem = idx;
        let mut multi = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            let n = self.interior_len(a);
            multi[a] = rem % n + 1;
            rem /= n;
        }
        debug_assert_eq!(rem, 0);
        multi
    }

    /// Coordinates of the interior node `idx`.
    pub fn interior_coords(&self, idx: usize) -> Vec<S> {
        let multi = self.interior_multi(idx);
        (0..self.dim())
            .map(|a| self.bounds[a].0 + S::from_usize(multi[a]).expect("index fits scalar") * self.spacing(a))
            .collect()
    }

    /// Neighbor of interior node `idx` one step along `axis` in direction
    /// `dir` (±1). A step onto the lattice boundary yields the boundary node
    /// of the corresponding open face; from an interior node this can never
    /// land on a corner.
    pub fn neighbor(&self, idx: usize, axis: usize, dir: i8) -> NodeRef {
        let mut multi = self.interior_multi(idx);
        let i = multi[axis] as isize + dir as isize;
        if i == 0 {
            NodeRef::Boundary(self.boundary_index(Face { axis, side: Side::Low }, &multi))
        } else if i == self.cells[axis] as isize {
            NodeRef::Boundary(self.boundary_index(Face { axis, side: Side::High }, &multi))
        } else {
            multi[axis] = i as usize;
            NodeRef::Interior(self.interior_index(&multi))
        }
    }

    /// Linear boundary index of the face node whose transverse lattice
    /// multi-index agrees with `multi` (the `axis` entry of `multi` is
    /// ignored).
    pub fn boundary_index(&self, face: Face, multi: &[usize]) -> usize {
        let mut offset = 0;
        for a in 0..self.dim() {
            let face_len: usize =
                (0..self.dim()).filter(|b| *b != a).map(|b| self.interior_len(b)).product();
            for side in [Side::Low, Side::High] {
                if a == face.axis && side == face.side {
                    let mut within = 0;
                    for b in 0..self.dim() {
                        if b != face.axis {
                            within = within * self.interior_len(b) + (multi[b] - 1);
                        }
                    }
                    return offset + within;
                }
                offset += face_len;
            }
        }
        unreachable!("face axis validated by construction")
    }

    /// Face, transverse multi-index and coordinates of boundary node `bidx`.
    pub fn boundary_node(&self, bidx: usize) -> (Face, Vec<usize>, Vec<S>) {
        let mut rem = bidx;
        for a in 0..self.dim() {
            let face_len: usize =
                (0..self.dim()).filter(|b| *b != a).map(|b| self.interior_len(b)).product();
            for side in [Side::Low, Side::High] {
                if rem < face_len {
                    let mut multi = vec![0usize; self.dim()];
                    let mut r = rem;
                    for b in (0..self.dim()).rev() {
                        if b != a {
                            let n = self.interior_len(b);
                            multi[b] = r % n + 1;
                            r /= n;
                        }
                    }
                    multi[a] = if side == Side::Low { 0 } else { self.cells[a] };
                    let coords = (0..self.dim())
                        .map(|b| {
                            self.bounds[b].0
                                + S::from_usize(multi[b]).expect("index fits scalar") * self.spacing(b)
                        })
                        .collect();
                    return (Face { axis: a, side }, multi, coords);
                }
                rem -= face_len;
            }
        }
        panic!("boundary index {bidx} out of range");
    }

    /// Surface measure carried by boundary node `bidx`: the product of the
    /// spacings transverse to its face.
    pub fn surface_measure(&self, bidx: usize) -> S {
        let (face, _, _) = self.boundary_node(bidx);
        (0..self.dim()).filter(|a| *a != face.axis).map(|a| self.spacing(a)).fold(S::one(), |p, h| p * h)
    }

    /// The two interior nodes directly behind boundary node `bidx` along the
    /// inward normal, nearest first.
    pub fn inward_neighbors(&self, bidx: usize) -> (usize, usize) {
        let (face, mut multi, _) = self.boundary_node(bidx);
        let (first, second) = match face.side {
            Side::Low => (1, 2),
            Side::High => (self.cells[face.axis] - 1, self.cells[face.axis] - 2),
        };
        multi[face.axis] = first;
        let i1 = self.interior_index(&multi);
        multi[face.axis] = second;
        let i2 = self.interior_index(&multi);
        (i1, i2)
    }
}

/// Whether a mask selects interior nodes or boundary nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Interior,
    Boundary,
}

/// Node subset of a grid, over either the interior or the boundary
/// enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    kind: MaskKind,
    bits: Vec<bool>,
}

impl Mask {
    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Indices selected by the mask, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    /// Complement within the same enumeration.
    pub fn complement(&self) -> Mask {
        Mask { kind: self.kind, bits: self.bits.iter().map(|b| !b).collect() }
    }

    /// Set union; both masks must live over the same enumeration.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.kind != other.kind || self.bits.len() != other.bits.len() {
            return Err(Error::Mask("union of masks over different enumerations".into()));
        }
        Ok(Mask {
            kind: self.kind,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }
}

/// Geometric region selecting nodes.
#[derive(Clone, Debug, PartialEq)]
pub enum Region<S> {
    /// Every node of the enumeration.
    All,
    /// Open Euclidean ball.
    Ball { center: Vec<S>, radius: S },
    /// Closed axis-aligned box.
    Box { bounds: Vec<(S, S)> },
    /// Nodes with `min < dist(x, ∂Ω) < max`; pass infinity for an
    /// unbounded band.
    BoundaryDistance { min: S, max: S },
    /// Union of open faces; boundary masks only.
    Faces(Vec<Face>),
}

/// Distance from a point to the boundary of the grid's box.
pub fn boundary_distance<S: Scalar>(grid: &Grid<S>, coords: &[S]) -> S {
    let mut d = S::infinity();
    for (a, &(lo, hi)) in grid.bounds().iter().enumerate() {
        let da = (coords[a] - lo).min(hi - coords[a]);
        if da < d {
            d = da;
        }
    }
    d
}

/// Builds a node mask from a geometric region.
///
/// Fails on an empty selection and on kind mismatches (face regions make no
/// sense for interior masks).
pub fn make_mask<S: Scalar>(grid: &Grid<S>, region: &Region<S>, kind: MaskKind) -> Result<Mask> {
    let contains_point = |coords: &[S]| -> bool {
        match region {
            Region::All => true,
            Region::Ball { center, radius } => {
                let d2 = coords
                    .iter()
                    .zip(center)
                    .map(|(&x, &c)| (x - c) * (x - c))
                    .fold(S::zero(), |s, d| s + d);
                d2 < *radius * *radius
            }
            Region::Box { bounds } => coords
                .iter()
                .zip(bounds)
                .all(|(&x, &(lo, hi))| x >= lo && x <= hi),
            Region::BoundaryDistance { min, max } => {
                let d = boundary_distance(grid, coords);
                d > *min && d < *max
            }
            Region::Faces(_) => false,
        }
    };
    let bits: Vec<bool> = match (kind, region) {
        (MaskKind::Interior, Region::Faces(_)) => {
            return Err(Error::Mask("face regions select boundary nodes only".into()));
        }
        (MaskKind::Interior, _) => {
            (0..grid.n_interior()).map(|i| contains_point(&grid.interior_coords(i))).collect()
        }
        (MaskKind::Boundary, Region::Faces(faces)) => (0..grid.n_boundary())
            .map(|b| {
                let (face, _, _) = grid.boundary_node(b);
                faces.contains(&face)
            })
            .collect(),
        (MaskKind::Boundary, _) => {
            (0..grid.n_boundary()).map(|b| contains_point(&grid.boundary_node(b).2)).collect()
        }
    };
    let mask = Mask { kind, bits };
    if mask.is_empty() {
        return Err(Error::Mask("region selects no nodes at this resolution".into()));
    }
    Ok(mask)
}

/// Mask from an arbitrary coordinate predicate; same validation as
/// [`make_mask`].
pub fn mask_from_fn<S: Scalar>(
    grid: &Grid<S>,
    kind: MaskKind,
    mut pred: impl FnMut(&[S]) -> bool,
) -> Result<Mask> {
    let bits: Vec<bool> = match kind {
        MaskKind::Interior => {
            (0..grid.n_interior()).map(|i| pred(&grid.interior_coords(i))).collect()
        }
        MaskKind::Boundary => {
            (0..grid.n_boundary()).map(|b| pred(&grid.boundary_node(b).2)).collect()
        }
    };
    let mask = Mask { kind, bits };
    if mask.is_empty() {
        return Err(Error::Mask("predicate selects no nodes".into()));
    }
    Ok(mask)
}

/// Euclidean distance between the nodes of `inner` and the nodes *outside*
/// `outer`, the discrete gauge of how compactly `inner` sits inside `outer`.
/// Boundary nodes count as outside.
pub fn mask_separation<S: Scalar>(grid: &Grid<S>, inner: &Mask, outer: &Mask) -> Result<S> {
    if inner.kind() != MaskKind::Interior || outer.kind() != MaskKind::Interior {
        return Err(Error::Mask("separation is defined for interior masks".into()));
    }
    let inner_pts: Vec<Vec<S>> = inner.indices().map(|i| grid.interior_coords(i)).collect();
    let mut outside_pts: Vec<Vec<S>> = outer
        .complement()
        .indices()
        .map(|i| grid.interior_coords(i))
        .collect();
    outside_pts.extend((0..grid.n_boundary()).map(|b| grid.boundary_node(b).2));
    let mut best = S::infinity();
    for p in &inner_pts {
        for q in &outside_pts {
            let d2 = p
                .iter()
                .zip(q)
                .map(|(&x, &y)| (x - y) * (x - y))
                .fold(S::zero(), |s, d| s + d);
            if d2 < best * best {
                best = d2.sqrt();
            }
        }
    }
    Ok(best)
}

/// Nodal field on the interior nodes, homogeneous Dirichlet on the boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<S> {
    grid: Grid<S>,
    values: Vec<S>,
}

impl<S: Scalar> Field<S> {
    pub fn zeros(grid: &Grid<S>) -> Self {
        Field { grid: grid.clone(), values: vec![S::zero(); grid.n_interior()] }
    }

    pub fn from_values(grid: &Grid<S>, values: Vec<S>) -> Result<Self> {
        if values.len() != grid.n_interior() {
            return Err(Error::GridMismatch(format!(
                "field has {} values, grid has {} interior nodes",
                values.len(),
                grid.n_interior()
            )));
        }
        Ok(Field { grid: grid.clone(), values })
    }

    pub fn from_fn(grid: &Grid<S>, mut f: impl FnMut(&[S]) -> S) -> Self {
        let values = (0..grid.n_interior()).map(|i| f(&grid.interior_coords(i))).collect();
        Field { grid: grid.clone(), values }
    }

    pub fn grid(&self) -> &Grid<S> {
        &self.grid
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn scale(&mut self, c: S) {
        for v in &mut self.values {
            *v = *v * c;
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: S, other: &Field<S>) -> Result<()> {
        self.check_same_grid(other)?;
        for (v, w) in self.values.iter_mut().zip(&other.values) {
            *v = *v + c * *w;
        }
        Ok(())
    }

    pub fn check_same_grid(&self, other: &Field<S>) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("fields live on different grids".into()));
        }
        Ok(())
    }

    /// Volume-weighted `L^2` inner product, optionally restricted to an
    /// interior mask.
    pub fn l2_inner(&self, other: &Field<S>, mask: Option<&Mask>) -> Result<S> {
        self.check_same_grid(other)?;
        check_mask(&self.grid, mask, MaskKind::Interior)?;
        let mut s = S::zero();
        for i in 0..self.values.len() {
            if mask.map_or(true, |m| m.contains(i)) {
                s = s + self.values[i] * other.values[i];
            }
        }
        Ok(s * self.grid.cell_volume())
    }

    /// Nodal gradient, centered in the interior, one-sided at nodes adjacent
    /// to the boundary. Returns one derivative field per axis.
    pub fn gradient(&self) -> Vec<Vec<S>> {
        gradient_impl(&self.grid, &self.values, None)
    }
}

fn check_mask<S: Scalar>(grid: &Grid<S>, mask: Option<&Mask>, want: MaskKind) -> Result<()> {
    if let Some(m) = mask {
        if m.kind() != want {
            return Err(Error::Mask("mask kind does not match the operand".into()));
        }
        let expect = match want {
            MaskKind::Interior => grid.n_interior(),
            MaskKind::Boundary => grid.n_boundary(),
        };
        if m.len() != expect {
            return Err(Error::Mask("mask built for a different grid".into()));
        }
    }
    Ok(())
}

/// Shared gradient kernel. With `boundary: Some(values)` the stencil is
/// centered everywhere, reading face values where a neighbor lies on the
/// boundary; with `None` (homogeneous-Dirichlet fields) nodes adjacent to
/// the boundary use the one-sided difference against the implicit zero.
fn gradient_impl<S: Scalar>(grid: &Grid<S>, values: &[S], boundary: Option<&[S]>) -> Vec<Vec<S>> {
    let n = grid.n_interior();
    let mut out = vec![vec![S::zero(); n]; grid.dim()];
    for i in 0..n {
        for a in 0..grid.dim() {
            let h = grid.spacing(a);
            let prev = grid.neighbor(i, a, -1);
            let next = grid.neighbor(i, a, 1);
            let two = S::lit(2.0);
            out[a][i] = match (prev, next, boundary) {
                (NodeRef::Interior(p), NodeRef::Interior(q), _) => {
                    (values[q] - values[p]) / (two * h)
                }
                (NodeRef::Boundary(p), NodeRef::Interior(q), Some(bd)) => {
                    (values[q] - bd[p]) / (two * h)
                }
                (NodeRef::Interior(p), NodeRef::Boundary(q), Some(bd)) => {
                    (bd[q] - values[p]) / (two * h)
                }
                (NodeRef::Boundary(_), NodeRef::Interior(_), None) => values[i] / h,
                (NodeRef::Interior(_), NodeRef::Boundary(_), None) => -values[i] / h,
                (NodeRef::Boundary(_), NodeRef::Boundary(_), _) => {
                    // Needs fewer than 3 interior nodes on the axis, which
                    // build_grid rules out.
                    unreachable!("grid resolution admits no doubly-boundary-adjacent node")
                }
            };
        }
    }
    out
}

/// Norms available through [`discrete_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Norm<S> {
    L2,
    /// `sqrt(L2^2 + ||grad||_{L2}^2)` with the gradient convention of
    /// [`Field::gradient`].
    H1,
    /// `L^p` with `p >= 1`.
    Lp(S),
    LInf,
}

/// Volume-weighted norm of a field, optionally over an interior mask.
pub fn discrete_norm<S: Scalar>(field: &Field<S>, norm: Norm<S>, mask: Option<&Mask>) -> Result<S> {
    check_mask(field.grid(), mask, MaskKind::Interior)?;
    let vol = field.grid().cell_volume();
    let selected = |i: usize| mask.map_or(true, |m| m.contains(i));
    match norm {
        Norm::L2 => {
            let mut s = S::zero();
            for (i, &v) in field.values().iter().enumerate() {
                if selected(i) {
                    s = s + v * v;
                }
            }
            Ok((s * vol).sqrt())
        }
        Norm::H1 => {
            let l2 = discrete_norm(field, Norm::L2, mask)?;
            let grads = field.gradient();
            let mut s = S::zero();
            for i in 0..field.values().len() {
                if selected(i) {
                    for g in &grads {
                        s = s + g[i] * g[i];
                    }
                }
            }
            Ok((l2 * l2 + s * vol).sqrt())
        }
        Norm::Lp(p) => {
            if p < S::one() {
                return Err(Error::Domain(format!("Lp norm needs p >= 1, got {p}")));
            }
            let mut s = S::zero();
            for (i, &v) in field.values().iter().enumerate() {
                if selected(i) {
                    s = s + v.abs().powf(p);
                }
            }
            Ok((s * vol).powf(S::one() / p))
        }
        Norm::LInf => {
            let mut m = S::zero();
            for (i, &v) in field.values().iter().enumerate() {
                if selected(i) && v.abs() > m {
                    m = v.abs();
                }
            }
            Ok(m)
        }
    }
}

/// Nodal data on the boundary enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryData<S> {
    grid: Grid<S>,
    values: Vec<S>,
}

impl<S: Scalar> BoundaryData<S> {
    pub fn zeros(grid: &Grid<S>) -> Self {
        BoundaryData { grid: grid.clone(), values: vec![S::zero(); grid.n_boundary()] }
    }

    pub fn from_values(grid: &Grid<S>, values: Vec<S>) -> Result<Self> {
        if values.len() != grid.n_boundary() {
            return Err(Error::GridMismatch(format!(
                "boundary data has {} values, grid has {} boundary nodes",
                values.len(),
                grid.n_boundary()
            )));
        }
        Ok(BoundaryData { grid: grid.clone(), values })
    }

    pub fn from_fn(grid: &Grid<S>, mut f: impl FnMut(&[S]) -> S) -> Self {
        let values = (0..grid.n_boundary()).map(|b| f(&grid.boundary_node(b).2)).collect();
        BoundaryData { grid: grid.clone(), values }
    }

    pub fn grid(&self) -> &Grid<S> {
        &self.grid
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    /// Surface-measure-weighted pairing `Σ_b u_b v_b dσ_b`, optionally over
    /// a boundary mask.
    pub fn pair(&self, other: &BoundaryData<S>, mask: Option<&Mask>) -> Result<S> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("boundary data on different grids".into()));
        }
        check_mask(&self.grid, mask, MaskKind::Boundary)?;
        let mut s = S::zero();
        for b in 0..self.values.len() {
            if mask.map_or(true, |m| m.contains(b)) {
                s = s + self.values[b] * other.values[b] * self.grid.surface_measure(b);
            }
        }
        Ok(s)
    }

    /// `L^2(Γ)` norm with the surface measure, optionally over a mask.
    pub fn l2_norm(&self, mask: Option<&Mask>) -> Result<S> {
        Ok(self.pair(self, mask)?.sqrt())
    }

    /// Zeroes every value outside the mask.
    pub fn restricted(&self, mask: &Mask) -> Result<BoundaryData<S>> {
        check_mask(&self.grid, Some(mask), MaskKind::Boundary)?;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(b, &v)| if mask.contains(b) { v } else { S::zero() })
            .collect();
        Ok(BoundaryData { grid: self.grid.clone(), values })
    }
}

/// Outward normal derivative of a homogeneous-Dirichlet field:
/// `(-4 u_1 + u_2) / (2h)` with `u_1`, `u_2` the first two interior nodes
/// along the inward normal (the face value itself is zero). Second-order
/// accurate for smooth extensions. With a mask, values outside it are zero.
pub fn trace_neumann<S: Scalar>(field: &Field<S>, mask: Option<&Mask>) -> Result<BoundaryData<S>> {
    let grid = field.grid();
    check_mask(grid, mask, MaskKind::Boundary)?;
    let mut values = vec![S::zero(); grid.n_boundary()];
    for (b, value) in values.iter_mut().enumerate() {
        if let Some(m) = mask {
            if !m.contains(b) {
                continue;
            }
        }
        let (face, _, _) = grid.boundary_node(b);
        let (i1, i2) = grid.inward_neighbors(b);
        let h = grid.spacing(face.axis);
        *value = (field.values()[i2] - S::lit(4.0) * field.values()[i1]) / (S::lit(2.0) * h);
    }
    Ok(BoundaryData { grid: grid.clone(), values })
}

/// `L^2` norm of a nodal gradient (one derivative slice per axis), weighted
/// by the cell volume, optionally over an interior mask.
pub fn gradient_l2_norm<S: Scalar>(
    grid: &Grid<S>,
    grads: &[Vec<S>],
    mask: Option<&Mask>,
) -> Result<S> {
    check_mask(grid, mask, MaskKind::Interior)?;
    let mut s = S::zero();
    for i in 0..grid.n_interior() {
        if mask.map_or(true, |m| m.contains(i)) {
            for g in grads {
                s = s + g[i] * g[i];
            }
        }
    }
    Ok((s * grid.cell_volume()).sqrt())
}

/// Field with genuine boundary values: liftings of boundary inputs and
/// discrete-harmonic samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedField<S> {
    pub interior: Field<S>,
    pub boundary: BoundaryData<S>,
}

impl<S: Scalar> ExtendedField<S> {
    pub fn from_fn(grid: &Grid<S>, mut f: impl FnMut(&[S]) -> S) -> Self {
        ExtendedField {
            interior: Field::from_fn(grid, &mut f),
            boundary: BoundaryData::from_fn(grid, f),
        }
    }

    pub fn grid(&self) -> &Grid<S> {
        self.interior.grid()
    }

    /// Nodal gradient, centered on every interior node; neighbors on the
    /// boundary contribute their face values.
    pub fn gradient(&self) -> Vec<Vec<S>> {
        gradient_impl(self.grid(), self.interior.values(), Some(self.boundary.values()))
    }

    /// Outward normal derivative using the face value and the two interior
    /// nodes behind it: `(3 u_0 - 4 u_1 + u_2) / (2h)`.
    pub fn trace_neumann(&self) -> BoundaryData<S> {
        let grid = self.grid().clone();
        let mut values = vec![S::zero(); grid.n_boundary()];
        for (b, value) in values.iter_mut().enumerate() {
            let (face, _, _) = grid.boundary_node(b);
            let (i1, i2) = grid.inward_neighbors(b);
            let h = grid.spacing(face.axis);
            let u0 = self.boundary.values()[b];
            let u1 = self.interior.values()[i1];
            let u2 = self.interior.values()[i2];
            *value = (S::lit(3.0) * u0 - S::lit(4.0) * u1 + u2) / (S::lit(2.0) * h);
        }
        BoundaryData { grid, values }
    }

    /// `L^2` norm of the interior part over a mask, plus the gradient-aware
    /// `H^1`; boundary values only affect the gradient near the faces.
    pub fn norm(&self, norm: Norm<S>, mask: Option<&Mask>) -> Result<S> {
        match norm {
            Norm::H1 => {
                let l2 = discrete_norm(&self.interior, Norm::L2, mask)?;
                let grads = self.gradient();
                let vol = self.grid().cell_volume();
                let mut s = S::zero();
                for i in 0..self.interior.values().len() {
                    if mask.map_or(true, |m| m.contains(i)) {
                        for g in &grads {
                            s = s + g[i] * g[i];
                        }
                    }
                }
                Ok((l2 * l2 + s * vol).sqrt())
            }
            other => discrete_norm(&self.interior, other, mask),
        }
    }
}
