//! Hierarchical B-spline spaces on nested dyadic tensor-product levels.
//!
//! The refined domains are stored as sets of element indices at their own
//! level, so all domain algebra is exact. Active elements and active basis
//! functions follow the usual selection rules: an element is active when it
//! lies in its level's domain but not the next one, and a function is active
//! when its support lies in the level's domain but not the next one.
//!
//! Support overlap of two functions is understood in the open sense
//! (intersecting interiors). Supports that only touch along a face carry no
//! common mass: every basis function of positive degree vanishes on its
//! support boundary, so the pair's product integrals and quadrature values
//! are both exactly zero and the pair can be ignored everywhere.

use crate::splines::{KnotVector, SplineError, TensorSpace};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::collections::HashMap;
use thiserror::Error;

/// Element or basis-function multi-index; only the first `d` entries are used.
pub type MIdx = [u32; 3];

/// Hierarchical basis-function identifier `(level, multi-index)`.
pub type FnKey = (usize, MIdx);

const MAX_UNIVARIATE: u64 = 1 << 20;
const MAX_LEVEL_DIM: u64 = 1 << 42;

#[derive(Error, Debug, PartialEq)]
pub enum MeshError {
    #[error("dimension {0} not supported (expected 1, 2 or 3)")]
    BadDimension(usize),
    #[error("tensor level {level} dimension exceeds the configured cap")]
    DimensionCap { level: usize },
    #[error("marked element (level {level}, {index:?}) is not active")]
    NotActive { level: usize, index: MIdx },
    #[error("refinement would exceed the finest level {max}; extend the hierarchy first")]
    BeyondFinestLevel { max: usize },
    #[error("Doerfler parameter theta={0} outside (0, 1]")]
    BadTheta(f64),
    #[error("admissibility class {0} must be at least 2")]
    BadAdmissibility(usize),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

fn pack(idx: MIdx) -> u64 {
    ((idx[0] as u64) << 42) | ((idx[1] as u64) << 21) | idx[2] as u64
}

fn unpack(key: u64) -> MIdx {
    [(key >> 42) as u32 & 0x1f_ffff, (key >> 21) as u32 & 0x1f_ffff, key as u32 & 0x1f_ffff]
}

/// Nested sequence of tensor-product spline spaces of a fixed degree.
#[derive(Debug, Clone)]
pub struct SpaceHierarchy {
    dim: usize,
    degree: usize,
    levels: Vec<TensorSpace>,
}

impl SpaceHierarchy {
    /// Builds `max_level + 1` nested levels from `base_elements` elements per
    /// direction at level 0.
    pub fn build(
        degree: usize,
        dim: usize,
        base_elements: &[usize],
        max_level: usize,
    ) -> Result<Self, MeshError> {
        if !(1..=3).contains(&dim) || base_elements.len() != dim {
            return Err(MeshError::BadDimension(dim));
        }
        let base = TensorSpace::new(
            0,
            base_elements
                .iter()
                .map(|&n| KnotVector::open_uniform(degree, n))
                .collect::<Result<_, _>>()?,
        );
        let mut levels = vec![base];
        for _ in 0..max_level {
            levels.push(levels.last().unwrap().refined());
        }
        for ts in &levels {
            check_caps(ts)?;
        }
        Ok(Self { dim, degree, levels })
    }

    /// Appends one more dyadic level.
    pub fn extend(&mut self) -> Result<(), MeshError> {
        let next = self.levels.last().unwrap().refined();
        check_caps(&next)?;
        self.levels.push(next);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of levels (finest level index plus one).
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &TensorSpace {
        &self.levels[l]
    }

    /// Per-direction element count at level `l`.
    pub fn elements_at(&self, l: usize, k: usize) -> u32 {
        self.levels[l].direction(k).num_elements() as u32
    }

    /// Element-index support box of univariate function `i` in direction `k`
    /// at level `l` (inclusive).
    pub fn support_1d(&self, l: usize, k: usize, i: u32) -> (u32, u32) {
        let (lo, hi) = self.levels[l].direction(k).support(i as usize);
        (lo as u32, hi as u32)
    }
}

fn check_caps(ts: &TensorSpace) -> Result<(), MeshError> {
    let mut total = 1u64;
    for kv in ts.directions() {
        let n = kv.num_basis() as u64;
        if n > MAX_UNIVARIATE {
            return Err(MeshError::DimensionCap { level: ts.level() });
        }
        total = total.saturating_mul(n);
    }
    if total > MAX_LEVEL_DIM {
        return Err(MeshError::DimensionCap { level: ts.level() });
    }
    Ok(())
}

/// Hierarchical mesh: nested refined domains and the active elements they
/// induce. Domain `l` is kept as the set of level-`l` element indices it is
/// made of.
#[derive(Debug, Clone)]
pub struct HierarchicalMesh {
    dim: usize,
    admissibility: usize,
    domains: Vec<BTreeSet<MIdx>>,
    active: Vec<BTreeSet<MIdx>>,
}

impl HierarchicalMesh {
    /// Mesh whose only domain is the whole of level 0.
    pub fn initial(hierarchy: &SpaceHierarchy, admissibility: usize) -> Result<Self, MeshError> {
        if admissibility < 2 {
            return Err(MeshError::BadAdmissibility(admissibility));
        }
        let dim = hierarchy.dim();
        let mut root = BTreeSet::new();
        let counts: Vec<u32> = (0..dim).map(|k| hierarchy.elements_at(0, k)).collect();
        for e in iter_box(&counts.iter().map(|&n| (0, n - 1)).collect::<Vec<_>>()) {
            root.insert(e);
        }
        Ok(Self {
            dim,
            admissibility,
            domains: vec![root.clone()],
            active: vec![root],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn admissibility(&self) -> usize {
        self.admissibility
    }

    /// Number of stored domain levels (`L + 1`).
    pub fn num_levels(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, l: usize) -> &BTreeSet<MIdx> {
        &self.domains[l]
    }

    /// Active elements of level `l` in lexicographic order.
    pub fn active_elements(&self, l: usize) -> &BTreeSet<MIdx> {
        &self.active[l]
    }

    /// All active elements as `(level, index)` in (level, lexicographic) order.
    pub fn all_active(&self) -> impl Iterator<Item = (usize, MIdx)> + '_ {
        self.active
            .iter()
            .enumerate()
            .flat_map(|(l, v)| v.iter().map(move |&e| (l, e)))
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().map(BTreeSet::len).sum()
    }

    pub fn is_active(&self, l: usize, e: MIdx) -> bool {
        l < self.active.len() && self.active[l].contains(&e)
    }

    /// True when all the 2^d children of `(l, e)` lie in domain `l + 1`.
    fn children_refined(&self, l: usize, e: MIdx) -> bool {
        if l + 1 >= self.domains.len() {
            return false;
        }
        children(e, self.dim).all(|c| self.domains[l + 1].contains(&c))
    }

    /// Rebuilds the active sets from the domains; used when domains are
    /// constructed by hand.
    #[cfg(test)]
    pub(crate) fn from_domains(
        dim: usize,
        admissibility: usize,
        domains: Vec<BTreeSet<MIdx>>,
    ) -> Self {
        let mut mesh = Self { dim, admissibility, domains, active: Vec::new() };
        mesh.active = mesh
            .domains
            .iter()
            .enumerate()
            .map(|(l, dom)| {
                dom.iter()
                    .copied()
                    .filter(|&e| !mesh.children_refined(l, e))
                    .collect()
            })
            .collect();
        mesh
    }

    /// Splits an active element: its children join domain and active set of
    /// level `l + 1` and the element itself leaves the active set.
    fn split(&mut self, l: usize, e: MIdx) {
        if self.domains.len() <= l + 1 {
            self.domains.push(BTreeSet::new());
            self.active.push(BTreeSet::new());
        }
        for c in children(e, self.dim) {
            self.domains[l + 1].insert(c);
            self.active[l + 1].insert(c);
        }
        self.active[l].remove(&e);
    }

    /// Measure-based tiling check on dyadic indices: active elements cover the
    /// domain exactly once. Exhaustive at the finest level, intended for tests.
    pub fn tiles_domain(&self, hierarchy: &SpaceHierarchy) -> bool {
        let finest = self.domains.len() - 1;
        let counts: Vec<u32> = (0..self.dim).map(|k| hierarchy.elements_at(finest, k)).collect();
        let mut covered: BTreeSet<MIdx> = BTreeSet::new();
        for (l, e) in self.all_active() {
            let s = finest - l;
            let box_at: Vec<(u32, u32)> = (0..self.dim)
                .map(|k| (e[k] << s, ((e[k] + 1) << s) - 1))
                .collect();
            for c in iter_box(&box_at) {
                if !covered.insert(c) {
                    return false;
                }
            }
        }
        covered.len() as u64 == counts.iter().map(|&n| n as u64).product::<u64>()
    }
}

/// Iterates over the elements of an inclusive per-direction index box in
/// lexicographic order. Unused trailing directions must be `(0, 0)`.
fn iter_box(ranges: &[(u32, u32)]) -> impl Iterator<Item = MIdx> + '_ {
    let full: Vec<(u32, u32)> = (0..3)
        .map(|k| ranges.get(k).copied().unwrap_or((0, 0)))
        .collect();
    let sizes: Vec<u64> = full.iter().map(|&(lo, hi)| (hi - lo + 1) as u64).collect();
    let total = sizes[0] * sizes[1] * sizes[2];
    (0..total).map(move |t| {
        let i2 = t % sizes[2];
        let i1 = (t / sizes[2]) % sizes[1];
        let i0 = t / (sizes[2] * sizes[1]);
        [full[0].0 + i0 as u32, full[1].0 + i1 as u32, full[2].0 + i2 as u32]
    })
}

fn children(e: MIdx, dim: usize) -> impl Iterator<Item = MIdx> {
    (0..1u32 << dim).map(move |mask| {
        let mut c = [0u32; 3];
        for k in 0..3 {
            c[k] = if k < dim { 2 * e[k] + ((mask >> k) & 1) } else { 0 };
        }
        c
    })
}

/// Hierarchical B-spline basis: the active functions of every level.
#[derive(Debug, Clone)]
pub struct HierarchicalBasis {
    dim: usize,
    ids: Vec<FnKey>,
    per_level: Vec<BTreeSet<MIdx>>,
    positions: HashMap<FnKey, u32>,
}

impl HierarchicalBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Identifiers in (level, lexicographic) order; this is the global
    /// row/column ordering used by all assembled matrices.
    pub fn ids(&self) -> &[FnKey] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.per_level.len()
    }

    pub fn active_at(&self, l: usize) -> &BTreeSet<MIdx> {
        &self.per_level[l]
    }

    pub fn is_active(&self, l: usize, i: MIdx) -> bool {
        l < self.per_level.len() && self.per_level[l].contains(&i)
    }

    /// Position of an identifier in [`ids`](Self::ids).
    pub fn position(&self, l: usize, i: MIdx) -> Option<usize> {
        self.positions.get(&(l, i)).map(|&p| p as usize)
    }

    /// Support box of an active function as level-`l` element ranges.
    pub fn support_box(&self, hierarchy: &SpaceHierarchy, l: usize, i: MIdx) -> Vec<(u32, u32)> {
        (0..self.dim).map(|k| hierarchy.support_1d(l, k, i[k])).collect()
    }
}

/// Active functions of the hierarchical basis: support inside the level's
/// domain but not inside the next one.
pub fn compute_active_basis(
    mesh: &HierarchicalMesh,
    hierarchy: &SpaceHierarchy,
) -> HierarchicalBasis {
    let dim = mesh.dim();
    let degree = hierarchy.degree() as u32;
    let mut per_level: Vec<BTreeSet<MIdx>> = Vec::with_capacity(mesh.num_levels());
    for l in 0..mesh.num_levels() {
        let mut active = BTreeSet::new();
        // Candidate functions are those nonzero on some element of the
        // domain; scanning the whole tensor basis would be wasteful.
        let mut candidates: BTreeSet<MIdx> = BTreeSet::new();
        let counts: Vec<u32> = (0..dim).map(|k| hierarchy.elements_at(l, k)).collect();
        for &e in mesh.domain(l) {
            let ranges: Vec<(u32, u32)> = (0..dim)
                .map(|k| (e[k], (e[k] + degree).min(counts[k] + degree - 1)))
                .collect();
            candidates.extend(iter_box(&ranges));
        }
        for i in candidates {
            let boxes: Vec<(u32, u32)> = (0..dim).map(|k| hierarchy.support_1d(l, k, i[k])).collect();
            if !box_in_domain(&boxes, mesh.domain(l), 0) || box_in_next_domain(mesh, l, &boxes) {
                continue;
            }
            active.insert(i);
        }
        per_level.push(active);
    }
    let mut ids = Vec::new();
    for (l, set) in per_level.iter().enumerate() {
        ids.extend(set.iter().map(|&i| (l, i)));
    }
    let positions = ids.iter().enumerate().map(|(p, &k)| (k, p as u32)).collect();
    HierarchicalBasis { dim, ids, per_level, positions }
}

fn box_in_domain(boxes: &[(u32, u32)], domain: &BTreeSet<MIdx>, shift: usize) -> bool {
    let shifted: Vec<(u32, u32)> = boxes
        .iter()
        .map(|&(lo, hi)| (lo << shift, ((hi + 1) << shift) - 1))
        .collect();
    iter_box(&shifted).all(|e| domain.contains(&e))
}

fn box_in_next_domain(mesh: &HierarchicalMesh, l: usize, boxes: &[(u32, u32)]) -> bool {
    if l + 1 >= mesh.num_levels() {
        return false;
    }
    box_in_domain(boxes, mesh.domain(l + 1), 1)
}

/// Partition of the hierarchical basis by interaction level: group `n` holds
/// the active functions whose finest overlapping active function lives on
/// level `n`.
#[derive(Debug, Clone)]
pub struct Classification {
    /// Interaction level per basis position (aligned with `basis.ids()`).
    levels: Vec<u8>,
    /// `groups[n][l]` = active level-`l` multi-indices with interaction level `n`.
    groups: Vec<Vec<Vec<MIdx>>>,
}

impl Classification {
    pub fn interaction_level(&self, position: usize) -> usize {
        self.levels[position] as usize
    }

    pub fn num_levels(&self) -> usize {
        self.groups.len()
    }

    /// Multi-indices of the level-`l` members of group `n`, sorted.
    pub fn group(&self, n: usize, l: usize) -> &[MIdx] {
        &self.groups[n][l]
    }

    pub fn group_size(&self, n: usize) -> usize {
        self.groups[n].iter().map(Vec::len).sum()
    }

    pub fn group_is_empty(&self, n: usize) -> bool {
        self.groups[n].iter().all(Vec::is_empty)
    }

    /// Iterates the group as `(level, multi-index)` in (level, lex) order.
    pub fn group_ids(&self, n: usize) -> impl Iterator<Item = FnKey> + '_ {
        self.groups[n]
            .iter()
            .enumerate()
            .flat_map(|(l, v)| v.iter().map(move |&i| (l, i)))
    }
}

/// Per-level union of active-function support boxes, one sorted packed set of
/// element indices per level. Shared by classification and admissibility.
fn support_masks(basis: &HierarchicalBasis, hierarchy: &SpaceHierarchy) -> Vec<Vec<u64>> {
    let dim = basis.dim();
    (0..basis.num_levels())
        .map(|m| {
            let mut mask: Vec<u64> = Vec::new();
            for &i in basis.active_at(m) {
                let boxes: Vec<(u32, u32)> =
                    (0..dim).map(|k| hierarchy.support_1d(m, k, i[k])).collect();
                mask.extend(iter_box(&boxes).map(pack));
            }
            mask.sort_unstable();
            mask.dedup();
            mask
        })
        .collect()
}

/// True when the support box (level-`l` element ranges) meets the packed
/// level-`l` element set.
fn box_meets_mask(boxes: &[(u32, u32)], mask: &[u64], dim: usize) -> bool {
    if mask.is_empty() {
        return false;
    }
    // Walk rows of the box (all but the last used direction) and binary-search
    // the contiguous last-direction run.
    let last = dim - 1;
    let row_ranges: Vec<(u32, u32)> = (0..3)
        .map(|k| if k < last { boxes[k] } else { (0, 0) })
        .collect();
    let (lo, hi) = boxes[last];
    for mut row in iter_box(&row_ranges) {
        row[last] = lo;
        let a = pack(row);
        row[last] = hi;
        let b = pack(row);
        let start = mask.partition_point(|&v| v < a);
        if start < mask.len() && mask[start] <= b {
            return true;
        }
    }
    false
}

fn coarsen_mask(mask: &[u64], shift: usize) -> Vec<u64> {
    if shift == 0 {
        return mask.to_vec();
    }
    let mut out: Vec<u64> = mask
        .iter()
        .map(|&key| {
            let e = unpack(key);
            pack([e[0] >> shift, e[1] >> shift, e[2] >> shift])
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Finest level of an active function whose support overlaps the support of
/// `(l, i)`. Always at least `l`.
pub fn interaction_level(
    basis: &HierarchicalBasis,
    hierarchy: &SpaceHierarchy,
    l: usize,
    i: MIdx,
) -> usize {
    let masks = support_masks(basis, hierarchy);
    interaction_level_with(basis, hierarchy, &masks, l, i)
}

fn interaction_level_with(
    basis: &HierarchicalBasis,
    hierarchy: &SpaceHierarchy,
    masks: &[Vec<u64>],
    l: usize,
    i: MIdx,
) -> usize {
    let dim = basis.dim();
    let boxes: Vec<(u32, u32)> = (0..dim).map(|k| hierarchy.support_1d(l, k, i[k])).collect();
    for m in (l..basis.num_levels()).rev() {
        // Work at level l: coarsening the level-m mask is exact because the
        // support box at level m is the set of descendants of its level-l box.
        let coarse = coarsen_mask(&masks[m], m - l);
        if box_meets_mask(&boxes, &coarse, dim) {
            return m;
        }
    }
    l
}

/// Groups every active function by its interaction level.
pub fn classify_basis_functions(
    basis: &HierarchicalBasis,
    hierarchy: &SpaceHierarchy,
) -> Classification {
    let num_levels = basis.num_levels();
    let masks = support_masks(basis, hierarchy);
    // Coarsened masks are shared across all functions of a level.
    let coarse: Vec<Vec<Vec<u64>>> = (0..num_levels)
        .map(|m| (0..=m).map(|l| coarsen_mask(&masks[m], m - l)).collect())
        .collect();
    let dim = basis.dim();
    let mut levels = vec![0u8; basis.len()];
    let mut groups = vec![vec![Vec::new(); num_levels]; num_levels];
    for (pos, &(l, i)) in basis.ids().iter().enumerate() {
        let boxes: Vec<(u32, u32)> = (0..dim).map(|k| hierarchy.support_1d(l, k, i[k])).collect();
        let mut nu = l;
        for m in (l..num_levels).rev() {
            if box_meets_mask(&boxes, &coarse[m][l], dim) {
                nu = m;
                break;
            }
        }
        levels[pos] = nu as u8;
        groups[nu][l].push(i);
    }
    Classification { levels, groups }
}

/// Greedy Doerfler marking: the minimal-cardinality element set whose squared
/// indicators reach `theta^2` of the total, ties broken by (level, lex) order.
pub fn dorfler_mark(
    indicators: &[((usize, MIdx), f64)],
    theta: f64,
) -> Result<Vec<(usize, MIdx)>, MeshError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(MeshError::BadTheta(theta));
    }
    let mut order: Vec<usize> = (0..indicators.len()).collect();
    order.sort_by(|&a, &b| {
        indicators[b]
            .1
            .partial_cmp(&indicators[a].1)
            .unwrap()
            .then_with(|| indicators[a].0.cmp(&indicators[b].0))
    });
    // Summing in the same descending order on both sides keeps the theta = 1
    // comparison exact.
    let total: f64 = order.iter().map(|&o| indicators[o].1 * indicators[o].1).sum();
    if total == 0.0 {
        return Ok(Vec::new());
    }
    let target = theta * theta * total;
    let mut acc = 0.0;
    let mut marked = Vec::new();
    for &o in &order {
        if acc >= target {
            break;
        }
        let (key, eta) = indicators[o];
        if eta == 0.0 {
            break;
        }
        acc += eta * eta;
        marked.push(key);
    }
    marked.sort();
    Ok(marked)
}

/// Refines every marked element and recursively the coarse neighbours needed
/// to keep the mesh admissible of class `r`.
///
/// The closure rule: before splitting a level-`l` element, every active
/// element of level `<= l - r + 1` whose closure meets the union of supports
/// of the level-`(l - r + 2)` functions that are nonzero on it is refined
/// first.
pub fn admissible_refine(
    mesh: &HierarchicalMesh,
    hierarchy: &SpaceHierarchy,
    marked: &[(usize, MIdx)],
    r: usize,
) -> Result<HierarchicalMesh, MeshError> {
    if r < 2 {
        return Err(MeshError::BadAdmissibility(r));
    }
    for &(l, e) in marked {
        if l >= mesh.num_levels() || !mesh.is_active(l, e) {
            return Err(MeshError::NotActive { level: l, index: e });
        }
    }
    let mut out = mesh.clone();
    out.admissibility = r;
    for &(l, e) in marked {
        refine_recursive(&mut out, hierarchy, l, e, r)?;
    }
    Ok(out)
}

fn refine_recursive(
    mesh: &mut HierarchicalMesh,
    hierarchy: &SpaceHierarchy,
    l: usize,
    e: MIdx,
    r: usize,
) -> Result<(), MeshError> {
    if mesh.children_refined(l, e) {
        return Ok(());
    }
    if l + 1 >= hierarchy.num_levels() {
        return Err(MeshError::BeyondFinestLevel { max: hierarchy.num_levels() - 1 });
    }
    let dim = mesh.dim();
    let degree = hierarchy.degree() as u32;
    if l + 2 >= r {
        let g = l + 2 - r; // support-extension level
        let shift = l - g;
        // Union of supports of the level-g functions nonzero on the element.
        let ext: Vec<(u32, u32)> = (0..dim)
            .map(|k| {
                let a = e[k] >> shift;
                let n = hierarchy.elements_at(g, k);
                (a.saturating_sub(degree), (a + degree).min(n - 1))
            })
            .collect();
        loop {
            let mut pending = Vec::new();
            for lp in 0..g {
                let s = g - lp;
                // Candidate coarse elements covering the extension, dilated by
                // one level-g element so face contact counts.
                let cand: Vec<(u32, u32)> = (0..dim)
                    .map(|k| {
                        let n = hierarchy.elements_at(lp, k) - 1;
                        (ext[k].0.saturating_sub(1) >> s, ((ext[k].1 + 1) >> s).min(n))
                    })
                    .collect();
                for ep in iter_box(&cand) {
                    let meets = (0..dim).all(|k| {
                        let lo = ep[k] << s;
                        let hi = ((ep[k] + 1) << s) - 1;
                        lo <= ext[k].1 + 1 && ext[k].0 <= hi + 1
                    });
                    if meets && mesh.is_active(lp, ep) {
                        pending.push((lp, ep));
                    }
                }
            }
            if pending.is_empty() {
                break;
            }
            for (lp, ep) in pending {
                refine_recursive(mesh, hierarchy, lp, ep, r)?;
            }
        }
    }
    mesh.split(l, e);
    Ok(())
}

/// Checks the class-`r` admissibility property: on every active element the
/// active functions taking nonzero value span at most `r` successive levels.
pub fn check_admissibility(
    mesh: &HierarchicalMesh,
    basis: &HierarchicalBasis,
    hierarchy: &SpaceHierarchy,
    r: usize,
) -> bool {
    let masks = support_masks(basis, hierarchy);
    for (l, e) in mesh.all_active() {
        let mut min_level = usize::MAX;
        let mut max_level = 0usize;
        for m in 0..=l.min(masks.len() - 1) {
            let a = [e[0] >> (l - m), e[1] >> (l - m), e[2] >> (l - m)];
            if masks[m].binary_search(&pack(a)).is_ok() {
                min_level = min_level.min(m);
                max_level = max_level.max(m);
            }
        }
        if min_level != usize::MAX && max_level - min_level + 1 > r {
            return false;
        }
    }
    true
}

/// Serializable snapshot of a hierarchical mesh and basis. All indices are
/// 1-based in the emitted JSON.
///
/// Schema: `{ "dim", "degree", "admissibility", "levels": [ { "level",
/// "elements_per_direction": [..], "active_elements": [[i1,..],..],
/// "active_functions": [[i1,..],..] } ] }`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeshSnapshot {
    pub dim: usize,
    pub degree: usize,
    pub admissibility: usize,
    pub levels: Vec<LevelSnapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LevelSnapshot {
    pub level: usize,
    pub elements_per_direction: Vec<u32>,
    pub active_elements: Vec<Vec<u32>>,
    pub active_functions: Vec<Vec<u32>>,
}

impl MeshSnapshot {
    pub fn capture(
        mesh: &HierarchicalMesh,
        basis: &HierarchicalBasis,
        hierarchy: &SpaceHierarchy,
    ) -> Self {
        let dim = mesh.dim();
        let levels = (0..mesh.num_levels())
            .map(|l| LevelSnapshot {
                level: l,
                elements_per_direction: (0..dim).map(|k| hierarchy.elements_at(l, k)).collect(),
                active_elements: mesh
                    .active_elements(l)
                    .iter()
                    .map(|e| (0..dim).map(|k| e[k] + 1).collect())
                    .collect(),
                active_functions: basis
                    .active_at(l)
                    .iter()
                    .map(|i| (0..dim).map(|k| i[k] + 1).collect())
                    .collect(),
            })
            .collect();
        Self {
            dim,
            degree: hierarchy.degree(),
            admissibility: mesh.admissibility(),
            levels,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis_of(mesh: &HierarchicalMesh, h: &SpaceHierarchy) -> HierarchicalBasis {
        compute_active_basis(mesh, h)
    }

    /// Brute-force support inclusion oracle for the active-function rule.
    fn oracle_active(
        h: &SpaceHierarchy,
        mesh: &HierarchicalMesh,
        l: usize,
        i: MIdx,
    ) -> bool {
        let dim = h.dim();
        let boxes: Vec<(u32, u32)> = (0..dim).map(|k| h.support_1d(l, k, i[k])).collect();
        let inside = iter_box_t(&boxes).all(|e| mesh.domain(l).contains(&e));
        let in_next = if l + 1 < mesh.num_levels() {
            let fine: Vec<(u32, u32)> = boxes.iter().map(|&(a, b)| (2 * a, 2 * b + 1)).collect();
            iter_box_t(&fine).all(|e| mesh.domain(l + 1).contains(&e))
        } else {
            false
        };
        inside && !in_next
    }

    fn iter_box_t(ranges: &[(u32, u32)]) -> impl Iterator<Item = MIdx> + '_ {
        super::iter_box(ranges)
    }

    #[test]
    fn build_hierarchy_counts() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 2).unwrap();
        assert_eq!(h.num_levels(), 3);
        assert_eq!(h.elements_at(2, 0), 16);
        assert_eq!(h.level(2).num_basis(), 18 * 18);

        let h = SpaceHierarchy::build(2, 1, &[8], 0).unwrap();
        assert_eq!(h.level(0).num_basis(), 10);

        // level-l dimension = prod_k (2^l n0_k + p)
        let h = SpaceHierarchy::build(3, 2, &[4, 8], 2).unwrap();
        for l in 0..3 {
            let expect = ((4u64 << l) + 3) * ((8u64 << l) + 3);
            assert_eq!(h.level(l).num_basis(), expect);
        }
    }

    #[test]
    fn single_level_basis_is_tensor_basis() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 0).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let basis = basis_of(&mesh, &h);
        assert_eq!(basis.len(), 36);
        assert!(mesh.tiles_domain(&h));
    }

    #[test]
    fn fully_refined_basis_is_fine_tensor_basis() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 1).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let marked: Vec<(usize, MIdx)> = mesh.all_active().collect();
        let refined = admissible_refine(&mesh, &h, &marked, 2).unwrap();
        let basis = basis_of(&refined, &h);
        assert_eq!(basis.len() as u64, h.level(1).num_basis());
        assert!(basis.ids().iter().all(|&(l, _)| l == 1));
        assert!(refined.tiles_domain(&h));
    }

    #[test]
    fn active_basis_matches_support_oracle() {
        // 1D, p = 1, n0 = 4, refine the left half.
        let h = SpaceHierarchy::build(1, 1, &[4], 1).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let marked = vec![(0usize, [0u32, 0, 0]), (0, [1, 0, 0])];
        let mesh = admissible_refine(&mesh, &h, &marked, 2).unwrap();
        let basis = basis_of(&mesh, &h);
        for l in 0..mesh.num_levels() {
            let nb = h.level(l).direction(0).num_basis() as u32;
            for i in 0..nb {
                let id = [i, 0, 0];
                assert_eq!(
                    basis.is_active(l, id),
                    oracle_active(&h, &mesh, l, id),
                    "level {l} index {i}"
                );
            }
        }
    }

    #[test]
    fn interaction_level_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let h = SpaceHierarchy::build(2, 1, &[6], 2).unwrap();
            let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
            let active: Vec<_> = mesh.all_active().collect();
            let pick = active[rng.gen_range(0..active.len())];
            let mesh = admissible_refine(&mesh, &h, &[pick], 2).unwrap();
            let basis = basis_of(&mesh, &h);
            for &(l, i) in basis.ids() {
                let brute = basis
                    .ids()
                    .iter()
                    .filter(|&&(m, j)| {
                        (0..1).all(|k| {
                            let (a1, b1) = h.support_1d(l, k, i[k]);
                            let (a2, b2) = h.support_1d(m, k, j[k]);
                            let s = mesh.num_levels() - 1;
                            let (a1, b1) = (a1 << (s - l), ((b1 + 1) << (s - l)) - 1);
                            let (a2, b2) = (a2 << (s - m), ((b2 + 1) << (s - m)) - 1);
                            a1.max(a2) <= b1.min(b2)
                        })
                    })
                    .map(|&(m, _)| m)
                    .max()
                    .unwrap();
                assert_eq!(interaction_level(&basis, &h, l, i), brute);
            }
        }
    }

    #[test]
    fn classification_partitions_basis() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 2).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let mesh = admissible_refine(&mesh, &h, &[(0, [0, 0, 0])], 2).unwrap();
        let mesh = admissible_refine(&mesh, &h, &[(1, [0, 0, 0])], 2).unwrap();
        let basis = basis_of(&mesh, &h);
        let cls = classify_basis_functions(&basis, &h);
        let total: usize = (0..cls.num_levels()).map(|n| cls.group_size(n)).sum();
        assert_eq!(total, basis.len());
        for n in 0..cls.num_levels() {
            for (l, i) in cls.group_ids(n) {
                assert!(l <= n);
                assert!(basis.is_active(l, i));
                let pos = basis.position(l, i).unwrap();
                assert_eq!(cls.interaction_level(pos), n);
                // Class-2 admissibility bound on the interaction gap.
                assert!(n - l <= 1);
            }
        }
    }

    #[test]
    fn single_level_classification_trivial() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 0).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let basis = basis_of(&mesh, &h);
        let cls = classify_basis_functions(&basis, &h);
        assert_eq!(cls.group_size(0), basis.len());
        for pos in 0..basis.len() {
            assert_eq!(cls.interaction_level(pos), 0);
        }
    }

    #[test]
    fn dorfler_basic() {
        let items = vec![
            ((0usize, [0u32, 0, 0]), 3.0),
            ((0usize, [1u32, 0, 0]), 4.0),
        ];
        let marked = dorfler_mark(&items, 0.2).unwrap();
        assert_eq!(marked, vec![(0, [1, 0, 0])]);

        // theta = 1 marks exactly the elements with nonzero indicator.
        let items = vec![
            ((0usize, [0u32, 0, 0]), 0.0),
            ((0usize, [1u32, 0, 0]), 2.0),
            ((0usize, [2u32, 0, 0]), 1.0),
        ];
        let marked = dorfler_mark(&items, 1.0).unwrap();
        assert_eq!(marked.len(), 2);

        let zero = vec![((0usize, [0u32, 0, 0]), 0.0)];
        assert!(dorfler_mark(&zero, 0.5).unwrap().is_empty());
        assert!(dorfler_mark(&zero, 0.0).is_err());
        assert!(dorfler_mark(&zero, 1.5).is_err());
    }

    #[test]
    fn dorfler_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..=12usize);
            let items: Vec<((usize, MIdx), f64)> = (0..n)
                .map(|i| ((0usize, [i as u32, 0, 0]), rng.gen_range(0.0..4.0f64)))
                .collect();
            let theta: f64 = rng.gen_range(0.05..=1.0);
            let marked = dorfler_mark(&items, theta).unwrap();
            let total: f64 = items.iter().map(|&(_, e)| e * e).sum();
            let got: f64 = marked
                .iter()
                .map(|k| items.iter().find(|(key, _)| key == k).unwrap().1.powi(2))
                .sum();
            assert!(got >= theta * theta * total - 1e-12);
            // Exhaustive minimal-cardinality search.
            let mut best = usize::MAX;
            for mask in 0..(1u32 << n) {
                let s: f64 = (0..n)
                    .filter(|&i| mask >> i & 1 == 1)
                    .map(|i| items[i].1 * items[i].1)
                    .sum();
                if s >= theta * theta * total - 1e-12 {
                    best = best.min(mask.count_ones() as usize);
                }
            }
            assert_eq!(marked.len(), best, "theta={theta} items={items:?}");
        }
    }

    #[test]
    fn refine_nothing_is_identity() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 1).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let same = admissible_refine(&mesh, &h, &[], 2).unwrap();
        assert_eq!(same.num_active(), mesh.num_active());
        assert_eq!(same.domains, mesh.domains);
    }

    #[test]
    fn refine_one_element() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 1).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let refined = admissible_refine(&mesh, &h, &[(0, [1, 1, 0])], 2).unwrap();
        assert_eq!(refined.active_elements(1).len(), 4);
        assert_eq!(refined.num_active(), 16 - 1 + 4);
        let basis = basis_of(&refined, &h);
        assert!(check_admissibility(&refined, &basis, &h, 2));
        assert!(refined.tiles_domain(&h));
    }

    #[test]
    fn refine_beyond_levels_rejected() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 0).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let err = admissible_refine(&mesh, &h, &[(0, [0, 0, 0])], 2);
        assert!(matches!(err, Err(MeshError::BeyondFinestLevel { .. })));
    }

    #[test]
    fn refine_rejects_inactive_marks() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 1).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let mesh = admissible_refine(&mesh, &h, &[(0, [0, 0, 0])], 2).unwrap();
        let err = admissible_refine(&mesh, &h, &[(0, [0, 0, 0])], 2);
        assert!(matches!(err, Err(MeshError::NotActive { .. })));
    }

    #[test]
    fn deep_corner_refinement_stays_admissible() {
        // Repeatedly refine the element containing the origin corner.
        let p = 2;
        for r in [2usize, 3] {
            let h = SpaceHierarchy::build(p, 2, &[4, 4], 6).unwrap();
            let mut mesh = HierarchicalMesh::initial(&h, r).unwrap();
            for _ in 0..6 {
                let corner = mesh
                    .all_active()
                    .find(|&(_, e)| e == [0, 0, 0])
                    .map(|(l, e)| (l, e))
                    .unwrap();
                mesh = admissible_refine(&mesh, &h, &[corner], r).unwrap();
                let basis = basis_of(&mesh, &h);
                assert!(check_admissibility(&mesh, &basis, &h, r), "r={r}");
                assert!(mesh.tiles_domain(&h));
            }
            // The corner chain has reached deep levels.
            assert!(mesh.num_levels() >= 6);
        }
    }

    #[test]
    fn monotone_domains_under_refinement() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 4).unwrap();
        let mut mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..8 {
            let active: Vec<_> = mesh.all_active().collect();
            let pick = active[rng.gen_range(0..active.len())];
            if pick.0 + 1 >= h.num_levels() {
                continue;
            }
            let next = admissible_refine(&mesh, &h, &[pick], 2).unwrap();
            for l in 0..mesh.num_levels() {
                assert!(mesh.domain(l).is_subset(next.domain(l)));
            }
            mesh = next;
        }
    }

    #[test]
    fn inadmissible_island_detected() {
        // Hand-built 1D mesh: a fine island 3 levels down next to coarse
        // elements is not class-2 admissible.
        let h = SpaceHierarchy::build(1, 1, &[4], 3).unwrap();
        let root: BTreeSet<MIdx> = (0..4).map(|i| [i, 0, 0]).collect();
        let domains: Vec<BTreeSet<MIdx>> = vec![
            root,
            [[0u32, 0, 0], [1, 0, 0]].into_iter().collect(),
            [[0u32, 0, 0], [1, 0, 0]].into_iter().collect(),
            [[0u32, 0, 0], [1, 0, 0]].into_iter().collect(),
        ];
        let mesh = HierarchicalMesh::from_domains(1, 2, domains);
        let basis = basis_of(&mesh, &h);
        assert!(!check_admissibility(&mesh, &basis, &h, 2));
        assert!(check_admissibility(&mesh, &basis, &h, 4));
    }

    #[test]
    fn random_marking_sequences_stay_admissible() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..40 {
            let (d, p, r) = match case % 4 {
                0 => (1usize, 2usize, 2usize),
                1 => (2, 2, 2),
                2 => (2, 3, 3),
                _ => (2, 1, 2),
            };
            let base = if d == 1 { vec![6] } else { vec![4, 4] };
            let h = SpaceHierarchy::build(p, d, &base, 5).unwrap();
            let mut mesh = HierarchicalMesh::initial(&h, r).unwrap();
            for _ in 0..4 {
                let active: Vec<_> = mesh.all_active().filter(|&(l, _)| l + 1 < h.num_levels()).collect();
                if active.is_empty() {
                    break;
                }
                let count = rng.gen_range(1..=2.min(active.len()));
                let mut marked = Vec::new();
                for _ in 0..count {
                    let pick = active[rng.gen_range(0..active.len())];
                    if !marked.contains(&pick) {
                        marked.push(pick);
                    }
                }
                mesh = admissible_refine(&mesh, &h, &marked, r).unwrap();
                let basis = basis_of(&mesh, &h);
                assert!(check_admissibility(&mesh, &basis, &h, r));
                assert!(mesh.tiles_domain(&h));
                // Partition properties of the classification.
                let cls = classify_basis_functions(&basis, &h);
                let total: usize = (0..cls.num_levels()).map(|n| cls.group_size(n)).sum();
                assert_eq!(total, basis.len());
                for n in 0..cls.num_levels() {
                    for (l, _) in cls.group_ids(n) {
                        assert!(n >= l && n - l <= r - 1);
                    }
                }
            }
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let h = SpaceHierarchy::build(2, 2, &[4, 4], 1).unwrap();
        let mesh = HierarchicalMesh::initial(&h, 2).unwrap();
        let mesh = admissible_refine(&mesh, &h, &[(0, [2, 2, 0])], 2).unwrap();
        let basis = basis_of(&mesh, &h);
        let snap = MeshSnapshot::capture(&mesh, &basis, &h);
        let json = snap.to_json();
        let parsed: MeshSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, snap);
        // 1-based indices in the export.
        assert!(parsed.levels[0]
            .active_elements
            .iter()
            .all(|e| e.iter().all(|&c| c >= 1)));
    }
}
