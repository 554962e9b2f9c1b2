//! Subdomain partition, primal/dual classification of interface dofs, the jump
//! operator `B_Δ`, coefficient-weighted scalings and the restriction operators.
//!
//! Displacement and pressure interface dofs are split into primal vertices (coarse
//! grid points shared by at least two subdomains), optional primal edge averages, and
//! dual edge dofs shared by exactly two subdomains. Edge averages are realized by a
//! change of basis on each edge: hat coefficient 0 carries the nodal average and the
//! remaining hat coefficients use an orthonormal average-free (Helmert) basis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{FeSpaceSet, XiElement};
use crate::linalg::{self, SpMat, TripletBuilder};
use crate::material::MaterialField;
use crate::mesh::StructuredMesh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrimalVariant {
    #[serde(rename = "vertex")]
    Vertex,
    #[serde(rename = "vertex-edge")]
    VertexEdge,
}

impl PrimalVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            PrimalVariant::Vertex => "vertex",
            PrimalVariant::VertexEdge => "vertex-edge",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubdomainPartition {
    pub grid: (usize, usize),
    /// Base cells per subdomain along each axis.
    pub cells: (usize, usize),
    pub triangles: Vec<Vec<usize>>,
    pub diameter: Vec<f64>,
    /// Sorted owning subdomains of every base node.
    pub base_owners: Vec<Vec<usize>>,
    /// Sorted owning subdomains of every refined node.
    pub refined_owners: Vec<Vec<usize>>,
    /// Base nodes on `(∪∂Ωᵢ) \ ∂Ω`.
    pub interface_nodes: Vec<usize>,
}

fn axis_owners(i: usize, m: usize, parts: usize) -> Vec<usize> {
    let s = i / m;
    if i.is_multiple_of(m) && s > 0 {
        if s < parts {
            vec![s - 1, s]
        } else {
            vec![s - 1]
        }
    } else {
        vec![s.min(parts - 1)]
    }
}

fn node_owners(i: usize, j: usize, m: (usize, usize), grid: (usize, usize)) -> Vec<usize> {
    let xs = axis_owners(i, m.0, grid.0);
    let ys = axis_owners(j, m.1, grid.1);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &sy in &ys {
        for &sx in &xs {
            out.push(sy * grid.0 + sx);
        }
    }
    out.sort_unstable();
    out
}

impl SubdomainPartition {
    pub fn num_subdomains(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Subdomain size over mesh size, `H/h`, on the base mesh.
    pub fn h_ratio(&self) -> usize {
        self.cells.0
    }

    fn is_base_grid_point(&self, i: usize, j: usize) -> bool {
        i.is_multiple_of(self.cells.0) && j.is_multiple_of(self.cells.1)
    }

    fn is_refined_grid_point(&self, i: usize, j: usize) -> bool {
        i.is_multiple_of(2 * self.cells.0) && j.is_multiple_of(2 * self.cells.1)
    }
}

pub fn partition(mesh: &StructuredMesh) -> SubdomainPartition {
    let grid = mesh.grid;
    let cells = mesh.cells_per_subdomain();
    let nsub = grid.0 * grid.1;
    let mut triangles = vec![Vec::new(); nsub];
    for t in 0..mesh.base.triangles.len() {
        triangles[mesh.subdomain_of_triangle(t)].push(t);
    }
    let hx = cells.0 as f64 / mesh.nx as f64;
    let hy = cells.1 as f64 / mesh.ny as f64;
    let diameter = vec![(hx * hx + hy * hy).sqrt(); nsub];
    let base_owners: Vec<Vec<usize>> = (0..mesh.base.num_nodes())
        .map(|n| {
            let (i, j) = mesh.base.node_ij(n);
            node_owners(i, j, cells, grid)
        })
        .collect();
    let refined_owners: Vec<Vec<usize>> = (0..mesh.refined.num_nodes())
        .map(|n| {
            let (i, j) = mesh.refined.node_ij(n);
            node_owners(i, j, (2 * cells.0, 2 * cells.1), grid)
        })
        .collect();
    let interface_nodes = (0..mesh.base.num_nodes())
        .filter(|&n| {
            let (i, j) = mesh.base.node_ij(n);
            base_owners[n].len() > 1 && i > 0 && j > 0 && i < mesh.nx && j < mesh.ny
        })
        .collect();
    SubdomainPartition {
        grid,
        cells,
        triangles,
        diameter,
        base_owners,
        refined_owners,
        interface_nodes,
    }
}

/// Nodes of a subdomain edge, shared by exactly the two `owners`.
#[derive(Debug, Clone, Serialize)]
pub struct Edge {
    pub owners: (usize, usize),
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PrimalDof {
    Vertex { node: usize, comp: usize },
    EdgeAverage { edge: usize, comp: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DualDof {
    pub edge: usize,
    pub comp: usize,
    /// Hat coefficient index within the edge.
    pub k: usize,
}

/// Coordinate in the interface hat space of a split field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HatId {
    Primal(usize),
    Dual(usize),
}

/// Nodal value at position `pos` of an `m`-node edge as a combination of hat coefficients.
pub fn hat_coefficient(variant: PrimalVariant, m: usize, pos: usize, k: usize) -> f64 {
    debug_assert!(pos < m && k < m);
    match variant {
        PrimalVariant::Vertex => {
            if pos == k {
                1.0
            } else {
                0.0
            }
        }
        PrimalVariant::VertexEdge => {
            if k == 0 {
                1.0
            } else {
                let s = 1.0 / ((k * (k + 1)) as f64).sqrt();
                match pos.cmp(&k) {
                    std::cmp::Ordering::Less => s,
                    std::cmp::Ordering::Equal => -(k as f64) * s,
                    std::cmp::Ordering::Greater => 0.0,
                }
            }
        }
    }
}

/// Interior / dual / primal classification of a displacement-like or pressure-like field.
#[derive(Debug, Clone, Serialize)]
pub struct SplitField {
    pub ncomp: usize,
    pub variant: PrimalVariant,
    pub vertices: Vec<usize>,
    pub edges: Vec<Edge>,
    pub primal: Vec<PrimalDof>,
    pub dual: Vec<DualDof>,
    /// Global interior dofs per subdomain, sorted.
    pub interior: Vec<Vec<usize>>,
    /// Global primal ids touching each subdomain, sorted.
    pub sub_primal: Vec<Vec<usize>>,
    /// Global dual ids owned by each subdomain, sorted.
    pub sub_dual: Vec<Vec<usize>>,
    /// All interface dofs in nodal numbering, sorted.
    pub interface_dofs: Vec<usize>,
    /// Nodal interface dofs per subdomain, sorted.
    pub sub_interface: Vec<Vec<usize>>,
    /// Hat expansion of every entry of `interface_dofs`.
    pub expansion: Vec<Vec<(HatId, f64)>>,
}

impl SplitField {
    pub fn n_primal(&self) -> usize {
        self.primal.len()
    }

    pub fn n_dual(&self) -> usize {
        self.dual.len()
    }

    /// Position of a nodal interface dof in `interface_dofs`.
    pub fn interface_position(&self, dof: usize) -> Option<usize> {
        self.interface_dofs.binary_search(&dof).ok()
    }

    /// Hat space index: primal ids first, then dual ids.
    pub fn hat_index(&self, h: HatId) -> usize {
        match h {
            HatId::Primal(k) => k,
            HatId::Dual(k) => self.primal.len() + k,
        }
    }

    /// Sparse `T` with nodal interface values `= T · hat`.
    pub fn transform(&self) -> SpMat {
        let n = self.interface_dofs.len();
        let mut t = TripletBuilder::new(n, n);
        for (row, exp) in self.expansion.iter().enumerate() {
            for &(h, c) in exp {
                t.push(row, self.hat_index(h), c);
            }
        }
        t.build()
    }
}

/// Interior / interface classification of the total pressure (no primal dofs).
#[derive(Debug, Clone, Serialize)]
pub struct PlainField {
    pub interior: Vec<Vec<usize>>,
    pub interface_dofs: Vec<usize>,
    pub sub_interface: Vec<Vec<usize>>,
}

impl PlainField {
    pub fn interface_position(&self, dof: usize) -> Option<usize> {
        self.interface_dofs.binary_search(&dof).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifyOptions {
    pub primal: PrimalVariant,
    /// Coarse grid points are primal; when false they join the adjacent edges.
    pub vertex_primal: bool,
    /// Skip the floating-subdomain check.
    pub allow_floating: bool,
}

impl ClassifyOptions {
    pub fn new(primal: PrimalVariant) -> Self {
        Self {
            primal,
            vertex_primal: true,
            allow_floating: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DofClassification {
    pub variant: PrimalVariant,
    pub u: SplitField,
    pub p: SplitField,
    pub xi: PlainField,
    /// Subdomains with at least two Dirichlet displacement nodes in their closure.
    pub anchored: Vec<bool>,
}

impl DofClassification {
    /// JSON export of the classification sets.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct NodeField<'a> {
    ncomp: usize,
    /// Compressed index of a mesh node, `None` when Dirichlet.
    index: &'a [Option<usize>],
    owners: &'a [Vec<usize>],
    grid_point: &'a dyn Fn(usize) -> bool,
}

fn split_field(f: &NodeField<'_>, nsub: usize, opts: &ClassifyOptions) -> Result<SplitField> {
    let mut interior = vec![Vec::new(); nsub];
    let mut vertices = Vec::new();
    let mut edge_map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (node, idx) in f.index.iter().enumerate() {
        let Some(k) = *idx else { continue };
        let own = &f.owners[node];
        if own.len() == 1 {
            for c in 0..f.ncomp {
                interior[own[0]].push(f.ncomp * k + c);
            }
        } else if opts.vertex_primal && (f.grid_point)(node) {
            vertices.push(node);
        } else if own.len() == 2 {
            edge_map.entry((own[0], own[1])).or_default().push(node);
        } else {
            return Err(Error::Invariant(format!(
                "node {node} is shared by {} subdomains but is not primal",
                own.len()
            )));
        }
    }
    let edges: Vec<Edge> = edge_map
        .into_iter()
        .map(|(owners, nodes)| Edge { owners, nodes })
        .collect();

    let mut primal = Vec::new();
    let mut sub_primal = vec![Vec::new(); nsub];
    let mut vertex_primal_id = BTreeMap::new();
    for &node in &vertices {
        for comp in 0..f.ncomp {
            let id = primal.len();
            primal.push(PrimalDof::Vertex { node, comp });
            vertex_primal_id.insert((node, comp), id);
            for &s in &f.owners[node] {
                sub_primal[s].push(id);
            }
        }
    }
    let mut dual = Vec::new();
    let mut sub_dual = vec![Vec::new(); nsub];
    let mut edge_hat: Vec<Vec<Vec<HatId>>> = Vec::with_capacity(edges.len());
    for (e, edge) in edges.iter().enumerate() {
        let m = edge.nodes.len();
        let mut per_comp = Vec::with_capacity(f.ncomp);
        for comp in 0..f.ncomp {
            let mut hats = Vec::with_capacity(m);
            for k in 0..m {
                if k == 0 && opts.primal == PrimalVariant::VertexEdge {
                    let id = primal.len();
                    primal.push(PrimalDof::EdgeAverage { edge: e, comp });
                    sub_primal[edge.owners.0].push(id);
                    sub_primal[edge.owners.1].push(id);
                    hats.push(HatId::Primal(id));
                } else {
                    let id = dual.len();
                    dual.push(DualDof { edge: e, comp, k });
                    sub_dual[edge.owners.0].push(id);
                    sub_dual[edge.owners.1].push(id);
                    hats.push(HatId::Dual(id));
                }
            }
            per_comp.push(hats);
        }
        edge_hat.push(per_comp);
    }

    let mut nodal: Vec<(usize, Vec<(HatId, f64)>, &Vec<usize>)> = Vec::new();
    for &node in &vertices {
        let k = f.index[node].unwrap();
        for comp in 0..f.ncomp {
            let id = vertex_primal_id[&(node, comp)];
            nodal.push((f.ncomp * k + comp, vec![(HatId::Primal(id), 1.0)], &f.owners[node]));
        }
    }
    for (e, edge) in edges.iter().enumerate() {
        let m = edge.nodes.len();
        for (pos, &node) in edge.nodes.iter().enumerate() {
            let k = f.index[node].unwrap();
            for comp in 0..f.ncomp {
                let exp = (0..m)
                    .filter_map(|kk| {
                        let c = hat_coefficient(opts.primal, m, pos, kk);
                        (c != 0.0).then(|| (edge_hat[e][comp][kk], c))
                    })
                    .collect();
                nodal.push((f.ncomp * k + comp, exp, &f.owners[node]));
            }
        }
    }
    nodal.sort_by_key(|x| x.0);
    let mut sub_interface = vec![Vec::new(); nsub];
    let mut interface_dofs = Vec::with_capacity(nodal.len());
    let mut expansion = Vec::with_capacity(nodal.len());
    for (dof, exp, own) in nodal {
        interface_dofs.push(dof);
        expansion.push(exp);
        for &s in own {
            sub_interface[s].push(dof);
        }
    }
    for v in sub_primal
        .iter_mut()
        .chain(sub_dual.iter_mut())
        .chain(sub_interface.iter_mut())
        .chain(interior.iter_mut())
    {
        v.sort_unstable();
    }
    Ok(SplitField {
        ncomp: f.ncomp,
        variant: opts.primal,
        vertices,
        edges,
        primal,
        dual,
        interior,
        sub_primal,
        sub_dual,
        interface_dofs,
        sub_interface,
        expansion,
    })
}

/// Classifies displacement, total-pressure and pressure dofs of every subdomain.
pub fn classify_dofs(
    mesh: &StructuredMesh,
    part: &SubdomainPartition,
    spaces: &FeSpaceSet,
    opts: ClassifyOptions,
) -> Result<DofClassification> {
    let nsub = part.num_subdomains();
    let refined_gp = |n: usize| {
        let (i, j) = mesh.refined.node_ij(n);
        part.is_refined_grid_point(i, j)
    };
    let base_gp = |n: usize| {
        let (i, j) = mesh.base.node_ij(n);
        part.is_base_grid_point(i, j)
    };
    let u = split_field(
        &NodeField {
            ncomp: 2,
            index: &spaces.u_node_of_refined,
            owners: &part.refined_owners,
            grid_point: &refined_gp,
        },
        nsub,
        &opts,
    )?;
    let p = split_field(
        &NodeField {
            ncomp: 1,
            index: &spaces.p_node_of_base,
            owners: &part.base_owners,
            grid_point: &base_gp,
        },
        nsub,
        &opts,
    )?;

    let mut xi_interior = vec![Vec::new(); nsub];
    let mut xi_interface = Vec::new();
    let mut xi_sub_interface = vec![Vec::new(); nsub];
    match spaces.xi_element {
        XiElement::P1 => {
            for (n, own) in part.base_owners.iter().enumerate() {
                if own.len() == 1 {
                    xi_interior[own[0]].push(n);
                } else {
                    xi_interface.push(n);
                    for &s in own {
                        xi_sub_interface[s].push(n);
                    }
                }
            }
        }
        XiElement::P0 => {
            for (s, tris) in part.triangles.iter().enumerate() {
                xi_interior[s] = tris.clone();
                xi_interior[s].sort_unstable();
            }
        }
    }
    let xi = PlainField {
        interior: xi_interior,
        interface_dofs: xi_interface,
        sub_interface: xi_sub_interface,
    };

    let mut dirichlet_count = vec![0usize; nsub];
    for (n, idx) in spaces.u_node_of_refined.iter().enumerate() {
        if idx.is_none() {
            for &s in &part.refined_owners[n] {
                dirichlet_count[s] += 1;
            }
        }
    }
    let anchored: Vec<bool> = dirichlet_count.iter().map(|&c| c >= 2).collect();
    if !opts.allow_floating {
        for s in 0..nsub {
            if anchored[s] {
                continue;
            }
            let objects = u
                .sub_primal[s]
                .iter()
                .filter(|&&id| match u.primal[id] {
                    PrimalDof::Vertex { comp, .. } | PrimalDof::EdgeAverage { comp, .. } => comp == 0,
                })
                .count();
            if objects < 2 {
                return Err(Error::FloatingSubdomain { id: s });
            }
        }
    }
    Ok(DofClassification {
        variant: opts.primal,
        u,
        p,
        xi,
        anchored,
    })
}

/// Coefficient-weighted counting pseudoinverses `δ†`.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingWeights {
    pub mu: Vec<f64>,
    pub kappa: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaledField {
    Displacement,
    TotalPressure,
    Pressure,
}

impl ScalingWeights {
    fn rho(&self, field: ScaledField, s: usize) -> f64 {
        match field {
            ScaledField::Displacement => self.mu[s],
            ScaledField::TotalPressure => 1.0 / self.mu[s],
            ScaledField::Pressure => self.kappa[s],
        }
    }

    /// `δ†_{field,sub}` at a node shared by `owners`.
    pub fn weight(&self, field: ScaledField, sub: usize, owners: &[usize]) -> f64 {
        let total: f64 = owners.iter().map(|&j| self.rho(field, j)).sum();
        self.rho(field, sub) / total
    }
}

pub fn build_scalings(materials: &MaterialField) -> ScalingWeights {
    ScalingWeights {
        mu: materials.coeffs.iter().map(|c| c.mu).collect(),
        kappa: materials.coeffs.iter().map(|c| c.kappa).collect(),
    }
}

/// Signed Boolean jump `B_Δ` and its scaled counterpart `B_{Δ,D}`, stored per subdomain
/// as `(row, local dual position, value)` triples. Rows coincide with global dual ids.
#[derive(Debug, Clone, Serialize)]
pub struct JumpOperator {
    pub rows: usize,
    pub local: Vec<Vec<(usize, usize, f64)>>,
    pub scaled: Vec<Vec<(usize, usize, f64)>>,
}

pub fn build_jump(cls: &DofClassification, w: &ScalingWeights) -> Result<JumpOperator> {
    let u = &cls.u;
    let nsub = u.sub_dual.len();
    let mut local = vec![Vec::new(); nsub];
    let mut scaled = vec![Vec::new(); nsub];
    for (s, ids) in u.sub_dual.iter().enumerate() {
        for (pos, &id) in ids.iter().enumerate() {
            let (a, b) = u.edges[u.dual[id].edge].owners;
            if a == b || (s != a && s != b) {
                return Err(Error::Invariant(format!("dual dof {id} has inconsistent owners")));
            }
            let other = if s == a { b } else { a };
            let sign = if s == a.min(b) { 1.0 } else { -1.0 };
            local[s].push((id, pos, sign));
            let wn = w.weight(ScaledField::Displacement, other, &[a, b]);
            scaled[s].push((id, pos, sign * wn));
        }
    }
    let mut count = vec![0usize; u.n_dual()];
    for l in &local {
        for &(r, _, _) in l {
            count[r] += 1;
        }
    }
    if let Some(r) = count.iter().position(|&c| c != 2) {
        return Err(Error::Invariant(format!(
            "dual dof {r} is shared by {} subdomains",
            count[r]
        )));
    }
    Ok(JumpOperator {
        rows: u.n_dual(),
        local,
        scaled,
    })
}

impl JumpOperator {
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for l in &self.local {
            off.push(off.last().unwrap() + l.len());
        }
        off
    }

    fn assemble(&self, parts: &[Vec<(usize, usize, f64)>]) -> SpMat {
        let off = self.offsets();
        let mut t = TripletBuilder::new(self.rows, *off.last().unwrap());
        for (s, l) in parts.iter().enumerate() {
            for &(r, pos, v) in l {
                t.push(r, off[s] + pos, v);
            }
        }
        t.build()
    }

    /// `B_Δ` over the concatenated local dual spaces.
    pub fn matrix(&self) -> SpMat {
        self.assemble(&self.local)
    }

    pub fn scaled_matrix(&self) -> SpMat {
        self.assemble(&self.scaled)
    }

    /// `out += B^{(s)} x_s`
    pub fn apply_local(&self, s: usize, x: &[f64], out: &mut [f64], scaled: bool) {
        let l = if scaled { &self.scaled[s] } else { &self.local[s] };
        for &(r, pos, v) in l {
            out[r] += v * x[pos];
        }
    }

    /// `out += B^{(s)ᵀ} λ`
    pub fn apply_local_t(&self, s: usize, lambda: &[f64], out: &mut [f64], scaled: bool) {
        let l = if scaled { &self.scaled[s] } else { &self.local[s] };
        for &(r, pos, v) in l {
            out[pos] += v * lambda[r];
        }
    }
}

/// Restriction and scaled restriction operators on the interface spaces.
///
/// `r_xi` maps the assembled total-pressure interface to the stacked local interfaces.
/// `r_p_tilde` maps the pressure hat space (primal first, then dual) to the partially
/// assembled space (stacked local dual dofs, then global primal dofs).
#[derive(Debug, Clone)]
pub struct RestrictionSet {
    pub xi_offsets: Vec<usize>,
    pub r_xi: SpMat,
    pub r_xi_d: SpMat,
    pub p_offsets: Vec<usize>,
    pub r_p: SpMat,
    pub r_p_d: SpMat,
    pub p_dual_offsets: Vec<usize>,
    pub r_p_tilde: SpMat,
    pub r_p_tilde_d: SpMat,
    /// Pressure hat-to-nodal change of basis.
    pub t_p: SpMat,
}

fn offsets(lists: &[Vec<usize>]) -> Vec<usize> {
    let mut off = vec![0];
    for l in lists {
        off.push(off.last().unwrap() + l.len());
    }
    off
}

fn stacked_restriction(
    sub_lists: &[Vec<usize>],
    position: impl Fn(usize) -> usize,
    ncols: usize,
    weight: impl Fn(usize, usize) -> f64,
) -> (Vec<usize>, SpMat, SpMat) {
    let off = offsets(sub_lists);
    let n = *off.last().unwrap();
    let mut r = TripletBuilder::new(n, ncols);
    let mut rd = TripletBuilder::new(n, ncols);
    for (s, list) in sub_lists.iter().enumerate() {
        for (k, &dof) in list.iter().enumerate() {
            let col = position(dof);
            r.push(off[s] + k, col, 1.0);
            rd.push(off[s] + k, col, weight(s, dof));
        }
    }
    (off, r.build(), rd.build())
}

fn check_identity(lhs: &SpMat, name: &str) -> Result<()> {
    let n = lhs.nrows();
    let d = linalg::to_dense(lhs);
    for i in 0..n {
        for j in 0..lhs.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            if (d[(i, j)] - target).abs() > 1e-14 {
                return Err(Error::Invariant(format!("{name} is not the identity at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

fn product_tn(a: &SpMat, b: &SpMat) -> SpMat {
    let d = linalg::to_dense(a).transpose() * linalg::to_dense(b);
    let mut t = TripletBuilder::new(d.nrows(), d.ncols());
    for j in 0..d.ncols() {
        for i in 0..d.nrows() {
            if d[(i, j)] != 0.0 {
                t.push(i, j, d[(i, j)]);
            }
        }
    }
    t.build()
}

pub fn build_restrictions(
    part: &SubdomainPartition,
    spaces: &FeSpaceSet,
    cls: &DofClassification,
    w: &ScalingWeights,
) -> Result<RestrictionSet> {
    let xi = &cls.xi;
    let (xi_offsets, r_xi, r_xi_d) = stacked_restriction(
        &xi.sub_interface,
        |d| xi.interface_position(d).unwrap(),
        xi.interface_dofs.len(),
        |s, d| w.weight(ScaledField::TotalPressure, s, &part.base_owners[d]),
    );
    let p = &cls.p;
    let p_owner = |d: usize| &part.base_owners[spaces.p_nodes[d]];
    let (p_offsets, r_p, r_p_d) = stacked_restriction(
        &p.sub_interface,
        |d| p.interface_position(d).unwrap(),
        p.interface_dofs.len(),
        |s, d| w.weight(ScaledField::Pressure, s, p_owner(d)),
    );
    let p_dual_offsets = offsets(&p.sub_dual);
    let n_dual_stack = *p_dual_offsets.last().unwrap();
    let n_hat = p.n_primal() + p.n_dual();
    let mut rt = TripletBuilder::new(n_dual_stack + p.n_primal(), n_hat);
    let mut rtd = TripletBuilder::new(n_dual_stack + p.n_primal(), n_hat);
    for (s, ids) in p.sub_dual.iter().enumerate() {
        for (k, &id) in ids.iter().enumerate() {
            let (a, b) = p.edges[p.dual[id].edge].owners;
            let col = p.hat_index(HatId::Dual(id));
            rt.push(p_dual_offsets[s] + k, col, 1.0);
            rtd.push(
                p_dual_offsets[s] + k,
                col,
                w.weight(ScaledField::Pressure, s, &[a, b]),
            );
        }
    }
    for k in 0..p.n_primal() {
        rt.push(n_dual_stack + k, k, 1.0);
        rtd.push(n_dual_stack + k, k, 1.0);
    }
    let set = RestrictionSet {
        xi_offsets,
        r_xi,
        r_xi_d,
        p_offsets,
        r_p,
        r_p_d,
        p_dual_offsets,
        r_p_tilde: rt.build(),
        r_p_tilde_d: rtd.build(),
        t_p: p.transform(),
    };
    if set.r_xi.ncols() <= 4000 && set.r_p_tilde.ncols() <= 4000 {
        check_identity(&product_tn(&set.r_xi, &set.r_xi_d), "R_ξᵀ R_ξ,D")?;
        check_identity(&product_tn(&set.r_p, &set.r_p_d), "R_pᵀ R_p,D")?;
        check_identity(&product_tn(&set.r_p_tilde, &set.r_p_tilde_d), "R̃_pᵀ R̃_p,D")?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::BoundarySpec;
    use crate::mesh::build_mesh;

    fn setup(
        nx: usize,
        grid: (usize, usize),
        xi: XiElement,
        variant: PrimalVariant,
    ) -> (StructuredMesh, SubdomainPartition, FeSpaceSet, DofClassification) {
        let mesh = build_mesh(nx, nx, grid).unwrap();
        let part = partition(&mesh);
        let spaces = FeSpaceSet::build(&mesh, xi, BoundarySpec::neumann_left()).unwrap();
        let cls = classify_dofs(&mesh, &part, &spaces, ClassifyOptions::new(variant)).unwrap();
        (mesh, part, spaces, cls)
    }

    #[test]
    fn single_subdomain_has_no_interface() {
        let (_, part, spaces, cls) = setup(4, (1, 1), XiElement::P1, PrimalVariant::Vertex);
        assert!(part.interface_nodes.is_empty());
        assert_eq!(cls.u.interior[0].len(), spaces.n_u());
        assert_eq!(cls.p.interior[0].len(), spaces.n_p());
        assert!(cls.u.primal.is_empty() && cls.u.dual.is_empty());
        assert!(cls.xi.interface_dofs.is_empty());
    }

    #[test]
    fn vertical_interface_line() {
        let (mesh, part, _, _) = setup(4, (2, 1), XiElement::P1, PrimalVariant::Vertex);
        let xs: Vec<f64> = part.interface_nodes.iter().map(|&n| mesh.base.vertices[n][0]).collect();
        assert_eq!(xs, vec![0.5; 3]);
    }

    #[test]
    fn cross_interface_count() {
        let (_, part, _, cls) = setup(4, (2, 2), XiElement::P1, PrimalVariant::Vertex);
        // x = 0.5 and y = 0.5 lines without the boundary: 3 + 3 - 1 nodes
        assert_eq!(part.interface_nodes.len(), 5);
        // one interior cross point and the Neumann corner (0, 0.5)
        assert_eq!(cls.u.vertices.len(), 2);
        assert_eq!(cls.u.n_primal(), 4);
    }

    #[test]
    fn p0_has_no_total_pressure_interface() {
        let (_, _, _, cls) = setup(4, (2, 2), XiElement::P0, PrimalVariant::VertexEdge);
        assert!(cls.xi.interface_dofs.is_empty());
        assert_eq!(cls.xi.interior.iter().map(Vec::len).sum::<usize>(), 32);
    }

    #[test]
    fn sets_partition_each_field() {
        for variant in [PrimalVariant::Vertex, PrimalVariant::VertexEdge] {
            let (_, part, spaces, cls) = setup(6, (3, 3), XiElement::P1, variant);
            let n_int: usize = cls.u.interior.iter().map(Vec::len).sum();
            assert_eq!(n_int + cls.u.interface_dofs.len(), spaces.n_u());
            assert_eq!(cls.u.n_primal() + cls.u.n_dual(), cls.u.interface_dofs.len());
            let n_int: usize = cls.p.interior.iter().map(Vec::len).sum();
            assert_eq!(n_int + cls.p.interface_dofs.len(), spaces.n_p());
            let n_int: usize = cls.xi.interior.iter().map(Vec::len).sum();
            assert_eq!(n_int + cls.xi.interface_dofs.len(), spaces.n_xi());
            // the centre and the middle-left subdomain, which only touches the Neumann side
            let floating: Vec<usize> = (0..9).filter(|&s| !cls.anchored[s]).collect();
            assert_eq!(floating, vec![3, 4]);
            let _ = part;
        }
    }

    #[test]
    fn helmert_basis_is_orthonormal_and_average_free() {
        for m in 1..7 {
            for k in 1..m {
                let col: Vec<f64> = (0..m)
                    .map(|p| hat_coefficient(PrimalVariant::VertexEdge, m, p, k))
                    .collect();
                assert!(col.iter().sum::<f64>().abs() < 1e-14);
                for l in 1..m {
                    let other: Vec<f64> = (0..m)
                        .map(|p| hat_coefficient(PrimalVariant::VertexEdge, m, p, l))
                        .collect();
                    let d = linalg::dot(&col, &other);
                    assert!((d - if k == l { 1.0 } else { 0.0 }).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn scaling_examples() {
        let w = ScalingWeights {
            mu: vec![10.0, 1.0],
            kappa: vec![1.0, 1.0],
        };
        assert!((w.weight(ScaledField::Displacement, 0, &[0, 1]) - 10.0 / 11.0).abs() < 1e-15);
        assert!((w.weight(ScaledField::TotalPressure, 0, &[0, 1]) - 1.0 / 11.0).abs() < 1e-15);
        let w = ScalingWeights {
            mu: vec![1.0; 4],
            kappa: vec![1.0, 1.0, 10.0, 10.0],
        };
        let ws: Vec<f64> = (0..4).map(|s| w.weight(ScaledField::Pressure, s, &[0, 1, 2, 3])).collect();
        assert_eq!(ws, vec![1.0 / 22.0, 1.0 / 22.0, 10.0 / 22.0, 10.0 / 22.0]);
    }

    #[test]
    fn jump_rows_have_opposite_unit_entries() {
        let (_, _, _, cls) = setup(8, (2, 2), XiElement::P1, PrimalVariant::VertexEdge);
        let w = ScalingWeights {
            mu: vec![1.0, 3.0, 5.0, 7.0],
            kappa: vec![1.0; 4],
        };
        let j = build_jump(&cls, &w).unwrap();
        let b = linalg::to_dense(&j.matrix());
        for r in 0..b.nrows() {
            let row: Vec<f64> = (0..b.ncols()).map(|c| b[(r, c)]).filter(|v| *v != 0.0).collect();
            assert_eq!(row, vec![1.0, -1.0]);
        }
        let bd = linalg::to_dense(&j.scaled_matrix());
        let prod = &b * bd.transpose();
        for r in 0..prod.nrows() {
            for c in 0..prod.ncols() {
                let t = if r == c { 1.0 } else { 0.0 };
                assert!((prod[(r, c)] - t).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn floating_subdomain_without_primal_is_rejected() {
        let mesh = build_mesh(6, 6, (3, 3)).unwrap();
        let part = partition(&mesh);
        let spaces = FeSpaceSet::build(&mesh, XiElement::P1, BoundarySpec::all_dirichlet()).unwrap();
        let opts = ClassifyOptions {
            vertex_primal: false,
            ..ClassifyOptions::new(PrimalVariant::Vertex)
        };
        // without primal vertices the cross points are shared by four subdomains
        assert!(matches!(
            classify_dofs(&mesh, &part, &spaces, opts),
            Err(Error::Invariant(_))
        ));
        let mesh = build_mesh(6, 6, (3, 1)).unwrap();
        let part = partition(&mesh);
        let bc = BoundarySpec {
            displacement: crate::fem::Sides {
                right: true,
                ..Default::default()
            },
            pressure: crate::fem::Sides::ALL,
        };
        let spaces = FeSpaceSet::build(&mesh, XiElement::P1, bc).unwrap();
        assert!(matches!(
            classify_dofs(&mesh, &part, &spaces, opts),
            Err(Error::FloatingSubdomain { id: 0 })
        ));
    }

    #[test]
    fn restriction_identities_and_projection() {
        let (_, part, spaces, cls) = setup(8, (2, 2), XiElement::P1, PrimalVariant::VertexEdge);
        let mats = MaterialField {
            coeffs: (0..4)
                .map(|s| crate::material::Coefficients {
                    lambda: 1.0,
                    mu: 1.0 + s as f64,
                    alpha: 1.0,
                    kappa: 10f64.powi(s),
                })
                .collect(),
        };
        let w = build_scalings(&mats);
        let r = build_restrictions(&part, &spaces, &cls, &w).unwrap();
        let rt = linalg::to_dense(&r.r_p_tilde);
        let rtd = linalg::to_dense(&r.r_p_tilde_d);
        let e = &rt * rtd.transpose();
        let e2 = &e * &e;
        assert!((&e2 - &e).norm_max() < 1e-14);
        for row in 0..rt.nrows() {
            let nnz = (0..rt.ncols()).filter(|&c| rt[(row, c)] != 0.0).count();
            assert_eq!(nnz, 1);
        }
        let json = cls.to_json().unwrap();
        assert!(json.contains("sub_dual"));
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config { cases: 64, failure_persistence: None, ..Default::default() })]

        #[test]
        fn scaling_weights_partition_unity(
            mu in proptest::collection::vec(-8.0f64..8.0, 4),
            kappa in proptest::collection::vec(-8.0f64..8.0, 4),
            mask in 3u8..16,
        ) {
            let w = ScalingWeights {
                mu: mu.iter().map(|e| 10f64.powf(*e)).collect(),
                kappa: kappa.iter().map(|e| 10f64.powf(*e)).collect(),
            };
            let owners: Vec<usize> = (0..4).filter(|s| mask & (1 << s) != 0).collect();
            proptest::prop_assume!(owners.len() >= 2);
            for field in [ScaledField::Displacement, ScaledField::TotalPressure, ScaledField::Pressure] {
                let total: f64 = owners.iter().map(|&s| w.weight(field, s, &owners)).sum();
                proptest::prop_assert!((total - 1.0).abs() <= 1e-14);
            }
        }
    }
}
