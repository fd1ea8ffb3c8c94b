//! Structured P1 triangulation of the unit square and the finite-element and
//! temporal operators built on it.

use nalgebra::DVector;

use crate::error::{invalid, Error, Result};
use crate::linalg::{CsrMatrix, TripletBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    Neumann,
    Robin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Bottom, Side::Right, Side::Top, Side::Left];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "bottom" => Ok(Side::Bottom),
            "right" => Ok(Side::Right),
            "top" => Ok(Side::Top),
            "left" => Ok(Side::Left),
            other => Err(Error::Config(format!("unknown boundary side '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub side: Side,
    pub tag: BoundaryTag,
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub n: usize,
    pub nodes: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
}

impl Mesh {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|k| self.nodes[k]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    /// Index of the mesh node closest to `p`, with its distance.
    pub fn nearest_node(&self, p: [f64; 2]) -> (usize, f64) {
        let h = 1.0 / self.n as f64;
        let i = ((p[0] / h).round().max(0.0) as usize).min(self.n);
        let j = ((p[1] / h).round().max(0.0) as usize).min(self.n);
        let k = self.node_index(i, j);
        let q = self.nodes[k];
        (k, ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt())
    }

    /// Nodal indicator of an axis-aligned box (closed, with a small tolerance).
    pub fn box_indicator(&self, lo: [f64; 2], hi: [f64; 2]) -> DVector<f64> {
        let eps = 1e-12;
        DVector::from_iterator(
            self.num_nodes(),
            self.nodes.iter().map(|p| {
                let inside = p[0] >= lo[0] - eps
                    && p[0] <= hi[0] + eps
                    && p[1] >= lo[1] - eps
                    && p[1] <= hi[1] + eps;
                if inside {
                    1.0
                } else {
                    0.0
                }
            }),
        )
    }

    pub fn interpolate(&self, f: impl Fn(f64, f64) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.num_nodes(), self.nodes.iter().map(|p| f(p[0], p[1])))
    }
}

/// Uniform right-triangle mesh of `[0,1]²` with `n` cells per side. Edges on
/// the sides listed in `robin_sides` carry the Robin tag, all others Neumann.
pub fn build_mesh(n: usize, robin_sides: &[Side]) -> Result<Mesh> {
    if n < 2 {
        return Err(invalid(format!("mesh needs at least 2 cells per side, got {n}")));
    }
    let h = 1.0 / n as f64;
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut nodes = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            nodes.push([i as f64 * h, j as f64 * h]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let tag = |side: Side| {
        if robin_sides.contains(&side) {
            BoundaryTag::Robin
        } else {
            BoundaryTag::Neumann
        }
    };
    let mut boundary_edges = Vec::with_capacity(4 * n);
    for k in 0..n {
        boundary_edges.push(BoundaryEdge {
            nodes: [idx(k, 0), idx(k + 1, 0)],
            side: Side::Bottom,
            tag: tag(Side::Bottom),
        });
        boundary_edges.push(BoundaryEdge {
            nodes: [idx(n, k), idx(n, k + 1)],
            side: Side::Right,
            tag: tag(Side::Right),
        });
        boundary_edges.push(BoundaryEdge {
            nodes: [idx(k + 1, n), idx(k, n)],
            side: Side::Top,
            tag: tag(Side::Top),
        });
        boundary_edges.push(BoundaryEdge {
            nodes: [idx(0, k + 1), idx(0, k)],
            side: Side::Left,
            tag: tag(Side::Left),
        });
    }
    Ok(Mesh {
        n,
        nodes,
        triangles,
        boundary_edges,
    })
}

/// Steady velocity field `v(x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum VelocityField {
    Zero,
    Constant([f64; 2]),
    /// Counterclockwise rotation about `center`: `v = speed * (c_y - y, x - c_x)`.
    Rotational { center: [f64; 2], speed: f64 },
}

impl Default for VelocityField {
    fn default() -> Self {
        VelocityField::Rotational {
            center: [0.5, 0.5],
            speed: 1.0,
        }
    }
}

impl VelocityField {
    pub fn eval(&self, x: f64, y: f64) -> [f64; 2] {
        match *self {
            VelocityField::Zero => [0.0, 0.0],
            VelocityField::Constant(v) => v,
            VelocityField::Rotational { center, speed } => {
                [speed * (center[1] - y), speed * (x - center[0])]
            }
        }
    }

    /// Parses `zero`, `constant:vx,vy`, `rotational` or `rotational:speed`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, tail) = s.split_once(':').unwrap_or((s, ""));
        let nums = || -> Result<Vec<f64>> {
            tail.split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Config(format!("bad velocity component '{t}': {e}")))
                })
                .collect()
        };
        match head {
            "zero" => Ok(VelocityField::Zero),
            "constant" => match nums()?.as_slice() {
                [a, b] => Ok(VelocityField::Constant([*a, *b])),
                _ => Err(Error::Config("constant velocity needs two components".into())),
            },
            "rotational" => match nums()?.as_slice() {
                [] => Ok(VelocityField::default()),
                [s] => Ok(VelocityField::Rotational {
                    center: [0.5, 0.5],
                    speed: *s,
                }),
                _ => Err(Error::Config("rotational velocity takes one speed".into())),
            },
            other => Err(Error::Config(format!("unknown velocity field '{other}'"))),
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            VelocityField::Zero => "zero".into(),
            VelocityField::Constant([a, b]) => format!("constant:{a},{b}"),
            VelocityField::Rotational { speed, .. } => format!("rotational:{speed}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdeCoefficients {
    pub kappa: f64,
    pub gamma_h: f64,
    pub gamma_a: f64,
}

impl Default for PdeCoefficients {
    fn default() -> Self {
        Self {
            kappa: 0.05,
            gamma_h: -1.0,
            gamma_a: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MassMode {
    #[default]
    Consistent,
    Lumped,
}

#[derive(Clone, Debug)]
pub struct FeOperators {
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
    pub advection: CsrMatrix,
    pub robin_mass: CsrMatrix,
    pub robin_load: DVector<f64>,
    pub coefficients: PdeCoefficients,
}

impl FeOperators {
    pub fn dim(&self) -> usize {
        self.mass.nrows()
    }
}

fn gradients(p: [[f64; 2]; 3], area: f64) -> [[f64; 2]; 3] {
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        g[i] = [
            (p[j][1] - p[k][1]) / (2.0 * area),
            (p[k][0] - p[j][0]) / (2.0 * area),
        ];
    }
    g
}

pub fn assemble_operators(
    mesh: &Mesh,
    coefficients: PdeCoefficients,
    velocity: &VelocityField,
    mass_mode: MassMode,
) -> Result<FeOperators> {
    let PdeCoefficients {
        kappa,
        gamma_h,
        gamma_a,
    } = coefficients;
    if !(kappa > 0.0) {
        return Err(invalid(format!("diffusivity must be positive, got {kappa}")));
    }
    if !(gamma_h < 0.0) {
        return Err(Error::Config(format!(
            "Robin coefficient gamma_h must be negative for a well-posed steady problem, got {gamma_h}"
        )));
    }
    let nn = mesh.num_nodes();
    let mut mass = TripletBuilder::new(nn, nn);
    let mut stiff = TripletBuilder::new(nn, nn);
    let mut adv = TripletBuilder::new(nn, nn);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let p = tri.map(|k| mesh.nodes[k]);
        let area = mesh.triangle_area(t);
        let g = gradients(p, area);
        let c = [
            (p[0][0] + p[1][0] + p[2][0]) / 3.0,
            (p[0][1] + p[1][1] + p[2][1]) / 3.0,
        ];
        let v = velocity.eval(c[0], c[1]);
        for a in 0..3 {
            for b in 0..3 {
                let m = match mass_mode {
                    MassMode::Consistent => area / 12.0 * if a == b { 2.0 } else { 1.0 },
                    MassMode::Lumped => {
                        if a == b {
                            area / 3.0
                        } else {
                            0.0
                        }
                    }
                };
                if m != 0.0 {
                    mass.push(tri[a], tri[b], m);
                }
                stiff.push(tri[a], tri[b], area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]));
                adv.push(tri[a], tri[b], area / 3.0 * (v[0] * g[b][0] + v[1] * g[b][1]));
            }
        }
    }
    let mut robin = TripletBuilder::new(nn, nn);
    for e in mesh.boundary_edges.iter().filter(|e| e.tag == BoundaryTag::Robin) {
        let [a, b] = e.nodes.map(|k| mesh.nodes[k]);
        let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        for (x, y) in [(0, 0), (1, 1), (0, 1), (1, 0)] {
            let w = len / 6.0 * if x == y { 2.0 } else { 1.0 };
            robin.push(e.nodes[x], e.nodes[y], w);
        }
    }
    let robin_mass = robin.build();
    let robin_load =
        robin_mass.mul_vec(&DVector::from_element(nn, 1.0)) * (-kappa * gamma_h * gamma_a);
    Ok(FeOperators {
        mass: mass.build(),
        stiffness: stiff.build(),
        advection: adv.build(),
        robin_mass,
        robin_load,
        coefficients,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGrid {
    pub final_time: f64,
    pub steps: usize,
    pub dt: f64,
    /// Diagonal of the temporal mass matrix.
    pub weights: DVector<f64>,
}

impl TemporalGrid {
    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .zip(self.weights.iter())
            .map(|((x, y), w)| x * y * w)
            .sum()
    }

    /// Left endpoints of the steps, where the control values live.
    pub fn control_times(&self) -> Vec<f64> {
        (0..self.steps).map(|k| k as f64 * self.dt).collect()
    }
}

/// Uniform steps with composite-midpoint quadrature weights.
pub fn assemble_temporal(final_time: f64, steps: usize) -> Result<TemporalGrid> {
    if steps == 0 {
        return Err(invalid("need at least one time step"));
    }
    if !(final_time > 0.0) {
        return Err(invalid(format!("final time must be positive, got {final_time}")));
    }
    let dt = final_time / steps as f64;
    Ok(TemporalGrid {
        final_time,
        steps,
        dt,
        weights: DVector::from_element(steps, dt),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn default_ops(n: usize) -> (Mesh, FeOperators) {
        let mesh = build_mesh(n, &[Side::Right]).unwrap();
        let ops = assemble_operators(
            &mesh,
            PdeCoefficients::default(),
            &VelocityField::default(),
            MassMode::Consistent,
        )
        .unwrap();
        (mesh, ops)
    }

    #[test]
    fn node_and_triangle_counts() {
        let m = build_mesh(30, &[Side::Right]).unwrap();
        assert_eq!(m.num_nodes(), 961);
        let m = build_mesh(2, &[Side::Right]).unwrap();
        assert_eq!((m.num_nodes(), m.triangles.len()), (9, 8));
        assert!(matches!(build_mesh(1, &[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn boundary_edges_enumerate_perimeter() {
        let m = build_mesh(10, &[Side::Right]).unwrap();
        // brute force: pairs of adjacent perimeter nodes
        let on_boundary = |p: [f64; 2]| {
            p[0].abs() < 1e-12 || p[1].abs() < 1e-12 || (p[0] - 1.0).abs() < 1e-12 || (p[1] - 1.0).abs() < 1e-12
        };
        let mut count = 0;
        for t in &m.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let (pa, pb) = (m.nodes[a], m.nodes[b]);
                let same_side = ((pa[0] - pb[0]).abs() < 1e-12 && (pa[0].abs() < 1e-12 || (pa[0] - 1.0).abs() < 1e-12))
                    || ((pa[1] - pb[1]).abs() < 1e-12 && (pa[1].abs() < 1e-12 || (pa[1] - 1.0).abs() < 1e-12));
                if on_boundary(pa) && on_boundary(pb) && same_side {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 40);
        assert_eq!(m.boundary_edges.len(), 40);
        let robin = m.boundary_edges.iter().filter(|e| e.tag == BoundaryTag::Robin).count();
        assert_eq!(robin, 10);
        assert!(m
            .boundary_edges
            .iter()
            .all(|e| (e.side == Side::Right) == (e.tag == BoundaryTag::Robin)));
    }

    #[test]
    fn triangles_are_counterclockwise() {
        let m = build_mesh(7, &[]).unwrap();
        let h2 = 1.0 / 49.0;
        for t in 0..m.triangles.len() {
            assert!((m.triangle_area(t) - 0.5 * h2).abs() < 1e-15);
        }
    }

    #[test]
    fn mass_and_stiffness_invariants() {
        for n in [5, 10, 20] {
            let (_, ops) = default_ops(n);
            assert!((ops.mass.sum() - 1.0).abs() < 1e-12);
            let k1 = ops.stiffness.mul_vec(&DVector::from_element(ops.dim(), 1.0));
            assert!(k1.amax() < 1e-12);
            assert!(ops.mass.is_symmetric());
            assert!(ops.stiffness.is_symmetric());
            assert!(ops.robin_mass.is_symmetric());
            // Robin mass integrates 1 over the right edge
            assert!((ops.robin_mass.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lumped_mass_preserves_area() {
        let mesh = build_mesh(6, &[Side::Right]).unwrap();
        let ops = assemble_operators(&mesh, PdeCoefficients::default(), &VelocityField::Zero, MassMode::Lumped).unwrap();
        assert!((ops.mass.sum() - 1.0).abs() < 1e-12);
        assert_eq!(ops.mass.nnz(), mesh.num_nodes());
    }

    #[test]
    fn stiffness_matches_hand_assembly_on_two_by_two_mesh() {
        let (_, ops) = default_ops(2);
        // Local stiffness of the two right triangles of a cell (h cancels in 2D).
        let local_abc = [[0.5, -0.5, 0.0], [-0.5, 1.0, -0.5], [0.0, -0.5, 0.5]];
        let local_acd = [[0.5, 0.0, -0.5], [0.0, 0.5, -0.5], [-0.5, -0.5, 1.0]];
        let mut k = DMatrix::<f64>::zeros(9, 9);
        let idx = |i: usize, j: usize| j * 3 + i;
        for j in 0..2 {
            for i in 0..2 {
                let t1 = [idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)];
                let t2 = [idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)];
                for a in 0..3 {
                    for b in 0..3 {
                        k[(t1[a], t1[b])] += local_abc[a][b];
                        k[(t2[a], t2[b])] += local_acd[a][b];
                    }
                }
            }
        }
        assert!((ops.stiffness.to_dense() - k).amax() < 1e-14);
        // center node: 4 on the diagonal, -1 to the four axis neighbours
        assert!((ops.stiffness.get(4, 4) - 4.0).abs() < 1e-14);
    }

    #[test]
    fn zero_ambient_gives_zero_load() {
        let mesh = build_mesh(4, &[Side::Right]).unwrap();
        let coeffs = PdeCoefficients {
            kappa: 1.0,
            gamma_h: -1.0,
            gamma_a: 0.0,
        };
        let ops = assemble_operators(&mesh, coeffs, &VelocityField::Zero, MassMode::Consistent).unwrap();
        assert!(ops.robin_load.iter().all(|&v| v == 0.0));
        assert!(ops.advection.triplets().all(|(_, _, v)| v == 0.0));
    }

    #[test]
    fn robin_load_is_supported_on_robin_nodes() {
        let mesh = build_mesh(5, &[Side::Right]).unwrap();
        let coeffs = PdeCoefficients {
            kappa: 0.1,
            gamma_h: -2.0,
            gamma_a: 3.0,
        };
        let ops = assemble_operators(&mesh, coeffs, &VelocityField::Zero, MassMode::Consistent).unwrap();
        for (k, p) in mesh.nodes.iter().enumerate() {
            if (p[0] - 1.0).abs() > 1e-12 {
                assert_eq!(ops.robin_load[k], 0.0);
            }
        }
        // total = -kappa * gamma_h * gamma_a * |right edge|
        assert!((ops.robin_load.sum() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_coefficients() {
        let mesh = build_mesh(3, &[Side::Right]).unwrap();
        let bad_kappa = PdeCoefficients {
            kappa: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            assemble_operators(&mesh, bad_kappa, &VelocityField::Zero, MassMode::Consistent),
            Err(Error::InvalidArgument(_))
        ));
        let bad_gamma = PdeCoefficients {
            gamma_h: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            assemble_operators(&mesh, bad_gamma, &VelocityField::Zero, MassMode::Consistent),
            Err(Error::Config(_))
        ));
    }

    /// Three-point (edge midpoint) rule, exact for quadratics on a triangle.
    fn midpoint_rule(p: [[f64; 2]; 3], area: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
        let mid = |a: [f64; 2], b: [f64; 2]| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let ms = [mid(p[0], p[1]), mid(p[1], p[2]), mid(p[2], p[0])];
        area / 3.0 * ms.iter().map(|m| f(m[0], m[1])).sum::<f64>()
    }

    #[test]
    fn advection_matches_quadrature_and_boundary_flux() {
        let (mesh, ops) = default_ops(8);
        let vel = VelocityField::default();
        let u = mesh.interpolate(|x, y| x * x + 0.5 * y - x * y);
        let ones = DVector::from_element(mesh.num_nodes(), 1.0);
        // 1ᵀ N u = ∫ v·∇u_h, computed per triangle with an independent rule
        let mut oracle = 0.0;
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let p = tri.map(|k| mesh.nodes[k]);
            let area = mesh.triangle_area(t);
            let g = gradients(p, area);
            let grad_u = [
                (0..3).map(|a| u[tri[a]] * g[a][0]).sum::<f64>(),
                (0..3).map(|a| u[tri[a]] * g[a][1]).sum::<f64>(),
            ];
            oracle += midpoint_rule(p, area, |x, y| {
                let v = vel.eval(x, y);
                v[0] * grad_u[0] + v[1] * grad_u[1]
            });
        }
        let got = ones.dot(&ops.advection.mul_vec(&u));
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        // divergence-free v: ∫ v·∇u = ∮ u v·n (Simpson is exact for the quadratic integrand)
        let mut flux = 0.0;
        for e in &mesh.boundary_edges {
            let [a, b] = e.nodes.map(|k| mesh.nodes[k]);
            let len = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            let normal = match e.side {
                Side::Bottom => [0.0, -1.0],
                Side::Right => [1.0, 0.0],
                Side::Top => [0.0, 1.0],
                Side::Left => [-1.0, 0.0],
            };
            let f = |s: f64| {
                let x = a[0] + s * (b[0] - a[0]);
                let y = a[1] + s * (b[1] - a[1]);
                let uh = (1.0 - s) * u[e.nodes[0]] + s * u[e.nodes[1]];
                let v = vel.eval(x, y);
                uh * (v[0] * normal[0] + v[1] * normal[1])
            };
            flux += len / 6.0 * (f(0.0) + 4.0 * f(0.5) + f(1.0));
        }
        assert!((got - flux).abs() < 1e-12, "{got} vs flux {flux}");
        // constants are transported without production
        assert!(ops.advection.mul_vec(&ones).amax() < 1e-12);
    }

    #[test]
    fn temporal_grid_weights() {
        let g = assemble_temporal(1.0, 20).unwrap();
        assert!((g.dt - 0.05).abs() < 1e-15);
        assert!((g.weights.sum() - 1.0).abs() < 1e-12);
        assert_eq!(assemble_temporal(1.0, 1).unwrap().weights.as_slice(), &[1.0]);
        assert!(assemble_temporal(2.0, 4).unwrap().weights.iter().all(|&w| w == 0.5));
        assert!(matches!(assemble_temporal(1.0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn velocity_parsing() {
        assert_eq!(VelocityField::parse("zero").unwrap(), VelocityField::Zero);
        assert_eq!(VelocityField::parse("constant:1,-2").unwrap(), VelocityField::Constant([1.0, -2.0]));
        assert_eq!(VelocityField::parse("rotational").unwrap(), VelocityField::default());
        assert!(VelocityField::parse("swirl").is_err());
        let v = VelocityField::default().eval(1.0, 0.5);
        // counterclockwise about the center: pointing up on the right
        assert_eq!(v, [0.0, 0.5]);
    }
}
