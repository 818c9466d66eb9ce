//! Structured mesh generators: boxes and the idealized half-ellipsoid
//! ventricle.
//!
//! The ventricle cavity is meshed by mapping a structured grid on the box
//! [-1,1] x [-1,1] x [-1,0] onto the half-ball with the smooth cube-to-sphere
//! map, then scaling by the cavity semi-axes. The myocardial shell is built
//! by extruding the cavity's curved surface radially between the inner and
//! outer ellipsoids, which makes the fluid/solid interface conforming
//! vertex-for-vertex by construction.

use nalgebra::Point3;

use super::{facet_vertices, BoundaryFacet, BoundaryTag, Mesh};
use crate::error::{Error, Result};

/// Geometry of the idealized ventricle. Lengths in meters.
#[derive(Debug, Clone)]
pub struct EllipsoidParams {
    /// Cavity (endocardial) semi-axes (a, b, c); the long axis is z.
    pub inner_semi_axes: [f64; 3],
    /// Epicardial semi-axes.
    pub outer_semi_axes: [f64; 3],
    /// Cells across the cavity cross-section (x and y).
    pub n_across: usize,
    /// Cells along the long axis.
    pub n_axial: usize,
    /// Radial cell layers in the wall.
    pub n_layers: usize,
    /// Mitral orifice cap on the base plane: center (x, y) and radius.
    pub mitral_center: [f64; 2],
    pub mitral_radius: f64,
    /// Aortic orifice cap on the base plane.
    pub aortic_center: [f64; 2],
    pub aortic_radius: f64,
}

impl Default for EllipsoidParams {
    fn default() -> Self {
        EllipsoidParams {
            inner_semi_axes: [0.02, 0.02, 0.06],
            outer_semi_axes: [0.03, 0.03, 0.07],
            n_across: 6,
            n_axial: 4,
            n_layers: 2,
            mitral_center: [-0.011, 0.0],
            mitral_radius: 0.0085,
            aortic_center: [0.011, 0.0],
            aortic_radius: 0.007,
        }
    }
}

/// Axis-aligned box with all boundary facets tagged `FluidBase`.
pub fn box_mesh(origin: [f64; 3], size: [f64; 3], n: [usize; 3]) -> Result<Mesh> {
    box_mesh_tagged(origin, size, n, [BoundaryTag::FluidBase; 6])
}

/// Axis-aligned box with per-side tags, ordered [-x, +x, -y, +y, -z, +z].
pub fn box_mesh_tagged(
    origin: [f64; 3],
    size: [f64; 3],
    n: [usize; 3],
    side_tags: [BoundaryTag; 6],
) -> Result<Mesh> {
    if n.iter().any(|&k| k == 0) {
        return Err(Error::Geometry("box resolution must be positive".into()));
    }
    if size.iter().any(|&s| s <= 0.0) {
        return Err(Error::Geometry("box size must be positive".into()));
    }
    let (nx, ny, nz) = (n[0], n[1], n[2]);
    let vid = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(Point3::new(
                    origin[0] + size[0] * i as f64 / nx as f64,
                    origin[1] + size[1] * j as f64 / ny as f64,
                    origin[2] + size[2] * k as f64 / nz as f64,
                ));
            }
        }
    }
    let mut cells = Vec::with_capacity(nx * ny * nz);
    let mut facets = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let cell = [
                    vid(i, j, k),
                    vid(i + 1, j, k),
                    vid(i + 1, j + 1, k),
                    vid(i, j + 1, k),
                    vid(i, j, k + 1),
                    vid(i + 1, j, k + 1),
                    vid(i + 1, j + 1, k + 1),
                    vid(i, j + 1, k + 1),
                ];
                let c = cells.len();
                cells.push(cell);
                // Local faces in HEX_FACES order: -z, +z, -y, +x, +y, -x.
                let sides = [
                    (k == 0, 0usize, side_tags[4]),
                    (k == nz - 1, 1, side_tags[5]),
                    (j == 0, 2, side_tags[2]),
                    (i == nx - 1, 3, side_tags[1]),
                    (j == ny - 1, 4, side_tags[3]),
                    (i == 0, 5, side_tags[0]),
                ];
                for (on_boundary, lf, tag) in sides {
                    if on_boundary {
                        facets.push(BoundaryFacet {
                            cell: c,
                            local_face: lf as u8,
                            vertices: facet_vertices(&cell, lf as u8),
                            tag,
                        });
                    }
                }
            }
        }
    }
    Mesh::new(vertices, cells, facets)
}

/// Smooth map from the unit cube [-1,1]^3 onto the unit ball; cube faces
/// land on the unit sphere.
fn cube_to_ball(x: f64, y: f64, z: f64) -> [f64; 3] {
    [
        x * (1.0 - y * y / 2.0 - z * z / 2.0 + y * y * z * z / 3.0).sqrt(),
        y * (1.0 - z * z / 2.0 - x * x / 2.0 + z * z * x * x / 3.0).sqrt(),
        z * (1.0 - x * x / 2.0 - y * y / 2.0 + x * x * y * y / 3.0).sqrt(),
    ]
}

/// Generate the conforming fluid cavity / myocardial shell pair for the
/// idealized half-ellipsoid ventricle (base plane at z = 0, apex at
/// negative z).
pub fn build_ellipsoid_ventricle(geom: &EllipsoidParams) -> Result<(Mesh, Mesh)> {
    for a in 0..3 {
        if geom.inner_semi_axes[a] <= 0.0 || geom.outer_semi_axes[a] <= geom.inner_semi_axes[a] {
            return Err(Error::Geometry(format!(
                "semi-axes must satisfy 0 < inner < outer (axis {a}: {} vs {})",
                geom.inner_semi_axes[a], geom.outer_semi_axes[a]
            )));
        }
    }
    if geom.n_across < 2 || geom.n_axial < 2 || geom.n_layers < 2 {
        return Err(Error::Geometry(
            "resolution counts must be at least 2 in each parametric direction".into(),
        ));
    }
    let center_dist = ((geom.mitral_center[0] - geom.aortic_center[0]).powi(2)
        + (geom.mitral_center[1] - geom.aortic_center[1]).powi(2))
    .sqrt();
    if center_dist <= geom.mitral_radius + geom.aortic_radius {
        return Err(Error::Geometry("valve orifice caps must be disjoint".into()));
    }

    let [ai, bi, ci] = geom.inner_semi_axes;
    let (nx, nz) = (geom.n_across, geom.n_axial);
    let vid = |i: usize, j: usize, k: usize| (k * (nx + 1) + j) * (nx + 1) + i;

    // Fluid vertices: structured grid on [-1,1]^2 x [-1,0] pushed through
    // the ball map. `unit` keeps the pre-scaling image for the extrusion.
    let mut vertices = Vec::with_capacity((nx + 1) * (nx + 1) * (nz + 1));
    let mut unit = Vec::with_capacity(vertices.capacity());
    for k in 0..=nz {
        for j in 0..=nx {
            for i in 0..=nx {
                let x = -1.0 + 2.0 * i as f64 / nx as f64;
                let y = -1.0 + 2.0 * j as f64 / nx as f64;
                // Graded axial spacing: a thicker apex layer keeps the
                // mapped corner cells well-shaped.
                let z = -1.0 + (k as f64 / nz as f64).powf(0.75);
                let p = cube_to_ball(x, y, z);
                unit.push(p);
                vertices.push(Point3::new(ai * p[0], bi * p[1], ci * p[2]));
            }
        }
    }
    let mut cells = Vec::with_capacity(nx * nx * nz);
    let mut facets = Vec::new();
    for k in 0..nz {
        for j in 0..nx {
            for i in 0..nx {
                let cell = [
                    vid(i, j, k),
                    vid(i + 1, j, k),
                    vid(i + 1, j + 1, k),
                    vid(i, j + 1, k),
                    vid(i, j, k + 1),
                    vid(i + 1, j, k + 1),
                    vid(i + 1, j + 1, k + 1),
                    vid(i, j + 1, k + 1),
                ];
                let c = cells.len();
                cells.push(cell);
                let mut push = |lf: usize, tag: BoundaryTag| {
                    facets.push(BoundaryFacet {
                        cell: c,
                        local_face: lf as u8,
                        vertices: facet_vertices(&cell, lf as u8),
                        tag,
                    });
                };
                // Curved walls and apex are the interface with the muscle.
                if k == 0 {
                    push(0, BoundaryTag::Interface);
                }
                if j == 0 {
                    push(2, BoundaryTag::Interface);
                }
                if i == nx - 1 {
                    push(3, BoundaryTag::Interface);
                }
                if j == nx - 1 {
                    push(4, BoundaryTag::Interface);
                }
                if i == 0 {
                    push(5, BoundaryTag::Interface);
                }
                // Base plane: orifice caps override the wall tag.
                if k == nz - 1 {
                    let verts = facet_vertices(&cell, 1);
                    let cx: f64 = verts.iter().map(|&v| vertices[v].x).sum::<f64>() / 4.0;
                    let cy: f64 = verts.iter().map(|&v| vertices[v].y).sum::<f64>() / 4.0;
                    let in_cap = |center: [f64; 2], r: f64| {
                        ((cx - center[0]).powi(2) + (cy - center[1]).powi(2)).sqrt() <= r
                    };
                    let tag = if in_cap(geom.mitral_center, geom.mitral_radius) {
                        BoundaryTag::MitralOrifice
                    } else if in_cap(geom.aortic_center, geom.aortic_radius) {
                        BoundaryTag::AorticOrifice
                    } else {
                        BoundaryTag::FluidBase
                    };
                    push(1, tag);
                }
            }
        }
    }
    // Each orifice needs at least one vertex interior to its cap (not
    // shared with wall facets), otherwise the no-slip wall pins the whole
    // cap and no flow can pass.
    let wall_verts: std::collections::HashSet<usize> = facets
        .iter()
        .filter(|f| f.tag == BoundaryTag::FluidBase || f.tag == BoundaryTag::Interface)
        .flat_map(|f| f.vertices.iter().copied())
        .collect();
    for (tag, name) in [
        (BoundaryTag::MitralOrifice, "mitral"),
        (BoundaryTag::AorticOrifice, "aortic"),
    ] {
        let free = facets
            .iter()
            .filter(|f| f.tag == tag)
            .flat_map(|f| f.vertices.iter())
            .any(|v| !wall_verts.contains(v));
        if !free {
            return Err(Error::Geometry(format!(
                "{name} orifice cap has no interior vertex at this resolution"
            )));
        }
    }
    let cap_verts = |tag: BoundaryTag| -> std::collections::HashSet<usize> {
        facets
            .iter()
            .filter(|f| f.tag == tag)
            .flat_map(|f| f.vertices.iter().copied())
            .collect()
    };
    if !cap_verts(BoundaryTag::MitralOrifice).is_disjoint(&cap_verts(BoundaryTag::AorticOrifice)) {
        return Err(Error::Geometry(
            "valve orifice caps share mesh vertices at this resolution".into(),
        ));
    }
    let fluid = Mesh::new(vertices, cells, facets)?;

    let solid = extrude_shell(&fluid, &unit, geom)?;
    Ok((fluid, solid))
}

/// Extrude the fluid interface surface radially between the inner and outer
/// ellipsoids. Layer 0 copies the fluid vertex coordinates bit-for-bit.
fn extrude_shell(fluid: &Mesh, unit: &[[f64; 3]], geom: &EllipsoidParams) -> Result<Mesh> {
    let interface: Vec<&BoundaryFacet> = fluid.facets_with(BoundaryTag::Interface).collect();
    // Unique surface vertices in first-seen order.
    let mut surf_index = vec![usize::MAX; fluid.n_vertices()];
    let mut surf_verts = Vec::new();
    for f in &interface {
        for &v in &f.vertices {
            if surf_index[v] == usize::MAX {
                surf_index[v] = surf_verts.len();
                surf_verts.push(v);
            }
        }
    }
    let n_surf = surf_verts.len();
    let n_layers = geom.n_layers;
    let [ao, bo, co] = geom.outer_semi_axes;
    let [ai, bi, ci] = geom.inner_semi_axes;

    let mut vertices = Vec::with_capacity(n_surf * (n_layers + 1));
    for layer in 0..=n_layers {
        let t = layer as f64 / n_layers as f64;
        let (at, bt, ct) = (
            (1.0 - t) * ai + t * ao,
            (1.0 - t) * bi + t * bo,
            (1.0 - t) * ci + t * co,
        );
        for &v in &surf_verts {
            if layer == 0 {
                vertices.push(fluid.vertices[v]);
            } else {
                let u = unit[v];
                let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                vertices.push(Point3::new(
                    at * u[0] / norm,
                    bt * u[1] / norm,
                    ct * u[2] / norm,
                ));
            }
        }
    }

    // Boundary edges of the interface surface (the basal rim) appear in
    // exactly one interface quad.
    let mut edge_count = std::collections::HashMap::new();
    for f in &interface {
        for e in 0..4 {
            let mut key = [f.vertices[e], f.vertices[(e + 1) % 4]];
            key.sort_unstable();
            *edge_count.entry(key).or_insert(0usize) += 1;
        }
    }

    let mut cells = Vec::with_capacity(interface.len() * n_layers);
    let mut facets = Vec::new();
    for f in &interface {
        let q: Vec<usize> = f.vertices.iter().map(|&v| surf_index[v]).collect();
        for layer in 0..n_layers {
            let lo = layer * n_surf;
            let hi = (layer + 1) * n_surf;
            let cell = [
                q[0] + lo,
                q[1] + lo,
                q[2] + lo,
                q[3] + lo,
                q[0] + hi,
                q[1] + hi,
                q[2] + hi,
                q[3] + hi,
            ];
            let c = cells.len();
            cells.push(cell);
            if layer == 0 {
                facets.push(BoundaryFacet {
                    cell: c,
                    local_face: 0,
                    vertices: facet_vertices(&cell, 0),
                    tag: BoundaryTag::Interface,
                });
            }
            if layer == n_layers - 1 {
                facets.push(BoundaryFacet {
                    cell: c,
                    local_face: 1,
                    vertices: facet_vertices(&cell, 1),
                    tag: BoundaryTag::Epicardium,
                });
            }
            // Side faces over rim edges form the basal annulus.
            for (lf, (e0, e1)) in [(2usize, (0usize, 1usize)), (3, (1, 2)), (4, (2, 3)), (5, (3, 0))]
            {
                let mut key = [f.vertices[e0], f.vertices[e1]];
                key.sort_unstable();
                if edge_count[&key] == 1 {
                    facets.push(BoundaryFacet {
                        cell: c,
                        local_face: lf as u8,
                        vertices: facet_vertices(&cell, lf as u8),
                        tag: BoundaryTag::SolidBase,
                    });
                }
            }
        }
    }
    Mesh::new(vertices, cells, facets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::check_conforming;

    #[test]
    fn ellipsoid_cavity_volume_matches_half_ellipsoid() {
        let geom = EllipsoidParams {
            n_across: 8,
            n_axial: 6,
            ..Default::default()
        };
        let (fluid, _) = build_ellipsoid_ventricle(&geom).unwrap();
        let exact = 2.0 / 3.0 * std::f64::consts::PI * 0.02 * 0.02 * 0.06;
        let v = fluid.total_volume(&fluid.vertices);
        assert!(
            (v - exact).abs() / exact < 0.02,
            "cavity volume {v:.6e} vs analytic {exact:.6e}"
        );
    }

    #[test]
    fn ellipsoid_meshes_conform_at_interface() {
        let (fluid, solid) = build_ellipsoid_ventricle(&EllipsoidParams::default()).unwrap();
        check_conforming(&fluid, &solid, BoundaryTag::Interface).unwrap();
        // Orifices appear only on the fluid mesh.
        assert!(solid.facets_with(BoundaryTag::MitralOrifice).count() == 0);
        assert!(solid.facets_with(BoundaryTag::AorticOrifice).count() == 0);
        assert!(fluid.facets_with(BoundaryTag::MitralOrifice).count() >= 1);
        assert!(fluid.facets_with(BoundaryTag::AorticOrifice).count() >= 1);
        assert!(solid.facets_with(BoundaryTag::Epicardium).count() > 0);
        assert!(solid.facets_with(BoundaryTag::SolidBase).count() > 0);
    }

    #[test]
    fn resolution_doubling_halves_h() {
        let coarse = EllipsoidParams::default();
        let fine = EllipsoidParams {
            n_across: 12,
            n_axial: 8,
            n_layers: 4,
            ..Default::default()
        };
        let (fc, sc) = build_ellipsoid_ventricle(&coarse).unwrap();
        let (ff, sf) = build_ellipsoid_ventricle(&fine).unwrap();
        assert!((fc.h / ff.h - 2.0).abs() < 0.2);
        assert!((sc.h / sf.h - 2.0).abs() < 0.2);
    }

    #[test]
    fn degenerate_axes_rejected() {
        let geom = EllipsoidParams {
            inner_semi_axes: [0.03, 0.02, 0.06],
            outer_semi_axes: [0.03, 0.03, 0.07],
            ..Default::default()
        };
        assert!(matches!(
            build_ellipsoid_ventricle(&geom),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn too_coarse_resolution_rejected() {
        let geom = EllipsoidParams {
            n_across: 1,
            ..Default::default()
        };
        assert!(build_ellipsoid_ventricle(&geom).is_err());
    }

    #[test]
    fn epicardial_normals_point_outward_radially() {
        let (_, solid) = build_ellipsoid_ventricle(&EllipsoidParams::default()).unwrap();
        for f in solid.facets_with(BoundaryTag::Epicardium) {
            let n = solid.facet_normal_unchecked(f.cell, f.local_face, &solid.vertices);
            let c: nalgebra::Vector3<f64> = f
                .vertices
                .iter()
                .map(|&v| solid.vertices[v].coords)
                .sum::<nalgebra::Vector3<f64>>()
                / 4.0;
            // Radial direction in the scaled frame.
            let radial = nalgebra::Vector3::new(c.x / 0.03, c.y / 0.03, c.z / 0.07);
            assert!(n.dot(&radial) > 0.0);
        }
    }

    #[test]
    fn mean_h_consistent_with_definition() {
        let (fluid, _) = build_ellipsoid_ventricle(&EllipsoidParams::default()).unwrap();
        let mean: f64 = (0..fluid.n_cells())
            .map(|c| fluid.cell_diameter(c, &fluid.vertices))
            .sum::<f64>()
            / fluid.n_cells() as f64;
        assert!((fluid.h - mean).abs() <= 1e-12 * mean);
    }
}
