//! Reference-element utilities for bilinear quadrilaterals.
//!
//! The reference element is [-1,1]^2 with corners in counter-clockwise
//! order: (-1,-1), (1,-1), (1,1), (-1,1). Faces are straight segments, so
//! the bilinear map restricted to a face is affine in the face parameter.

/// 1D Gauss point offset for the 2-point rule on [-1,1].
pub const GAUSS_1D_2: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

/// Reference corners in counter-clockwise order.
pub const REF_CORNERS: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

/// 2x2 tensor Gauss rule on the reference square: (xi, eta, weight).
pub fn gauss_2x2() -> [(f64, f64, f64); 4] {
    let g = GAUSS_1D_2;
    [
        (-g, -g, 1.0),
        (g, -g, 1.0),
        (g, g, 1.0),
        (-g, g, 1.0),
    ]
}

/// 3x3 tensor Gauss rule, used for error norms.
pub fn gauss_3x3() -> [(f64, f64, f64); 9] {
    let g = 0.774_596_669_241_483_4; // sqrt(3/5)
    let w0 = 8.0 / 9.0;
    let w1 = 5.0 / 9.0;
    let pts = [(-g, w1), (0.0, w0), (g, w1)];
    let mut out = [(0.0, 0.0, 0.0); 9];
    let mut k = 0;
    for &(x, wx) in &pts {
        for &(y, wy) in &pts {
            out[k] = (x, y, wx * wy);
            k += 1;
        }
    }
    out
}

/// Parameters of the 2-point Gauss rule on a face, as fractions of the
/// segment from the first to the second endpoint. The order is fixed; flux
/// fields store their two values in this order.
pub fn face_gauss_params() -> [f64; 2] {
    [0.5 * (1.0 - GAUSS_1D_2), 0.5 * (1.0 + GAUSS_1D_2)]
}

/// Bilinear shape functions at a reference point.
pub fn shape(xi: f64, eta: f64) -> [f64; 4] {
    [
        0.25 * (1.0 - xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 - eta),
        0.25 * (1.0 + xi) * (1.0 + eta),
        0.25 * (1.0 - xi) * (1.0 + eta),
    ]
}

/// Reference gradients (d/dxi, d/deta) of the shape functions.
pub fn shape_grad(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    [
        [-0.25 * (1.0 - eta), -0.25 * (1.0 - xi)],
        [0.25 * (1.0 - eta), -0.25 * (1.0 + xi)],
        [0.25 * (1.0 + eta), 0.25 * (1.0 + xi)],
        [-0.25 * (1.0 + eta), 0.25 * (1.0 - xi)],
    ]
}

/// Map a reference point through the bilinear map defined by `corners`.
pub fn map_point(corners: &[[f64; 2]; 4], xi: f64, eta: f64) -> [f64; 2] {
    let n = shape(xi, eta);
    let mut p = [0.0, 0.0];
    for i in 0..4 {
        p[0] += n[i] * corners[i][0];
        p[1] += n[i] * corners[i][1];
    }
    p
}

/// Jacobian of the bilinear map: rows are (dx/dxi, dx/deta), (dy/dxi, dy/deta).
pub fn jacobian(corners: &[[f64; 2]; 4], xi: f64, eta: f64) -> [[f64; 2]; 2] {
    let g = shape_grad(xi, eta);
    let mut j = [[0.0; 2]; 2];
    for i in 0..4 {
        j[0][0] += g[i][0] * corners[i][0];
        j[0][1] += g[i][1] * corners[i][0];
        j[1][0] += g[i][0] * corners[i][1];
        j[1][1] += g[i][1] * corners[i][1];
    }
    j
}

pub fn det2(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Physical gradients of all four shape functions at a reference point.
pub fn shape_phys_grad(corners: &[[f64; 2]; 4], xi: f64, eta: f64) -> ([[f64; 2]; 4], f64) {
    let j = jacobian(corners, xi, eta);
    let det = det2(&j);
    // J^{-T} applied to the reference gradient
    let inv_t = [
        [j[1][1] / det, -j[1][0] / det],
        [-j[0][1] / det, j[0][0] / det],
    ];
    let g = shape_grad(xi, eta);
    let mut out = [[0.0; 2]; 4];
    for i in 0..4 {
        out[i][0] = inv_t[0][0] * g[i][0] + inv_t[0][1] * g[i][1];
        out[i][1] = inv_t[1][0] * g[i][0] + inv_t[1][1] * g[i][1];
    }
    (out, det)
}

/// Gradient of a nodal field on one element at a reference point.
pub fn field_grad(corners: &[[f64; 2]; 4], nodal: &[f64; 4], xi: f64, eta: f64) -> [f64; 2] {
    let (grads, _) = shape_phys_grad(corners, xi, eta);
    let mut g = [0.0, 0.0];
    for i in 0..4 {
        g[0] += nodal[i] * grads[i][0];
        g[1] += nodal[i] * grads[i][1];
    }
    g
}

/// Value of a nodal field on one element at a reference point.
pub fn field_value(nodal: &[f64; 4], xi: f64, eta: f64) -> f64 {
    let n = shape(xi, eta);
    (0..4).map(|i| n[i] * nodal[i]).sum()
}
