//! Pointwise Euler kernels and their vector-Jacobian products.
//!
//! Normals are face-length scaled, so `F(U)·N` already includes the face
//! length and the Lax–Friedrichs speed is `|u·N| + a|N|`.

pub type Cons = [f64; 4];

#[inline]
pub fn pressure(u: &Cons, gamma: f64) -> f64 {
    (gamma - 1.0) * (u[3] - 0.5 * (u[1] * u[1] + u[2] * u[2]) / u[0])
}

/// `(rho, vx, vy, p)` from conservative variables.
#[inline]
pub fn primitive(u: &Cons, gamma: f64) -> [f64; 4] {
    [u[0], u[1] / u[0], u[2] / u[0], pressure(u, gamma)]
}

/// Conservative variables from `(rho, vx, vy, p)`.
#[inline]
pub fn conservative(w: &[f64; 4], gamma: f64) -> Cons {
    let [r, vx, vy, p] = *w;
    [
        r,
        r * vx,
        r * vy,
        p / (gamma - 1.0) + 0.5 * r * (vx * vx + vy * vy),
    ]
}

pub fn primitive_vjp(u: &Cons, gamma: f64, wbar: &[f64; 4]) -> Cons {
    let [r, m, n, _] = *u;
    let vx = m / r;
    let vy = n / r;
    let g1 = gamma - 1.0;
    let [rb, vxb, vyb, pb] = *wbar;
    [
        rb - vxb * vx / r - vyb * vy / r + pb * g1 * 0.5 * (vx * vx + vy * vy),
        vxb / r - pb * g1 * vx,
        vyb / r - pb * g1 * vy,
        pb * g1,
    ]
}

#[inline]
pub fn sound_speed(u: &Cons, gamma: f64) -> f64 {
    (gamma * pressure(u, gamma) / u[0]).sqrt()
}

/// Cotangent of `(rho, m, n, E)` given cotangents of `p` and `a`.
fn pressure_sound_vjp(u: &Cons, gamma: f64, pbar: f64, abar: f64) -> Cons {
    let [r, m, n, _] = *u;
    let p = pressure(u, gamma);
    let a = (gamma * p / r).sqrt();
    // a = sqrt(gamma p / rho)
    let pbar = pbar + abar * gamma / (2.0 * a * r);
    let rbar_a = -abar * a / (2.0 * r);
    let g1 = gamma - 1.0;
    [
        rbar_a + pbar * g1 * 0.5 * (m * m + n * n) / (r * r),
        -pbar * g1 * m / r,
        -pbar * g1 * n / r,
        pbar * g1,
    ]
}

/// Physical flux through scaled normal `nv`.
#[inline]
pub fn normal_flux(u: &Cons, nv: [f64; 2], gamma: f64) -> Cons {
    let [r, m, n, e] = *u;
    let q = (m * nv[0] + n * nv[1]) / r;
    let p = pressure(u, gamma);
    [r * q, m * q + p * nv[0], n * q + p * nv[1], (e + p) * q]
}

fn normal_flux_vjp(u: &Cons, nv: [f64; 2], gamma: f64, fb: &Cons) -> (Cons, [f64; 2]) {
    let [r, m, n, e] = *u;
    let q = (m * nv[0] + n * nv[1]) / r;
    let p = pressure(u, gamma);
    let qb = fb[0] * r + fb[1] * m + fb[2] * n + fb[3] * (e + p);
    let pb = fb[1] * nv[0] + fb[2] * nv[1] + fb[3] * q;
    let mut ub = [fb[0] * q, fb[1] * q, fb[2] * q, fb[3] * q];
    let mut nb = [fb[1] * p, fb[2] * p];
    // q = (m nx + n ny) / r
    ub[0] -= qb * q / r;
    ub[1] += qb * nv[0] / r;
    ub[2] += qb * nv[1] / r;
    nb[0] += qb * m / r;
    nb[1] += qb * n / r;
    let pu = pressure_sound_vjp(u, gamma, pb, 0.0);
    for i in 0..4 {
        ub[i] += pu[i];
    }
    (ub, nb)
}

/// Face speed `|u·N| + a|N|`.
#[inline]
fn face_speed(u: &Cons, nv: [f64; 2], gamma: f64) -> f64 {
    let q = (u[1] * nv[0] + u[2] * nv[1]) / u[0];
    q.abs() + sound_speed(u, gamma) * nv[0].hypot(nv[1])
}

fn face_speed_vjp(u: &Cons, nv: [f64; 2], gamma: f64, sb: f64) -> (Cons, [f64; 2]) {
    let [r, m, n, _] = *u;
    let q = (m * nv[0] + n * nv[1]) / r;
    let len = nv[0].hypot(nv[1]);
    let a = sound_speed(u, gamma);
    let qb = if q > 0.0 {
        sb
    } else if q < 0.0 {
        -sb
    } else {
        0.0
    };
    let ab = sb * len;
    let mut ub = pressure_sound_vjp(u, gamma, 0.0, ab);
    ub[0] -= qb * q / r;
    ub[1] += qb * nv[0] / r;
    ub[2] += qb * nv[1] / r;
    let nb = [
        qb * m / r + sb * a * nv[0] / len,
        qb * n / r + sb * a * nv[1] / len,
    ];
    (ub, nb)
}

/// Local Lax–Friedrichs flux from `ul` (inside) to `ur` (outside).
pub fn llf_flux(ul: &Cons, ur: &Cons, nv: [f64; 2], gamma: f64) -> Cons {
    let fl = normal_flux(ul, nv, gamma);
    let fr = normal_flux(ur, nv, gamma);
    let s = face_speed(ul, nv, gamma).max(face_speed(ur, nv, gamma));
    let mut g = [0.0; 4];
    for i in 0..4 {
        g[i] = 0.5 * (fl[i] + fr[i]) - 0.5 * s * (ur[i] - ul[i]);
    }
    g
}

/// Returns cotangents of `(ul, ur, nv)`.
pub fn llf_flux_vjp(ul: &Cons, ur: &Cons, nv: [f64; 2], gamma: f64, gb: &Cons) -> (Cons, Cons, [f64; 2]) {
    let sl = face_speed(ul, nv, gamma);
    let sr = face_speed(ur, nv, gamma);
    let s = sl.max(sr);
    let half = [0.5 * gb[0], 0.5 * gb[1], 0.5 * gb[2], 0.5 * gb[3]];
    let (mut ubl, mut nb) = normal_flux_vjp(ul, nv, gamma, &half);
    let (mut ubr, nbr) = normal_flux_vjp(ur, nv, gamma, &half);
    nb[0] += nbr[0];
    nb[1] += nbr[1];
    let mut sb = 0.0;
    for i in 0..4 {
        ubr[i] -= 0.5 * s * gb[i];
        ubl[i] += 0.5 * s * gb[i];
        sb -= 0.5 * gb[i] * (ur[i] - ul[i]);
    }
    let (side, target) = if sl >= sr { (ul, &mut ubl) } else { (ur, &mut ubr) };
    let (us, ns) = face_speed_vjp(side, nv, gamma, sb);
    for i in 0..4 {
        target[i] += us[i];
    }
    nb[0] += ns[0];
    nb[1] += ns[1];
    (ubl, ubr, nb)
}

/// Slip wall: only the pressure force crosses the face.
pub fn wall_flux(ul: &Cons, nv: [f64; 2], gamma: f64) -> Cons {
    let p = pressure(ul, gamma);
    [0.0, p * nv[0], p * nv[1], 0.0]
}

pub fn wall_flux_vjp(ul: &Cons, nv: [f64; 2], gamma: f64, gb: &Cons) -> (Cons, [f64; 2]) {
    let p = pressure(ul, gamma);
    let pb = gb[1] * nv[0] + gb[2] * nv[1];
    (pressure_sound_vjp(ul, gamma, pb, 0.0), [gb[1] * p, gb[2] * p])
}

/// Cell signal speed `|v| + a` used for the local pseudo-time step.
pub fn cell_speed(u: &Cons, gamma: f64) -> f64 {
    let vx = u[1] / u[0];
    let vy = u[2] / u[0];
    vx.hypot(vy) + sound_speed(u, gamma)
}

pub fn cell_speed_vjp(u: &Cons, gamma: f64, sb: f64) -> Cons {
    let r = u[0];
    let vx = u[1] / r;
    let vy = u[2] / r;
    let speed = vx.hypot(vy);
    let mut ub = pressure_sound_vjp(u, gamma, 0.0, sb);
    if speed > 0.0 {
        let vxb = sb * vx / speed;
        let vyb = sb * vy / speed;
        ub[0] -= (vxb * vx + vyb * vy) / r;
        ub[1] += vxb / r;
        ub[2] += vyb / r;
    }
    ub
}
