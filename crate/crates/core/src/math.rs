//! Quaternion, small-matrix and spherical-harmonics helpers shared by the
//! motion and render modules.

/// Identity rotation in (w, x, y, z) order.
pub const QUAT_IDENTITY: [f32; 4] = [1.0, 0.0, 0.0, 0.0];

/// Hamilton product `a * b` in (w, x, y, z) order, evaluated in f64.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

pub fn quat_conj(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn quat_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Multiplicative inverse `conj(q) / |q|²`.
pub fn quat_inverse(q: [f64; 4]) -> [f64; 4] {
    let n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
    let c = quat_conj(q);
    [c[0] / n2, c[1] / n2, c[2] / n2, c[3] / n2]
}

/// Normalizes in f64 and rounds to f32. A zero quaternion maps to identity.
pub fn quat_normalize_f32(q: [f64; 4]) -> [f32; 4] {
    let n = quat_norm(q);
    if n == 0.0 || !n.is_finite() {
        return QUAT_IDENTITY;
    }
    [
        (q[0] / n) as f32,
        (q[1] / n) as f32,
        (q[2] / n) as f32,
        (q[3] / n) as f32,
    ]
}

pub fn to_f64x4(q: [f32; 4]) -> [f64; 4] {
    [q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64]
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let (s, c) = (angle * 0.5).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

/// Rotation matrix (row-major) of a quaternion; the input is normalized first.
pub fn quat_to_mat3(q: [f32; 4]) -> [[f64; 3]; 3] {
    let q = to_f64x4(q);
    let n = quat_norm(q);
    let (w, x, y, z) = if n > 0.0 {
        (q[0] / n, q[1] / n, q[2] / n, q[3] / n)
    } else {
        (1.0, 0.0, 0.0, 0.0)
    };
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub type Mat3 = [[f64; 3]; 3];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// Number of SH coefficients (all three color channels) for a degree.
pub const fn sh_coeff_count(degree: u8) -> usize {
    let d = degree as usize + 1;
    3 * d * d
}

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Evaluates RGB color from SH coefficients laid out as `sh[3 * k + channel]`
/// along the unit view direction `dir`. The usual +0.5 offset is applied and
/// the result clamped to [0, 1].
pub fn eval_sh(degree: u8, sh: &[f32], dir: [f64; 3]) -> [f32; 3] {
    let mut basis = [0.0f64; 16];
    basis[0] = SH_C0;
    let [x, y, z] = dir;
    if degree >= 1 {
        basis[1] = -SH_C1 * y;
        basis[2] = SH_C1 * z;
        basis[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, yz, xz) = (x * y, y * z, x * z);
        basis[4] = SH_C2[0] * xy;
        basis[5] = SH_C2[1] * yz;
        basis[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        basis[7] = SH_C2[3] * xz;
        basis[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            basis[9] = SH_C3[0] * y * (3.0 * xx - yy);
            basis[10] = SH_C3[1] * xy * z;
            basis[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            basis[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            basis[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            basis[14] = SH_C3[5] * z * (xx - yy);
            basis[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    let n = (degree as usize + 1) * (degree as usize + 1);
    let mut rgb = [0.5f64; 3];
    for (k, b) in basis.iter().take(n).enumerate() {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += b * sh[3 * k + c] as f64;
        }
    }
    rgb.map(|v| v.clamp(0.0, 1.0) as f32)
}
