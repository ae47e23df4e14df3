//! Motion parameters, unit quaternions, binary16 conversion and the
//! interpolation kernels used on both ends of the stream.
//!
//! A frame carries 215 reals laid out as:
//!
//! | range       | content                                         |
//! |-------------|-------------------------------------------------|
//! | `0..72`     | 24 body joints, axis-angle triples (radians)    |
//! | `72..75`    | root translation (meters)                       |
//! | `75..125`   | 50 facial expression coefficients               |
//! | `125..215`  | 2 x 15 hand joints, axis-angle triples (radians)|
//!
//! Only the axis-angle triples are treated as rotations by [`lerp_params`].

use half::f16;
use thiserror::Error;

pub const BODY_LEN: usize = 75;
pub const FACE_LEN: usize = 50;
pub const HAND_LEN: usize = 90;
pub const PARAM_LEN: usize = BODY_LEN + FACE_LEN + HAND_LEN;

pub const BODY_JOINTS: usize = 24;
pub const HAND_JOINTS: usize = 30;

pub const BODY_OFFSET: usize = 0;
pub const ROOT_TRANSLATION_OFFSET: usize = 72;
pub const FACE_OFFSET: usize = BODY_LEN;
pub const HAND_OFFSET: usize = BODY_LEN + FACE_LEN;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("value {value} at index {index} is outside the binary16 range")]
    Range { index: usize, value: f64 },
    #[error("frames {first} and {second} are not adjacent")]
    Sequencing { first: u32, second: u32 },
}

/// Offsets of every axis-angle triple inside the 215-vector.
pub fn rotation_triples() -> impl Iterator<Item = usize> {
    (0..BODY_JOINTS)
        .map(|j| BODY_OFFSET + 3 * j)
        .chain((0..HAND_JOINTS).map(|j| HAND_OFFSET + 3 * j))
}

fn is_rotation_index(i: usize) -> bool {
    !(ROOT_TRANSLATION_OFFSET..HAND_OFFSET).contains(&i)
}

/// Column name of entry `i` in the trace CSV format.
pub fn param_name(i: usize) -> String {
    const AXES: [&str; 3] = ["x", "y", "z"];
    match i {
        i if i < ROOT_TRANSLATION_OFFSET => format!("body_j{:02}_{}", i / 3, AXES[i % 3]),
        i if i < FACE_OFFSET => format!("root_t{}", AXES[i - ROOT_TRANSLATION_OFFSET]),
        i if i < HAND_OFFSET => format!("face_{:02}", i - FACE_OFFSET),
        i => {
            let k = i - HAND_OFFSET;
            let side = if k < HAND_LEN / 2 { "l" } else { "r" };
            format!("hand_{}_j{:02}_{}", side, (k % 45) / 3, AXES[k % 3])
        }
    }
}

/// One frame of driving parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    pub frame_index: u32,
    pub capture_timestamp_us: u64,
    values: [f64; PARAM_LEN],
}

impl MotionParams {
    pub fn new(
        frame_index: u32,
        capture_timestamp_us: u64,
        body_pose: &[f64],
        face_expr: &[f64],
        hand_pose: &[f64],
    ) -> Result<Self, ParamError> {
        if body_pose.len() != BODY_LEN || face_expr.len() != FACE_LEN || hand_pose.len() != HAND_LEN
        {
            return Err(ParamError::InvalidArgument(format!(
                "expected 75/50/90 entries, got {}/{}/{}",
                body_pose.len(),
                face_expr.len(),
                hand_pose.len()
            )));
        }
        let mut values = [0.0; PARAM_LEN];
        values[..BODY_LEN].copy_from_slice(body_pose);
        values[FACE_OFFSET..HAND_OFFSET].copy_from_slice(face_expr);
        values[HAND_OFFSET..].copy_from_slice(hand_pose);
        Self::from_values(frame_index, capture_timestamp_us, values)
    }

    pub fn from_values(
        frame_index: u32,
        capture_timestamp_us: u64,
        values: [f64; PARAM_LEN],
    ) -> Result<Self, ParamError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ParamError::InvalidArgument(format!(
                "entry {i} ({}) is not finite",
                param_name(i)
            )));
        }
        Ok(Self {
            frame_index,
            capture_timestamp_us,
            values,
        })
    }

    /// Rest pose: every rotation identity, zero translation and expression.
    pub fn rest(frame_index: u32, capture_timestamp_us: u64) -> Self {
        Self {
            frame_index,
            capture_timestamp_us,
            values: [0.0; PARAM_LEN],
        }
    }

    pub fn values(&self) -> &[f64; PARAM_LEN] {
        &self.values
    }

    pub fn body_pose(&self) -> &[f64] {
        &self.values[..BODY_LEN]
    }

    pub fn face_expr(&self) -> &[f64] {
        &self.values[FACE_OFFSET..HAND_OFFSET]
    }

    pub fn hand_pose(&self) -> &[f64] {
        &self.values[HAND_OFFSET..]
    }

    pub fn root_translation(&self) -> [f64; 3] {
        let t = &self.values[ROOT_TRANSLATION_OFFSET..FACE_OFFSET];
        [t[0], t[1], t[2]]
    }

    /// Axis-angle triple of body joint `j`.
    pub fn body_joint(&self, j: usize) -> [f64; 3] {
        let o = BODY_OFFSET + 3 * j;
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }
}

/// Unit quaternion stored in canonical sign (first non-zero of w, x, y, z is
/// positive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes. Fails on non-finite or zero input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, ParamError> {
        if ![w, x, y, z].iter().all(|v| v.is_finite()) {
            return Err(ParamError::InvalidArgument(
                "non-finite quaternion component".into(),
            ));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n < 1e-300 {
            return Err(ParamError::InvalidArgument("zero quaternion".into()));
        }
        Ok(Self::canonical(w / n, x / n, y / n, z / n))
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        let lead = [w, x, y, z].into_iter().find(|v| *v != 0.0).unwrap_or(1.0);
        if lead < 0.0 {
            Self {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Self { w, x, y, z }
        }
    }

    fn renormalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::canonical(w / n, x / n, y / n, z / n)
    }

    pub fn from_axis_angle(v: [f64; 3]) -> Self {
        let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if angle < 1e-12 {
            // first-order expansion keeps tiny rotations exact to rounding
            return Self::renormalized(1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]);
        }
        let s = (0.5 * angle).sin() / angle;
        Self::renormalized((0.5 * angle).cos(), v[0] * s, v[1] * s, v[2] * s)
    }

    /// Rotation vector with angle in `[0, pi]`.
    pub fn to_axis_angle(&self) -> [f64; 3] {
        let vn = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        if vn < 1e-12 {
            return [2.0 * self.x, 2.0 * self.y, 2.0 * self.z];
        }
        let angle = 2.0 * vn.atan2(self.w);
        let s = angle / vn;
        [self.x * s, self.y * s, self.z * s]
    }

    pub fn dot(&self, o: &UnitQuat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Hamilton product `self * o`, renormalized.
    pub fn mul(&self, o: &UnitQuat) -> UnitQuat {
        Self::renormalized(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotation angle between the two orientations, in `[0, pi]`.
    pub fn angle_to(&self, o: &UnitQuat) -> f64 {
        2.0 * self.dot(o).abs().min(1.0).acos()
    }

    /// Row-major rotation matrix.
    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
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

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Spherical linear interpolation along the shorter arc.
pub fn slerp(a: &UnitQuat, b: &UnitQuat, t: f64) -> Result<UnitQuat, ParamError> {
    if !t.is_finite() || !(0.0..=1.0).contains(&t) {
        return Err(ParamError::InvalidArgument(format!(
            "slerp parameter {t} outside [0, 1]"
        )));
    }
    if !a.to_array().iter().chain(b.to_array().iter()).all(|v| v.is_finite()) {
        return Err(ParamError::InvalidArgument(
            "non-finite quaternion component".into(),
        ));
    }
    if t == 0.0 {
        return Ok(*a);
    }
    if t == 1.0 {
        return Ok(*b);
    }
    let mut d = a.dot(b);
    let mut e = b.to_array();
    if d < 0.0 {
        d = -d;
        e.iter_mut().for_each(|v| *v = -*v);
    }
    let d = d.min(1.0);
    let omega = d.acos();
    let sin_omega = omega.sin();
    let (ka, kb) = if sin_omega < 1e-9 {
        (1.0 - t, t)
    } else {
        (
            ((1.0 - t) * omega).sin() / sin_omega,
            (t * omega).sin() / sin_omega,
        )
    };
    Ok(UnitQuat::renormalized(
        ka * a.w + kb * e[0],
        ka * a.x + kb * e[1],
        ka * a.y + kb * e[2],
        ka * a.z + kb * e[3],
    ))
}

/// Interpolates two adjacent frames: Slerp on the axis-angle triples, Lerp on
/// everything else. The timestamp is interpolated and floored.
pub fn lerp_params(p0: &MotionParams, p1: &MotionParams, t: f64) -> Result<MotionParams, ParamError> {
    if p0.frame_index.checked_add(1) != Some(p1.frame_index) {
        return Err(ParamError::Sequencing {
            first: p0.frame_index,
            second: p1.frame_index,
        });
    }
    if p1.capture_timestamp_us < p0.capture_timestamp_us {
        return Err(ParamError::InvalidArgument(
            "timestamps decrease between adjacent frames".into(),
        ));
    }
    if !t.is_finite() || !(0.0..=1.0).contains(&t) {
        return Err(ParamError::InvalidArgument(format!(
            "interpolation parameter {t} outside [0, 1]"
        )));
    }
    if t == 0.0 {
        return Ok(p0.clone());
    }
    if t == 1.0 {
        return Ok(p1.clone());
    }

    let (a, b) = (&p0.values, &p1.values);
    let mut out = [0.0; PARAM_LEN];
    for i in (0..PARAM_LEN).filter(|&i| !is_rotation_index(i)) {
        out[i] = a[i] + t * (b[i] - a[i]);
    }
    for o in rotation_triples() {
        let (ra, rb) = (&a[o..o + 3], &b[o..o + 3]);
        if ra == rb {
            out[o..o + 3].copy_from_slice(ra);
            continue;
        }
        let qa = UnitQuat::from_axis_angle([ra[0], ra[1], ra[2]]);
        let qb = UnitQuat::from_axis_angle([rb[0], rb[1], rb[2]]);
        let r = slerp(&qa, &qb, t)?.to_axis_angle();
        out[o..o + 3].copy_from_slice(&r);
    }
    let dt = (p1.capture_timestamp_us - p0.capture_timestamp_us) as f64 * t;
    MotionParams::from_values(
        p0.frame_index,
        p0.capture_timestamp_us + dt.floor() as u64,
        out,
    )
}

/// IEEE 754 binary16 bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Half16(pub u16);

impl Half16 {
    pub fn to_f64(self) -> f64 {
        f16::from_bits(self.0).to_f64()
    }
}

pub fn to_half_vec(v: &[f64]) -> Result<Vec<Half16>, ParamError> {
    let max = f16::MAX.to_f64();
    v.iter()
        .enumerate()
        .map(|(index, &value)| {
            if value.is_nan() {
                Err(ParamError::InvalidArgument(format!("NaN at index {index}")))
            } else if value.abs() > max {
                Err(ParamError::Range { index, value })
            } else {
                Ok(Half16(f16::from_f64(value).to_bits()))
            }
        })
        .collect()
}

pub fn from_half_vec(v: &[Half16]) -> Vec<f64> {
    v.iter().map(|h| h.to_f64()).collect()
}
