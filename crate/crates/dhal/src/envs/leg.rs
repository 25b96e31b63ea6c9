//! Planar 2-link leg: contact-point velocity through the analytic Jacobian.

/// Two-link planar leg hanging from a fixed base. Angles are absolute joint
/// angles (q2 relative to link 1), velocities in rad/s.
#[derive(Debug, Clone, Copy)]
pub struct LegModel {
    pub l1: f64,
    pub l2: f64,
    pub q: [f64; 2],
    pub qdot: [f64; 2],
}

/// Foot position from forward kinematics (x right, y down-negative).
pub fn foot_position(m: &LegModel) -> [f64; 2] {
    let (q1, q12) = (m.q[0], m.q[0] + m.q[1]);
    [
        m.l1 * q1.sin() + m.l2 * q12.sin(),
        -m.l1 * q1.cos() - m.l2 * q12.cos(),
    ]
}

/// Analytic foot Jacobian, row-major 2x2.
pub fn foot_jacobian(m: &LegModel) -> [[f64; 2]; 2] {
    let (q1, q12) = (m.q[0], m.q[0] + m.q[1]);
    [
        [m.l1 * q1.cos() + m.l2 * q12.cos(), m.l2 * q12.cos()],
        [m.l1 * q1.sin() + m.l2 * q12.sin(), m.l2 * q12.sin()],
    ]
}

/// v_c = J_c(q) qdot: the linear velocity of the contact point.
pub fn leg_contact_velocity(m: &LegModel) -> [f64; 2] {
    let j = foot_jacobian(m);
    [
        j[0][0] * m.qdot[0] + j[0][1] * m.qdot[1],
        j[1][0] * m.qdot[0] + j[1][1] * m.qdot[1],
    ]
}

/// det J = l1 l2 sin(q2): zero when the leg is straight.
pub fn jacobian_determinant(m: &LegModel) -> f64 {
    m.l1 * m.l2 * m.q[1].sin()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_joint_velocity_zero_contact_velocity() {
        let m = LegModel { l1: 1.0, l2: 1.0, q: [0.4, 0.7], qdot: [0.0, 0.0] };
        let v = leg_contact_velocity(&m);
        assert_eq!(v, [0.0, 0.0]);
    }

    #[test]
    fn jacobian_matches_finite_difference_kinematics() {
        let m = LegModel { l1: 1.0, l2: 1.0, q: [0.0, std::f64::consts::FRAC_PI_2], qdot: [1.0, 0.0] };
        let v = leg_contact_velocity(&m);
        // Central finite difference of foot position along qdot.
        let h = 1e-6;
        let shift = |s: f64| {
            let mm = LegModel { q: [m.q[0] + s * m.qdot[0] * h, m.q[1] + s * m.qdot[1] * h], ..m };
            foot_position(&mm)
        };
        let (p_plus, p_minus) = (shift(1.0), shift(-1.0));
        for i in 0..2 {
            let fd = (p_plus[i] - p_minus[i]) / (2.0 * h);
            assert!((v[i] - fd).abs() < 1e-6, "component {i}: {} vs {fd}", v[i]);
        }
    }

    #[test]
    fn straight_leg_is_singular() {
        let m = LegModel { l1: 0.8, l2: 1.2, q: [0.3, 0.0], qdot: [0.0, 0.0] };
        assert!(jacobian_determinant(&m).abs() < 1e-12);
        let bent = LegModel { q: [0.3, 0.5], ..m };
        assert!((jacobian_determinant(&bent) - 0.8 * 1.2 * 0.5f64.sin()).abs() < 1e-12);
    }
}
