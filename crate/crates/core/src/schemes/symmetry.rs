//! Maps that carry a trajectory exiting at one point of `Ω` to one exiting at
//! another while preserving the law of the process started at the symmetric
//! point.

use super::{argmax, Scheme, SchemeKind};
use crate::error::{Error, Result};
use crate::sde::Trajectory;

/// A rotation written as a product of Householder reflections, applied left to
/// right. Rotates in the plane spanned by `from` and `to` and fixes its
/// orthogonal complement.
#[derive(Clone, Debug, PartialEq)]
pub struct Rotation {
    reflections: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

impl Rotation {
    /// Rotation sending the unit vector `from` to the unit vector `to`.
    pub fn between(from: &[f64], to: &[f64]) -> Self {
        let c = dot(from, to);
        if c < -1.0 + 1e-6 && from.len() >= 2 {
            // near-antipodal: go through a unit vector orthogonal to `from`
            let k = (0..from.len())
                .min_by(|&i, &j| from[i].abs().total_cmp(&from[j].abs()))
                .unwrap();
            let mut mid = vec![0.0; from.len()];
            mid[k] = 1.0;
            let fk = from[k];
            mid.iter_mut().zip(from).for_each(|(m, f)| *m -= fk * f);
            normalize(&mut mid);
            let mut first = Self::single(from, &mid);
            first.reflections.extend(Self::single(&mid, to).reflections);
            return first;
        }
        Self::single(from, to)
    }

    fn single(from: &[f64], to: &[f64]) -> Self {
        let mut a: Vec<f64> = from.iter().zip(to).map(|(f, t)| f - t).collect();
        if normalize(&mut a) < 1e-300 {
            return Self { reflections: vec![] };
        }
        // second reflection fixes `to` and restores orientation
        let c = dot(from, to);
        let mut b: Vec<f64> = from.iter().zip(to).map(|(f, t)| f - c * t).collect();
        let mut reflections = vec![a];
        if normalize(&mut b) > 1e-300 {
            reflections.push(b);
        }
        Self { reflections }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for r in &self.reflections {
            let k = 2.0 * dot(r, &out);
            out.iter_mut().zip(r).for_each(|(o, ri)| *o -= k * ri);
        }
        out
    }
}

/// Transforms `traj` (exiting at `from`) into a trajectory exiting at `to`.
///
/// Sphere: rotation in the plane of `from` and `to`. Boolean: flips the
/// coordinates where the two corners differ. Categorical: swaps, per slot, the
/// coordinates of the two one-hot positions.
pub fn symmetry_transform(scheme: &Scheme, traj: &Trajectory, from: &[f64], to: &[f64]) -> Result<Trajectory> {
    let exit = traj
        .exit()
        .ok_or_else(|| Error::pre("trajectory did not hit"))?;
    scheme.check_target(to)?;
    if exit.iter().zip(from).any(|(a, b)| (a - b).abs() > 1e-9) || exit.len() != from.len() {
        return Err(Error::pre("`from` is not the trajectory's exit point"));
    }
    if !scheme.has_symmetry() {
        return Err(Error::pre(format!("scheme {scheme} has no symmetry transform")));
    }
    if !scheme.is_symmetric_point(&traj.states[0]) {
        return Err(Error::pre("trajectory does not start at the symmetric point"));
    }
    if from == to {
        return Ok(traj.clone());
    }
    let map: Box<dyn Fn(&[f64]) -> Vec<f64>> = match &scheme.kind {
        SchemeKind::Sphere { .. } => {
            let rot = Rotation::between(from, to);
            Box::new(move |z| rot.apply(z))
        }
        SchemeKind::Boolean { .. } => {
            let flip: Vec<bool> = from.iter().zip(to).map(|(a, b)| a != b).collect();
            Box::new(move |z| {
                z.iter()
                    .zip(&flip)
                    .map(|(&v, &f)| if f { 1.0 - v } else { v })
                    .collect()
            })
        }
        SchemeKind::Categorical { d, .. } => {
            let d = *d;
            let swaps: Vec<(usize, usize)> = from
                .chunks(d)
                .zip(to.chunks(d))
                .map(|(a, b)| (argmax(a), argmax(b)))
                .collect();
            Box::new(move |z| {
                let mut out = z.to_vec();
                for (s, &(i, j)) in swaps.iter().enumerate() {
                    out.swap(s * d + i, s * d + j);
                }
                out
            })
        }
        _ => unreachable!(),
    };
    let mut out = traj.clone();
    for s in out.states.iter_mut() {
        *s = map(s);
    }
    for s in out.states[traj.hit_index..].iter_mut() {
        s.copy_from_slice(to);
    }
    Ok(out)
}
