//! Euclidean projections onto l-p balls.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }

    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" | "l-inf" | "inf" => Ok(Norm::Linf),
            _ => Err(crate::Error::contract(format!("unknown norm `{s}`"))),
        }
    }
}

/// Project `v` in place onto `{x : ||x||_p <= eps}`.
pub fn project_in_place(v: &mut [f64], norm: Norm, eps: f64) {
    match norm {
        Norm::Linf => {
            for x in v.iter_mut() {
                *x = x.clamp(-eps, eps);
            }
        }
        Norm::L2 => {
            let n = Norm::L2.of(v);
            if n > eps {
                let k = eps / n;
                for x in v.iter_mut() {
                    *x *= k;
                }
            }
        }
        Norm::L1 => project_l1(v, eps),
    }
}

pub fn project(v: &[f64], norm: Norm, eps: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    project_in_place(&mut out, norm, eps);
    out
}

/// Sort-and-threshold projection onto the l1 ball: soft-threshold `|v|` by the
/// `theta` that puts the result on the simplex of radius `eps`.
fn project_l1(v: &mut [f64], eps: f64) {
    if Norm::L1.of(v) <= eps {
        return;
    }
    if eps <= 0.0 {
        v.fill(0.0);
        return;
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - eps) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    for x in v.iter_mut() {
        let m = (x.abs() - theta).max(0.0);
        *x = m.copysign(*x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linf_clamps() {
        assert_eq!(project(&[0.15, -0.05], Norm::Linf, 0.1), vec![0.1, -0.05]);
    }

    #[test]
    fn l2_rescales() {
        let p = project(&[2.0, 0.0], Norm::L2, 1.0);
        assert_eq!(p, vec![1.0, 0.0]);
        let v = [1.2, -1.6];
        let p = project(&v, Norm::L2, 1.0);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn l1_feasible_is_unchanged() {
        assert_eq!(project(&[0.2, -0.3], Norm::L1, 1.0), vec![0.2, -0.3]);
    }

    #[test]
    fn l1_symmetric_case() {
        let p = project(&[0.8, 0.8], Norm::L1, 1.0);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l1_sparse_case() {
        // theta = 2: (3, 1, -0.5) -> (1, 0, 0).
        let p = project(&[3.0, 1.0, -0.5], Norm::L1, 1.0);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }
}
