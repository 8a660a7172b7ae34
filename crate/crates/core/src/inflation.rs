//! Initializing a 3D student from a trained 2D teacher by replicating each
//! spatial kernel along time.

use crate::error::{Error, Result};
use crate::models::{StudentKind, StudentNet, TeacherNet2D};
use crate::tensor::{ParamKind, Real, Tensor};

/// How a 2D kernel is spread over `k_t` temporal slices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Replication {
    /// Each slice is `w2 / k_t`, so a static clip reproduces the 2D response.
    #[default]
    Scaled,
    /// Each slice is `w2`.
    Unscaled,
}

/// Replicates one `O×I×kh×kw` kernel into `O×I×kt×kh×kw`.
pub fn inflate_kernel<S: Real>(w2: &Tensor<S>, kt: usize, mode: Replication) -> Result<Tensor<S>> {
    let s = w2.shape();
    if s.len() != 4 || kt == 0 {
        return Err(Error::invalid("inflate", format!("expected a rank-4 kernel and k_t >= 1, got {s:?}, k_t={kt}")));
    }
    let scale = match mode {
        Replication::Scaled => S::cast_from(1.0 / kt as f64),
        Replication::Unscaled => S::one(),
    };
    let plane = s[2] * s[3];
    let mut out = Vec::with_capacity(w2.len() * kt);
    for oi in w2.data().chunks(plane) {
        for _ in 0..kt {
            if kt == 1 {
                out.extend_from_slice(oi);
            } else {
                out.extend(oi.iter().map(|&v| v * scale));
            }
        }
    }
    Tensor::new(vec![s[0], s[1], kt, s[2], s[3]], out)
}

/// Overwrites the student's trunk with the inflated teacher trunk. Norm
/// parameters and running statistics are copied verbatim; heads are left
/// untouched.
pub fn inflate<S: Real>(teacher: &TeacherNet2D<S>, student: &mut StudentNet<S>, mode: Replication) -> Result<()> {
    if student.kind != StudentKind::Res3d {
        return Err(Error::TopologyMismatch(vec![format!(
            "{} has no 2D counterpart to inflate from",
            student.architecture()
        )]));
    }
    let t_names = teacher.trunk_param_names();
    let s_names = student.trunk_param_names();
    let mut bad: Vec<String> = s_names.iter().filter(|n| !teacher.params.contains(n)).cloned().collect();
    bad.extend(t_names.iter().filter(|n| !student.params.contains(n)).cloned());

    let mut updates = Vec::with_capacity(t_names.len());
    for name in t_names.iter().filter(|n| student.params.contains(n)) {
        let src = teacher.params.get(name)?;
        let dst = student.params.get(name)?;
        let (a, b) = (src.value.shape(), dst.value.shape());
        let value = if src.kind == ParamKind::Weight && b.len() == 5 {
            if a.len() != 4 || a[..2] != b[..2] || a[2..] != b[3..] {
                bad.push(format!("{name} ({a:?} vs {b:?})"));
                continue;
            }
            inflate_kernel(&src.value, b[2], mode)?
        } else {
            if a != b || src.kind != dst.kind {
                bad.push(format!("{name} ({a:?} vs {b:?})"));
                continue;
            }
            src.value.clone()
        };
        updates.push((name.clone(), value));
    }
    if !bad.is_empty() {
        return Err(Error::TopologyMismatch(bad));
    }
    for (name, value) in updates {
        student.params.set_value(&name, value)?;
    }
    Ok(())
}
