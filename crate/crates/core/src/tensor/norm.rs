use super::tape::{Op, Tape, Var};
use super::{Real, Shape, Tensor};
use crate::error::{dim_err, Result};

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (divisor `count - 1`, or `count` when it is 1).
    pub var: Vec<T>,
}

/// Visits the contiguous `(start, len)` runs that make up one statistics group.
fn group_runs(s: Shape, group: usize, per_sample: bool) -> Vec<(usize, usize)> {
    let hw = s.hw();
    if per_sample {
        vec![(group * hw, hw)]
    } else {
        (0..s.n()).map(|n| ((n * s.c() + group) * hw, hw)).collect()
    }
}

fn check_affine<T: Real>(s: Shape, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.numel() != s.c() || beta.numel() != s.c() {
        return Err(dim_err!(
            "norm affine parameters need {} elements, got gamma {} / beta {}",
            s.c(),
            gamma.numel(),
            beta.numel()
        ));
    }
    Ok(())
}

struct Normalized<T> {
    out: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var_unbiased: Vec<T>,
}

fn normalize_batch<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T, per_sample: bool) -> Normalized<T> {
    let s = x.shape();
    let groups = if per_sample { s.n() * s.c() } else { s.c() };
    let mut out = vec![T::zero(); s.numel()];
    let mut xhat = vec![T::zero(); s.numel()];
    let mut inv_std = Vec::with_capacity(groups);
    let mut mean = Vec::with_capacity(groups);
    let mut var_unbiased = Vec::with_capacity(groups);
    for gidx in 0..groups {
        let c = gidx % s.c();
        let runs = group_runs(s, gidx, per_sample);
        let count: usize = runs.iter().map(|r| r.1).sum();
        let m = T::cast(count as f64);
        let mu = runs
            .iter()
            .flat_map(|&(a, l)| x.data()[a..a + l].iter().copied())
            .sum::<T>()
            / m;
        let ss = runs
            .iter()
            .flat_map(|&(a, l)| x.data()[a..a + l].iter().copied())
            .map(|v| (v - mu) * (v - mu))
            .sum::<T>();
        let var = ss / m;
        let istd = T::one() / (var + eps).sqrt();
        for &(a, l) in &runs {
            for i in a..a + l {
                let xh = (x.data()[i] - mu) * istd;
                xhat[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
        inv_std.push(istd);
        mean.push(mu);
        var_unbiased.push(if count > 1 {
            ss / T::cast((count - 1) as f64)
        } else {
            var
        });
    }
    Normalized {
        out,
        xhat,
        inv_std,
        mean,
        var_unbiased,
    }
}

pub(crate) fn norm_backward<T: Real>(
    s: Shape,
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    per_sample: bool,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); s.numel()];
    let mut dgamma = vec![T::zero(); s.c()];
    let mut dbeta = vec![T::zero(); s.c()];
    let groups = if per_sample { s.n() * s.c() } else { s.c() };
    for gidx in 0..groups {
        let c = gidx % s.c();
        let runs = group_runs(s, gidx, per_sample);
        let istd = inv_std[gidx];
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        let mut count = 0usize;
        for &(a, l) in &runs {
            for i in a..a + l {
                dgamma[c] += dy[i] * xhat[i];
                dbeta[c] += dy[i];
                let dxh = dy[i] * gamma[c];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xhat[i];
                count += 1;
            }
        }
        let m = T::cast(count as f64);
        for &(a, l) in &runs {
            for i in a..a + l {
                let dxh = dy[i] * gamma[c];
                dx[i] = if batch_stats {
                    istd / m * (m * dxh - sum_dxh - xhat[i] * sum_dxh_xh)
                } else {
                    dxh * istd
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

impl<T: Real> Tape<T> {
    /// Training-mode batch norm over (N, H, W) per channel.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let x = self.value(input);
        check_affine(x.shape(), self.value(gamma), self.value(beta))?;
        let r = normalize_batch(x, self.value(gamma).data(), self.value(beta).data(), eps, false);
        let out = Tensor::new(x.shape(), r.out)?;
        let v = self.push(
            out,
            Op::Norm {
                input,
                gamma,
                beta,
                xhat: r.xhat,
                inv_std: r.inv_std,
                batch_stats: true,
                per_sample: false,
            },
        );
        Ok((
            v,
            BatchStats {
                mean: r.mean,
                var: r.var_unbiased,
            },
        ))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        check_affine(s, self.value(gamma), self.value(beta))?;
        if running_mean.len() != s.c() || running_var.len() != s.c() {
            return Err(dim_err!("running statistics need {} channels", s.c()));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); s.numel()];
        let mut out = vec![T::zero(); s.numel()];
        let hw = s.hw();
        for (plane, chunk) in x.data().chunks(hw).enumerate() {
            let c = plane % s.c();
            for (j, v) in chunk.iter().enumerate() {
                let xh = (*v - running_mean[c]) * inv_std[c];
                xhat[plane * hw + j] = xh;
                out[plane * hw + j] = g[c] * xh + b[c];
            }
        }
        let out = Tensor::new(s, out)?;
        Ok(self.push(
            out,
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
                per_sample: false,
            },
        ))
    }

    /// Per-sample, per-channel normalisation over (H, W) with a per-channel
    /// affine transform (group norm with one channel per group).
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let x = self.value(input);
        check_affine(x.shape(), self.value(gamma), self.value(beta))?;
        let r = normalize_batch(x, self.value(gamma).data(), self.value(beta).data(), eps, true);
        let out = Tensor::new(x.shape(), r.out)?;
        Ok(self.push(
            out,
            Op::Norm {
                input,
                gamma,
                beta,
                xhat: r.xhat,
                inv_std: r.inv_std,
                batch_stats: true,
                per_sample: true,
            },
        ))
    }
}
