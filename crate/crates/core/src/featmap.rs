//! Feature maps `φ: R^D → R^{D'}` for linearized attention.

use crate::error::{arg_err, Result};
use crate::tensor::{Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMapKind {
    /// `ReLU(W2 [sin W1x; cos W1x] + b2)` with every matrix trainable.
    DeterministicAdaptive,
    /// `h(x)/√d · [sin W1x; cos W1x]` with a frozen Gaussian `W1`.
    RandomTrig,
}

impl std::str::FromStr for FeatureMapKind {
    type Err = crate::RippleError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" | "deterministic" => Ok(Self::DeterministicAdaptive),
            "random-trig" | "trig" | "random" => Ok(Self::RandomTrig),
            _ => arg_err(format!("unknown feature map `{s}` (expected adaptive or random-trig)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapParams {
    pub kind: FeatureMapKind,
    /// Frequencies, `d × D`.
    pub w1: Matrix,
    /// `D' × 2d`; empty for `RandomTrig`.
    pub w2: Matrix,
    pub b2: Vec<f64>,
    /// Multiply random features by `exp(‖x‖²/2)`.
    pub norm_prefactor: bool,
}

impl FeatureMapParams {
    pub fn adaptive(input_dim: usize, freqs: usize, output_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if input_dim == 0 || freqs == 0 || output_dim == 0 {
            return arg_err("feature map dimensions must be positive");
        }
        let w1 = Matrix::gaussian(freqs, input_dim, rng, 1.0);
        let w2 = Matrix::gaussian(output_dim, 2 * freqs, rng, (1.0 / freqs as f64).sqrt());
        Ok(Self {
            kind: FeatureMapKind::DeterministicAdaptive,
            w1,
            w2,
            b2: vec![0.1; output_dim],
            norm_prefactor: false,
        })
    }

    pub fn random_trig(input_dim: usize, freqs: usize, rng: &mut SeededRng) -> Result<Self> {
        if input_dim == 0 || freqs == 0 {
            return arg_err("feature map dimensions must be positive");
        }
        Ok(Self {
            kind: FeatureMapKind::RandomTrig,
            w1: Matrix::gaussian(freqs, input_dim, rng, 1.0),
            w2: Matrix::zeros(0, 0),
            b2: Vec::new(),
            norm_prefactor: false,
        })
    }

    pub fn new(kind: FeatureMapKind, input_dim: usize, freqs: usize, output_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        match kind {
            FeatureMapKind::DeterministicAdaptive => Self::adaptive(input_dim, freqs, output_dim, rng),
            FeatureMapKind::RandomTrig => Self::random_trig(input_dim, freqs, rng),
        }
    }

    /// Raises `b2` so every adaptive feature is strictly positive for any
    /// input (`|sin|, |cos| <= 1`).
    pub fn make_strictly_positive(&mut self) {
        if self.kind != FeatureMapKind::DeterministicAdaptive {
            return;
        }
        for (o, b) in self.b2.iter_mut().enumerate() {
            let reach: f64 = self.w2.row(o).iter().map(|w| w.abs()).sum();
            *b = reach + 0.1;
        }
    }

    /// Draws fresh frequencies for a random feature map.
    pub fn resample(&mut self, rng: &mut SeededRng) {
        if self.kind == FeatureMapKind::RandomTrig {
            self.w1 = Matrix::gaussian(self.w1.rows, self.w1.cols, rng, 1.0);
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn freqs(&self) -> usize {
        self.w1.rows
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            FeatureMapKind::DeterministicAdaptive => self.w2.rows,
            FeatureMapKind::RandomTrig => 2 * self.w1.rows,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == FeatureMapKind::DeterministicAdaptive
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            w1: self.w1.zeros_like(),
            w2: self.w2.zeros_like(),
            b2: vec![0.0; self.b2.len()],
            norm_prefactor: self.norm_prefactor,
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        if self.is_trainable() {
            vec![&self.w1.data, &self.w2.data, &self.b2]
        } else {
            Vec::new()
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        if self.is_trainable() {
            vec![&mut self.w1.data, &mut self.w2.data, &mut self.b2]
        } else {
            Vec::new()
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return arg_err(format!("feature map expects {} inputs, got {}", self.input_dim(), x.len()));
        }
        Ok(())
    }
}

pub fn feature_forward(x: &[f64], params: &FeatureMapParams) -> Result<Vec<f64>> {
    params.check_input(x)?;
    let mut out = vec![0.0; params.output_dim()];
    feature_into(x, params, &mut out);
    Ok(out)
}

/// Unchecked forward used on hot paths; `out` has length `output_dim`.
pub(crate) fn feature_into(x: &[f64], params: &FeatureMapParams, out: &mut [f64]) {
    let d = params.freqs();
    let z = params.w1.matvec(x);
    match params.kind {
        FeatureMapKind::RandomTrig => {
            let scale = prefactor(x, params) / (d as f64).sqrt();
            for (k, zk) in z.iter().enumerate() {
                out[k] = scale * zk.sin();
                out[d + k] = scale * zk.cos();
            }
        }
        FeatureMapKind::DeterministicAdaptive => {
            let u = trig(&z);
            params.w2.matvec_into(&u, out);
            for (o, b) in out.iter_mut().zip(&params.b2) {
                *o = (*o + b).max(0.0);
            }
        }
    }
}

fn prefactor(x: &[f64], params: &FeatureMapParams) -> f64 {
    if params.norm_prefactor {
        (0.5 * x.iter().map(|v| v * v).sum::<f64>()).exp()
    } else {
        1.0
    }
}

fn trig(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.sin()).chain(z.iter().map(|v| v.cos())).collect()
}

/// Reverse-mode derivative of [`feature_forward`]. Returns `∂L/∂x` and the
/// parameter gradients (zero for frozen random features).
pub fn feature_vjp(x: &[f64], params: &FeatureMapParams, upstream: &[f64]) -> Result<(Vec<f64>, FeatureMapParams)> {
    params.check_input(x)?;
    if upstream.len() != params.output_dim() {
        return arg_err(format!(
            "upstream has {} entries, feature map outputs {}",
            upstream.len(),
            params.output_dim()
        ));
    }
    let mut grad_x = vec![0.0; x.len()];
    let mut grads = params.zeros_like();
    feature_vjp_acc(x, params, upstream, &mut grad_x, &mut grads);
    Ok((grad_x, grads))
}

/// Accumulating form of [`feature_vjp`]: adds into `grad_x` and `grads`.
pub(crate) fn feature_vjp_acc(
    x: &[f64],
    params: &FeatureMapParams,
    upstream: &[f64],
    grad_x: &mut [f64],
    grads: &mut FeatureMapParams,
) {
    if upstream.iter().all(|g| *g == 0.0) {
        return;
    }
    let d = params.freqs();
    let z = params.w1.matvec(x);
    match params.kind {
        FeatureMapKind::RandomTrig => {
            let h = prefactor(x, params);
            let scale = h / (d as f64).sqrt();
            let mut grad_z = vec![0.0; d];
            let mut phi_dot_g = 0.0;
            for k in 0..d {
                let (s, c) = z[k].sin_cos();
                grad_z[k] = scale * (upstream[k] * c - upstream[d + k] * s);
                phi_dot_g += scale * (upstream[k] * s + upstream[d + k] * c);
            }
            params.w1.matvec_t_acc(&grad_z, grad_x);
            if params.norm_prefactor {
                // ∂h/∂x = h·x, and φ is linear in h.
                for (gx, xv) in grad_x.iter_mut().zip(x) {
                    *gx += phi_dot_g * xv;
                }
            }
        }
        FeatureMapKind::DeterministicAdaptive => {
            let u = trig(&z);
            let mut pre = params.w2.matvec(&u);
            for (p, b) in pre.iter_mut().zip(&params.b2) {
                *p += b;
            }
            let grad_pre: Vec<f64> = pre
                .iter()
                .zip(upstream)
                .map(|(p, g)| if *p > 0.0 { *g } else { 0.0 })
                .collect();
            for (gb, g) in grads.b2.iter_mut().zip(&grad_pre) {
                *gb += g;
            }
            grads.w2.add_outer(1.0, &grad_pre, &u);
            let grad_u = params.w2.matvec_t(&grad_pre);
            let grad_z: Vec<f64> = (0..d)
                .map(|k| grad_u[k] * z[k].cos() - grad_u[d + k] * z[k].sin())
                .collect();
            grads.w1.add_outer(1.0, &grad_z, x);
            params.w1.matvec_t_acc(&grad_z, grad_x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adaptive(seed: u64) -> FeatureMapParams {
        FeatureMapParams::adaptive(4, 3, 5, &mut SeededRng::new(seed)).unwrap()
    }

    fn oracle(x: &[f64], p: &FeatureMapParams) -> Vec<f64> {
        let d = p.freqs();
        let mut z = vec![0.0; d];
        for k in 0..d {
            for j in 0..x.len() {
                z[k] += p.w1.get(k, j) * x[j];
            }
        }
        let mut u = vec![0.0; 2 * d];
        for k in 0..d {
            u[k] = z[k].sin();
            u[d + k] = z[k].cos();
        }
        (0..p.output_dim())
            .map(|o| {
                let mut a = p.b2[o];
                for k in 0..2 * d {
                    a += p.w2.get(o, k) * u[k];
                }
                if a > 0.0 { a } else { 0.0 }
            })
            .collect()
    }

    #[test]
    fn zero_frequencies_leave_the_cosine_half() {
        let mut p = adaptive(1);
        p.w1 = Matrix::zeros(3, 4);
        let got = feature_forward(&[0.3, -2.0, 1.0, 4.0], &p).unwrap();
        let u = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        for (o, g) in got.iter().enumerate() {
            let a: f64 = (0..6).map(|k| p.w2.get(o, k) * u[k]).sum::<f64>() + p.b2[o];
            assert!((g - a.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn adaptive_features_are_nonnegative_and_match_oracle() {
        let mut rng = SeededRng::new(7);
        for seed in 0..20 {
            let p = adaptive(seed);
            let x = rng.normals(4, 0.0, 1.5);
            let got = feature_forward(&x, &p).unwrap();
            assert!(got.iter().all(|v| *v >= 0.0));
            let want = oracle(&x, &p);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strictly_positive_features() {
        let mut p = adaptive(4);
        p.make_strictly_positive();
        let mut rng = SeededRng::new(1);
        for _ in 0..50 {
            let x = rng.normals(4, 0.0, 3.0);
            assert!(feature_forward(&x, &p).unwrap().iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = adaptive(1);
        assert!(feature_forward(&[1.0, 2.0], &p).is_err());
        assert!(feature_vjp(&[1.0; 4], &p, &[1.0; 2]).is_err());
    }

    #[test]
    fn random_trig_layout() {
        let p = FeatureMapParams::random_trig(2, 3, &mut SeededRng::new(2)).unwrap();
        let x = [0.4, -0.7];
        let got = feature_forward(&x, &p).unwrap();
        assert_eq!(got.len(), 6);
        let z = p.w1.matvec(&x);
        for k in 0..3 {
            assert!((got[k] - z[k].sin() / 3f64.sqrt()).abs() < 1e-15);
            assert!((got[3 + k] - z[k].cos() / 3f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = adaptive(3);
        let (gx, gp) = feature_vjp(&[0.1, 0.2, 0.3, 0.4], &p, &[0.0; 5]).unwrap();
        assert!(gx.iter().all(|v| *v == 0.0));
        assert!(gp.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    }

    fn loss(x: &[f64], p: &FeatureMapParams, probe: &[f64]) -> f64 {
        feature_forward(x, p).unwrap().iter().zip(probe).map(|(a, b)| a * b).sum()
    }

    fn check_fd(p: &FeatureMapParams, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let x = rng.normals(p.input_dim(), 0.0, 1.0);
        let probe = rng.normals(p.output_dim(), 0.0, 1.0);
        let (gx, gp) = feature_vjp(&x, p, &probe).unwrap();
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (loss(&xp, p, &probe) - loss(&xm, p, &probe)) / (2.0 * h);
            assert!(rel(gx[k], fd) < 1e-6, "x[{k}]: {} vs {fd}", gx[k]);
        }
        let analytic: Vec<Vec<f64>> = gp.tensors().iter().map(|t| t.to_vec()).collect();
        for (t, grads) in analytic.iter().enumerate() {
            for k in 0..grads.len() {
                let mut pp = p.clone();
                pp.tensors_mut()[t][k] += h;
                let mut pm = p.clone();
                pm.tensors_mut()[t][k] -= h;
                let fd = (loss(&x, &pp, &probe) - loss(&x, &pm, &probe)) / (2.0 * h);
                assert!(rel(grads[k], fd) < 1e-6, "tensor {t}[{k}]: {} vs {fd}", grads[k]);
            }
        }
    }

    #[test]
    fn adaptive_vjp_matches_finite_differences() {
        for seed in 0..5 {
            check_fd(&adaptive(seed + 10), seed);
        }
    }

    #[test]
    fn random_trig_vjp_matches_finite_differences() {
        let mut p = FeatureMapParams::random_trig(3, 4, &mut SeededRng::new(5)).unwrap();
        check_fd(&p, 1);
        p.norm_prefactor = true;
        check_fd(&p, 2);
        let (_, g) = feature_vjp(&[0.1, 0.2, 0.3], &p, &[1.0; 8]).unwrap();
        assert!(g.w1.data.iter().all(|v| *v == 0.0));
    }
}
