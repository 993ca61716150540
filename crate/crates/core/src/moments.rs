//! Exact Gaussian moments of squared-exponential expansions.
//!
//! Both the GP posterior mean and the RBF policy preactivation have the form
//! `f_a(x) = sum_i beta_ai * sf2_a * exp(-1/2 (x - c_i)^T Lambda_a^{-1} (x - c_i))`.
//! For `x ~ N(m, S)` the mean, covariance and input-output covariance of `f`
//! are available in closed form. This module evaluates them and provides the
//! matching reverse-mode adjoint so policy gradients can be chained through
//! whole trajectories.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, inverse_and_det};

/// A weighted sum of SE bumps over shared centers, one weight column per output.
#[derive(Debug, Clone)]
pub struct SeExpansion {
    /// N x E.
    pub centers: DMatrix<f64>,
    /// N x A.
    pub weights: DMatrix<f64>,
    /// Per output, the diagonal of `Lambda_a^{-1}` (length E).
    pub inv_sq_lengthscales: Vec<DVector<f64>>,
    /// Per output signal variance `sf2_a`.
    pub signal_variance: Vec<f64>,
    /// Per output `(K_a + noise I)^{-1}`; when present the model-uncertainty
    /// term `sf2 - tr(iK Q)` is added to each output variance.
    pub inv_kernel: Option<Vec<DMatrix<f64>>>,
    /// Added to the diagonal of the output covariance.
    pub noise_variance: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Cov[x, f], E x A.
    pub cross: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct MomentAdjoint {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub cross: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct InputAdjoint {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub centers: DMatrix<f64>,
    pub weights: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct OutputCache {
    g: DMatrix<f64>,
    d: f64,
    e: Vec<f64>,
    q: Vec<f64>,
    u: DVector<f64>,
}

#[derive(Debug, Clone)]
struct PairCache {
    a: usize,
    b: usize,
    p: DVector<f64>,
    rinv: DMatrix<f64>,
    t: DMatrix<f64>,
    /// Row-major N x N.
    q: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MomentCache {
    /// Row-major N x E, `c_i - m`.
    nu: Vec<f64>,
    outputs: Vec<OutputCache>,
    pairs: Vec<PairCache>,
    mean: DVector<f64>,
}

impl SeExpansion {
    pub fn n_centers(&self) -> usize {
        self.centers.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.weights.ncols()
    }

    /// Pointwise value `f(x)`.
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n_centers();
        let e = self.input_dim();
        DVector::from_fn(self.n_outputs(), |a, _| {
            let ia = &self.inv_sq_lengthscales[a];
            let mut acc = 0.0;
            for i in 0..n {
                let mut quad = 0.0;
                for k in 0..e {
                    let d = self.centers[(i, k)] - x[k];
                    quad += d * d * ia[k];
                }
                acc += self.weights[(i, a)] * (-0.5 * quad).exp();
            }
            acc * self.signal_variance[a]
        })
    }

    /// Mean, covariance and input-output covariance of `f(x)` for `x ~ N(m, s)`.
    pub fn moments(&self, m: &DVector<f64>, s: &DMatrix<f64>) -> Result<(Moments, MomentCache)> {
        let n = self.n_centers();
        let e = self.input_dim();
        let na = self.n_outputs();
        if m.len() != e {
            return Err(Error::DimensionMismatch {
                what: "moment-matching input mean",
                expected: e,
                got: m.len(),
            });
        }
        if s.nrows() != e || s.ncols() != e {
            return Err(Error::DimensionMismatch {
                what: "moment-matching input covariance",
                expected: e,
                got: s.nrows(),
            });
        }

        let mut nu = vec![0.0; n * e];
        for i in 0..n {
            for k in 0..e {
                nu[i * e + k] = self.centers[(i, k)] - m[k];
            }
        }

        let mut mean = DVector::zeros(na);
        let mut cross = DMatrix::zeros(e, na);
        let mut outputs = Vec::with_capacity(na);
        for a in 0..na {
            let ia = &self.inv_sq_lengthscales[a];
            let mut b = s.clone();
            for k in 0..e {
                b[(k, k)] += 1.0 / ia[k];
            }
            let chol = b
                .clone()
                .cholesky()
                .ok_or(Error::SingularInput("S + Lambda not positive definite"))?;
            let g = chol.inverse();
            let log_det_lambda: f64 = ia.iter().map(|v| -v.ln()).sum();
            let d = self.signal_variance[a] * (0.5 * (log_det_lambda - chol_logdet(&chol))).exp();

            let mut ev = vec![0.0; n];
            let mut qv = vec![0.0; n];
            let mut u = DVector::zeros(e);
            let mut acc = 0.0;
            let mut gnu = vec![0.0; e];
            for i in 0..n {
                let row = &nu[i * e..(i + 1) * e];
                for r in 0..e {
                    let mut v = 0.0;
                    for c in 0..e {
                        v += g[(r, c)] * row[c];
                    }
                    gnu[r] = v;
                }
                let quad: f64 = row.iter().zip(&gnu).map(|(x, y)| x * y).sum();
                let ei = (-0.5 * quad).exp();
                let qi = d * ei;
                ev[i] = ei;
                qv[i] = qi;
                let bq = self.weights[(i, a)] * qi;
                acc += bq;
                for k in 0..e {
                    u[k] += bq * row[k];
                }
            }
            mean[a] = acc;
            let h = &g * &u;
            cross.set_column(a, &(s * h));
            outputs.push(OutputCache { g, d, e: ev, q: qv, u });
        }

        let mut cov = DMatrix::zeros(na, na);
        let mut pairs = Vec::with_capacity(na * (na + 1) / 2);
        for a in 0..na {
            for b in a..na {
                let pair = self.pair_forward(a, b, &nu, s)?;
                let qm = &pair.q;
                let mut eab = 0.0;
                for i in 0..n {
                    let row = &qm[i * n..(i + 1) * n];
                    let inner = row
                        .iter()
                        .zip(self.weights.column(b).iter())
                        .fold(0.0, |acc, (r, w)| acc + r * w);
                    eab += self.weights[(i, a)] * inner;
                }
                if a == b {
                    if let Some(ik) = &self.inv_kernel {
                        let ik = &ik[a];
                        let mut tr = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                tr += ik[(i, j)] * qm[i * n + j];
                            }
                        }
                        eab += self.signal_variance[a] - tr;
                    }
                }
                let mut v = eab - mean[a] * mean[b];
                if a == b {
                    v += self.noise_variance[a];
                }
                cov[(a, b)] = v;
                cov[(b, a)] = v;
                pairs.push(pair);
            }
        }

        let cache = MomentCache {
            nu,
            outputs,
            pairs,
            mean: mean.clone(),
        };
        Ok((Moments { mean, cov, cross }, cache))
    }

    fn pair_forward(&self, a: usize, b: usize, nu: &[f64], s: &DMatrix<f64>) -> Result<PairCache> {
        let n = self.n_centers();
        let e = self.input_dim();
        let ia = &self.inv_sq_lengthscales[a];
        let ib = &self.inv_sq_lengthscales[b];
        let p = ia + ib;
        let mut r = s * DMatrix::from_diagonal(&p);
        for k in 0..e {
            r[(k, k)] += 1.0;
        }
        let (rinv, det) = inverse_and_det(&r).ok_or(Error::SingularInput("S (Lambda_a^-1 + Lambda_b^-1) + I"))?;
        if det <= 0.0 {
            return Err(Error::SingularInput("non-positive determinant of R"));
        }
        let t = crate::linalg::symmetrize(&(&rinv * s));
        let log_c = self.signal_variance[a].ln() + self.signal_variance[b].ln() - 0.5 * det.ln();

        // Per-center terms: k_i + 1/2 a_i^T T a_i, and T a_i.
        let prep = |il: &DVector<f64>| {
            let mut base = vec![0.0; n];
            let mut scaled = vec![0.0; n * e];
            let mut tscaled = vec![0.0; n * e];
            for i in 0..n {
                let row = &nu[i * e..(i + 1) * e];
                let mut k = 0.0;
                for c in 0..e {
                    scaled[i * e + c] = il[c] * row[c];
                    k += row[c] * scaled[i * e + c];
                }
                let mut quad = 0.0;
                for r in 0..e {
                    let mut v = 0.0;
                    for c in 0..e {
                        v += t[(r, c)] * scaled[i * e + c];
                    }
                    tscaled[i * e + r] = v;
                    quad += v * scaled[i * e + r];
                }
                base[i] = -0.5 * k + 0.5 * quad;
            }
            (base, scaled, tscaled)
        };
        let (base_a, _, ta) = prep(ia);
        let (base_b, sb, _) = prep(ib);

        let mut q = vec![0.0; n * n];
        for i in 0..n {
            let tai = &ta[i * e..(i + 1) * e];
            let bi = log_c + base_a[i];
            let row = &mut q[i * n..(i + 1) * n];
            for j in 0..n {
                let sbj = &sb[j * e..(j + 1) * e];
                let mut x = 0.0;
                for c in 0..e {
                    x += tai[c] * sbj[c];
                }
                row[j] = (bi + base_b[j] + x).exp();
            }
        }
        Ok(PairCache { a, b, p, rinv, t, q })
    }

    /// Reverse-mode adjoint of [`SeExpansion::moments`].
    pub fn backward(&self, s: &DMatrix<f64>, cache: &MomentCache, adj: &MomentAdjoint) -> InputAdjoint {
        let n = self.n_centers();
        let e = self.input_dim();
        let na = self.n_outputs();
        let nu = &cache.nu;
        let mut mean_bar = adj.mean.clone();
        let mut s_bar = DMatrix::<f64>::zeros(e, e);
        let mut nu_bar = vec![0.0; n * e];
        let mut w_bar = DMatrix::<f64>::zeros(n, na);

        for pair in &cache.pairs {
            let (a, b) = (pair.a, pair.b);
            let sab = if a == b {
                adj.cov[(a, a)]
            } else {
                adj.cov[(a, b)] + adj.cov[(b, a)]
            };
            if sab == 0.0 {
                continue;
            }
            mean_bar[a] -= sab * cache.mean[b];
            mean_bar[b] -= sab * cache.mean[a];

            let ia = &self.inv_sq_lengthscales[a];
            let ib = &self.inv_sq_lengthscales[b];
            let qm = &pair.q;
            let ik = if a == b {
                self.inv_kernel.as_ref().map(|v| &v[a])
            } else {
                None
            };

            let mut r = vec![0.0; n];
            let mut c = vec![0.0; n];
            let mut wtot = 0.0;
            // W_ij = Qbar_ij * Q_ij, consumed row by row.
            let mut wb = vec![0.0; n * e];
            let mut wta = vec![0.0; n * e];
            for i in 0..n {
                let bai = self.weights[(i, a)];
                let row = &qm[i * n..(i + 1) * n];
                let mut wa_acc = 0.0;
                for j in 0..n {
                    let mut qbar = bai * self.weights[(j, b)];
                    if let Some(ik) = ik {
                        qbar -= ik[(i, j)];
                    }
                    let w = sab * qbar * row[j];
                    r[i] += w;
                    c[j] += w;
                    for k in 0..e {
                        wb[i * e + k] += w * ib[k] * nu[j * e + k];
                        wta[j * e + k] += w * ia[k] * nu[i * e + k];
                    }
                    wa_acc += row[j] * self.weights[(j, b)];
                }
                w_bar[(i, a)] += sab * wa_acc;
                wtot += r[i];
            }
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += qm[i * n + j] * self.weights[(i, a)];
                }
                w_bar[(j, b)] += sab * acc;
            }

            let t = &pair.t;
            let mut z = DMatrix::<f64>::zeros(e, e);
            let mut za = vec![0.0; e];
            let mut tz = vec![0.0; e];
            for (il, rows_sum, wx) in [(ia, &r, &wb), (ib, &c, &wta)] {
                for i in 0..n {
                    let nui = &nu[i * e..(i + 1) * e];
                    for k in 0..e {
                        za[k] = rows_sum[i] * il[k] * nui[k] + wx[i * e + k];
                    }
                    for rr in 0..e {
                        let mut v = 0.0;
                        for cc in 0..e {
                            v += t[(rr, cc)] * za[cc];
                        }
                        tz[rr] = v;
                    }
                    for k in 0..e {
                        let ai = il[k] * nui[k];
                        nu_bar[i * e + k] += -rows_sum[i] * ai + il[k] * tz[k];
                        for l in 0..e {
                            z[(k, l)] += za[k] * il[l] * nui[l];
                        }
                    }
                }
            }
            let pd = DMatrix::from_diagonal(&pair.p);
            let rinv_t = pair.rinv.transpose();
            let mut i_minus_pt = -(&pd * t);
            for k in 0..e {
                i_minus_pt[(k, k)] += 1.0;
            }
            s_bar += &rinv_t * &pd * (-0.5 * wtot) + &rinv_t * &z * i_minus_pt.transpose() * 0.5;
        }

        for a in 0..na {
            let oc = &cache.outputs[a];
            let g = &oc.g;
            let mb = mean_bar[a];
            let cbar = adj.cross.column(a).into_owned();
            let h = g * &oc.u;
            s_bar += &cbar * h.transpose();
            let hbar = s.transpose() * &cbar;
            let mut g_bar = &hbar * oc.u.transpose();
            let ubar = g.transpose() * &hbar;

            let mut dbar = 0.0;
            for i in 0..n {
                let nui = &nu[i * e..(i + 1) * e];
                let beta = self.weights[(i, a)];
                let qi = oc.q[i];
                let dot: f64 = nui.iter().zip(ubar.iter()).map(|(x, y)| x * y).sum();
                w_bar[(i, a)] += mb * qi + qi * dot;
                let qbar = mb * beta + beta * dot;
                for k in 0..e {
                    nu_bar[i * e + k] += beta * qi * ubar[k];
                }
                dbar += qbar * oc.e[i];
                let f = qbar * oc.d * oc.e[i];
                if f != 0.0 {
                    for rr in 0..e {
                        let mut v = 0.0;
                        for cc in 0..e {
                            v += g[(rr, cc)] * nui[cc];
                        }
                        nu_bar[i * e + rr] -= f * v;
                        for cc in 0..e {
                            g_bar[(rr, cc)] -= 0.5 * f * nui[rr] * nui[cc];
                        }
                    }
                }
            }
            let mut b_bar = g * (-0.5 * dbar * oc.d);
            b_bar -= g.transpose() * &g_bar * g.transpose();
            s_bar += b_bar;
        }

        let mut m_bar = DVector::zeros(e);
        let mut c_bar = DMatrix::zeros(n, e);
        for i in 0..n {
            for k in 0..e {
                m_bar[k] -= nu_bar[i * e + k];
                c_bar[(i, k)] = nu_bar[i * e + k];
            }
        }
        InputAdjoint {
            mean: m_bar,
            cov: crate::linalg::symmetrize(&s_bar),
            centers: c_bar,
            weights: w_bar,
        }
    }
}
