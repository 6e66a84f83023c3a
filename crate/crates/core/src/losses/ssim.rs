//! Windowed SSIM with a 3×3 uniform window and reflective borders.

use crate::raster::{Image, Raster};

pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Mirror an index into `[0, n)` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Per-window first and second moments of one channel pair.
#[derive(Clone, Copy, Default)]
struct Moments {
    mu_a: f64,
    mu_b: f64,
    e_aa: f64,
    e_bb: f64,
    e_ab: f64,
}

impl Moments {
    fn ssim(&self) -> f64 {
        let (n1, n2, d1, d2) = self.parts();
        (n1 * n2) / (d1 * d2)
    }

    #[inline]
    fn parts(&self) -> (f64, f64, f64, f64) {
        let var_a = self.e_aa - self.mu_a * self.mu_a;
        let var_b = self.e_bb - self.mu_b * self.mu_b;
        let cov = self.e_ab - self.mu_a * self.mu_b;
        (
            2.0 * self.mu_a * self.mu_b + C1,
            2.0 * cov + C2,
            self.mu_a * self.mu_a + self.mu_b * self.mu_b + C1,
            var_a + var_b + C2,
        )
    }

    /// Partials of SSIM w.r.t. `mu_b`, `e_bb` and `e_ab`.
    fn grad_b(&self) -> (f64, f64, f64) {
        let (n1, n2, d1, d2) = self.parts();
        let den = d1 * d2;
        let s = n1 * n2 / den;
        let (ma, mb) = (self.mu_a, self.mu_b);
        // dN1 = 2 ma, dN2 = -2 ma, dD1 = 2 mb, dD2 = -2 mb  (w.r.t. mu_b)
        let d_mu = (2.0 * ma * n2 - 2.0 * ma * n1) / den - s * (2.0 * mb / d1 - 2.0 * mb / d2);
        let d_bb = -s / d2;
        let d_ab = 2.0 * n1 / den;
        (d_mu, d_bb, d_ab)
    }
}

/// 3×3 box means of `f(a_c, b_c)` per channel, computed separably.
fn box_mean(rows: usize, cols: usize, value: impl Fn(usize, usize) -> [f64; 3]) -> Vec<[f64; 3]> {
    let mut horiz = vec![[0.0; 3]; rows * cols];
    for v in 0..rows {
        for u in 0..cols {
            let mut acc = [0.0; 3];
            for du in -1i64..=1 {
                let x = value(reflect(u as i64 + du, cols), v);
                for c in 0..3 {
                    acc[c] += x[c];
                }
            }
            horiz[v * cols + u] = acc;
        }
    }
    let mut out = vec![[0.0; 3]; rows * cols];
    for v in 0..rows {
        for u in 0..cols {
            let mut acc = [0.0; 3];
            for dv in -1i64..=1 {
                let x = horiz[reflect(v as i64 + dv, rows) * cols + u];
                for c in 0..3 {
                    acc[c] += x[c];
                }
            }
            out[v * cols + u] = acc.map(|s| s / 9.0);
        }
    }
    out
}

fn moments(a: &Image, b: &Image) -> Vec<[Moments; 3]> {
    let (w, h) = a.dims();
    let mu_a = box_mean(h, w, |u, v| *a.get(u, v));
    let mu_b = box_mean(h, w, |u, v| *b.get(u, v));
    let e_aa = box_mean(h, w, |u, v| a.get(u, v).map(|x| x * x));
    let e_bb = box_mean(h, w, |u, v| b.get(u, v).map(|x| x * x));
    let e_ab = box_mean(h, w, |u, v| {
        let (x, y) = (a.get(u, v), b.get(u, v));
        [x[0] * y[0], x[1] * y[1], x[2] * y[2]]
    });
    (0..w * h)
        .map(|i| {
            std::array::from_fn(|c| Moments {
                mu_a: mu_a[i][c],
                mu_b: mu_b[i][c],
                e_aa: e_aa[i][c],
                e_bb: e_bb[i][c],
                e_ab: e_ab[i][c],
            })
        })
        .collect()
}

/// Per-channel SSIM maps.
pub fn ssim_channels(a: &Image, b: &Image) -> Raster<[f64; 3]> {
    assert!(a.same_shape(b), "ssim: shape mismatch");
    let m = moments(a, b);
    Raster::from_vec(a.width(), a.height(), m.iter().map(|px| px.map(|c| c.ssim())).collect())
        .expect("shape preserved")
}

/// Channel-averaged SSIM map, values in `[-1, 1]`.
pub fn ssim(a: &Image, b: &Image) -> Raster<f64> {
    ssim_channels(a, b).map(|s| (s[0] + s[1] + s[2]) / 3.0)
}

/// Pulls an upstream gradient on each per-channel SSIM value back onto `b`.
///
/// `upstream(p)` is `∂L/∂SSIM_c(p)`, shared by the three channels.
pub fn ssim_backward_b(a: &Image, b: &Image, upstream: &Raster<f64>) -> Raster<[f64; 3]> {
    let (w, h) = a.dims();
    let m = moments(a, b);
    let mut grad = Raster::filled(w, h, [0.0; 3]);
    for v in 0..h {
        for u in 0..w {
            let g = *upstream.get(u, v);
            if g == 0.0 {
                continue;
            }
            let coeffs = m[v * w + u].map(|c| c.grad_b());
            for dv in -1i64..=1 {
                let y = reflect(v as i64 + dv, h);
                for du in -1i64..=1 {
                    let x = reflect(u as i64 + du, w);
                    let (av, bv) = (a.get(x, y), b.get(x, y));
                    let out = grad.get_mut(x, y);
                    for c in 0..3 {
                        let (d_mu, d_bb, d_ab) = coeffs[c];
                        out[c] += g / 9.0 * (d_mu + 2.0 * d_bb * bv[c] + d_ab * av[c]);
                    }
                }
            }
        }
    }
    grad
}
