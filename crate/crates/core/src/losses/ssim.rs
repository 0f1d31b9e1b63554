//! Structural similarity restricted to tissue pixels.
//!
//! Window statistics use an 11×11 Gaussian (σ = 1.5) whose weights are
//! limited to in-bounds pixels with `M = 0` and renormalized per center, so
//! values under the tool never enter any window. The score is the mean over
//! tissue centers and color channels.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scene::{Mask, RgbImage};

pub const WINDOW_RADIUS: usize = 5;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps for offsets `-5..=5`.
pub fn window_taps() -> [f64; 2 * WINDOW_RADIUS + 1] {
    let mut g = [0.0; 2 * WINDOW_RADIUS + 1];
    for (i, w) in g.iter_mut().enumerate() {
        let d = i as f64 - WINDOW_RADIUS as f64;
        *w = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.iter_mut().for_each(|w| *w /= sum);
    g
}

/// Separable zero-padded convolution with the window taps.
fn blur<T: Real>(field: &[T], width: usize, height: usize, taps: &[T]) -> Vec<T> {
    let r = WINDOW_RADIUS as isize;
    let mut tmp = vec![T::zero(); field.len()];
    for v in 0..height {
        for u in 0..width {
            let mut acc = T::zero();
            for k in -r..=r {
                let x = u as isize + k;
                if x >= 0 && (x as usize) < width {
                    acc += taps[(k + r) as usize] * field[v * width + x as usize];
                }
            }
            tmp[v * width + u] = acc;
        }
    }
    let mut out = vec![T::zero(); field.len()];
    for v in 0..height {
        for u in 0..width {
            let mut acc = T::zero();
            for k in -r..=r {
                let y = v as isize + k;
                if y >= 0 && (y as usize) < height {
                    acc += taps[(k + r) as usize] * tmp[y as usize * width + u];
                }
            }
            out[v * width + u] = acc;
        }
    }
    out
}

struct Stats<T> {
    weight: Vec<T>,
    mx: Vec<T>,
    my: Vec<T>,
    exx: Vec<T>,
    eyy: Vec<T>,
    exy: Vec<T>,
}

fn channel_stats<T: Real>(x: &[T], y: &[T], m: &[T], width: usize, height: usize, taps: &[T]) -> Stats<T> {
    let prod = |f: &dyn Fn(usize) -> T| (0..x.len()).map(f).collect::<Vec<T>>();
    let weight = blur(m, width, height, taps);
    let norm = |s: Vec<T>| -> Vec<T> {
        s.iter().zip(&weight).map(|(&a, &w)| if w > T::zero() { a / w } else { T::zero() }).collect()
    };
    let mx = norm(blur(&prod(&|i| m[i] * x[i]), width, height, taps));
    let my = norm(blur(&prod(&|i| m[i] * y[i]), width, height, taps));
    let exx = norm(blur(&prod(&|i| m[i] * x[i] * x[i]), width, height, taps));
    let eyy = norm(blur(&prod(&|i| m[i] * y[i] * y[i]), width, height, taps));
    let exy = norm(blur(&prod(&|i| m[i] * x[i] * y[i]), width, height, taps));
    Stats { weight, mx, my, exx, eyy, exy }
}

fn check<T: Real>(a: &RgbImage<T>, b: &RgbImage<T>, mask: &Mask) -> Result<usize> {
    if !a.same_shape(b) || !a.same_shape(mask) {
        return Err(Error::ShapeMismatch("ssim inputs differ in resolution".into()));
    }
    let n = mask.data.iter().filter(|&&m| !m).count();
    if n == 0 {
        return Err(Error::AllMasked);
    }
    Ok(n)
}

fn channel<T: Real>(img: &RgbImage<T>, c: usize) -> Vec<T> {
    img.data.iter().map(|p| p[c]).collect()
}

/// Masked SSIM of `a` against `b`.
pub fn masked_ssim<T: Real>(a: &RgbImage<T>, b: &RgbImage<T>, mask: &Mask) -> Result<T> {
    Ok(masked_ssim_impl(a, b, mask, false)?.0)
}

/// Masked SSIM and its gradient with respect to `a`.
pub fn masked_ssim_grad<T: Real>(a: &RgbImage<T>, b: &RgbImage<T>, mask: &Mask) -> Result<(T, RgbImage<T>)> {
    let (s, g) = masked_ssim_impl(a, b, mask, true)?;
    Ok((s, g.unwrap()))
}

fn masked_ssim_impl<T: Real>(
    a: &RgbImage<T>,
    b: &RgbImage<T>,
    mask: &Mask,
    want_grad: bool,
) -> Result<(T, Option<RgbImage<T>>)> {
    let n_centers = check(a, b, mask)?;
    let (w, h) = (a.width, a.height);
    let taps: Vec<T> = window_taps().iter().map(|&t| T::lit(t)).collect();
    let m: Vec<T> = mask.data.iter().map(|&t| if t { T::zero() } else { T::one() }).collect();
    let (c1, c2, two) = (T::lit(C1), T::lit(C2), T::lit(2.0));
    let inv_n = T::one() / T::lit((3 * n_centers) as f64);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| RgbImage::filled(w, h, Vector3::zeros()));
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let st = channel_stats(&x, &y, &m, w, h, &taps);
        let mut ga = vec![T::zero(); x.len()];
        let mut gb = vec![T::zero(); x.len()];
        let mut gc = vec![T::zero(); x.len()];
        for i in 0..x.len() {
            if m[i] == T::zero() {
                continue;
            }
            let (mx, my) = (st.mx[i], st.my[i]);
            let n1 = two * mx * my + c1;
            let n2 = two * (st.exy[i] - mx * my) + c2;
            let d1 = mx * mx + my * my + c1;
            let d2 = st.exx[i] - mx * mx + st.eyy[i] - my * my + c2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let dd = d1 * d2;
                let d_mx = (two * my * n2 - two * my * n1) / dd - s * (two * mx / d1 - two * mx / d2);
                let d_exx = -s / d2;
                let d_exy = two * n1 / dd;
                let k = inv_n / st.weight[i];
                ga[i] = d_mx * k;
                gb[i] = d_exx * k;
                gc[i] = d_exy * k;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ca = blur(&ga, w, h, &taps);
            let cb = blur(&gb, w, h, &taps);
            let cc = blur(&gc, w, h, &taps);
            for i in 0..x.len() {
                g.data[i][c] = m[i] * (ca[i] + two * x[i] * cb[i] + y[i] * cc[i]);
            }
        }
    }
    Ok((total * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Grid;

    /// Window statistics evaluated pixel by pixel.
    fn direct(a: &RgbImage<f64>, b: &RgbImage<f64>, mask: &Mask) -> f64 {
        let taps = window_taps();
        let r = WINDOW_RADIUS as isize;
        let (mut sum, mut n) = (0.0, 0usize);
        for v in 0..a.height as isize {
            for u in 0..a.width as isize {
                if *mask.get(u as usize, v as usize) {
                    continue;
                }
                for c in 0..3 {
                    let (mut w, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dv in -r..=r {
                        for du in -r..=r {
                            let (x, y) = (u + du, v + dv);
                            if x < 0
                                || y < 0
                                || x >= a.width as isize
                                || y >= a.height as isize
                                || *mask.get(x as usize, y as usize)
                            {
                                continue;
                            }
                            let g = taps[(du + r) as usize] * taps[(dv + r) as usize];
                            let p = a.get(x as usize, y as usize)[c];
                            let q = b.get(x as usize, y as usize)[c];
                            w += g;
                            sx += g * p;
                            sy += g * q;
                            sxx += g * p * p;
                            syy += g * q * q;
                            sxy += g * p * q;
                        }
                    }
                    let (mx, my) = (sx / w, sy / w);
                    let (vx, vy, cxy) = (sxx / w - mx * mx, syy / w - my * my, sxy / w - mx * my);
                    sum += (2.0 * mx * my + C1) * (2.0 * cxy + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    fn pattern(w: usize, h: usize, seed: u64) -> RgbImage<f64> {
        Grid::from_fn(w, h, |u, v| {
            let t = (u * 7 + v * 13 + seed as usize * 5) as f64;
            Vector3::new((t * 0.37).sin() * 0.5 + 0.5, (t * 0.11).cos() * 0.4 + 0.5, ((u * v) as f64 * 0.05).fract())
        })
    }

    #[test]
    fn identical_images_score_one() {
        let a = pattern(12, 9, 1);
        let m = Grid::filled(12, 9, false);
        assert!((masked_ssim(&a, &a, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverted_image_scores_below_one() {
        let a = pattern(12, 9, 1);
        let b = a.map(|p| p.map(|x| 1.0 - x));
        let m = Grid::filled(12, 9, false);
        assert!(masked_ssim(&a, &b, &m).unwrap() < 0.9);
    }

    #[test]
    fn matches_direct_formula() {
        let a = pattern(8, 8, 2);
        let b = pattern(8, 8, 3);
        let mut m = Grid::filled(8, 8, false);
        for (u, v) in [(0, 0), (3, 4), (4, 4), (7, 2)] {
            *m.get_mut(u, v) = true;
        }
        let s = masked_ssim(&a, &b, &m).unwrap();
        assert!((s - direct(&a, &b, &m)).abs() < 1e-12);
        let open = Grid::filled(8, 8, false);
        assert!((masked_ssim(&a, &b, &open).unwrap() - direct(&a, &b, &open)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = pattern(9, 7, 4);
        let b = pattern(9, 7, 5);
        let mut m = Grid::filled(9, 7, false);
        *m.get_mut(4, 3) = true;
        *m.get_mut(5, 3) = true;
        let (_, g) = masked_ssim_grad(&a, &b, &m).unwrap();
        let h = 1e-6;
        for i in [0, 10, 31, 32, 62] {
            for c in 0..3 {
                let mut p = a.clone();
                p.data[i][c] += h;
                let mut q = a.clone();
                q.data[i][c] -= h;
                let fd = (masked_ssim(&p, &b, &m).unwrap() - masked_ssim(&q, &b, &m).unwrap()) / (2.0 * h);
                assert!((fd - g.data[i][c]).abs() < 1e-7, "{i} {c}: {fd} vs {}", g.data[i][c]);
            }
        }
        assert_eq!(g.data[m.index(4, 3)], Vector3::zeros());
    }

    #[test]
    fn all_masked_is_an_error() {
        let a = pattern(4, 4, 1);
        assert!(matches!(masked_ssim(&a, &a, &Grid::filled(4, 4, true)), Err(Error::AllMasked)));
    }
}
