//! Finite-difference gradient checks shared by the gradient suite and the
//! acceptance run.
//!
//! Every class draws random `f64` instances, compares the analytic gradient
//! of a random linear functional of the outputs against central differences
//! with step `H`, and rejects an instance when the difference quotient at
//! `H` and `2H` disagree (a kink or jump lies within the stencil).

#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix3, Matrix4, Rotation3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tissuesplat::deform::{
    apply_deformation, apply_deformation_backward, DeformationNet, EncodingConfig, NetConfig, Offsets,
};
use tissuesplat::gaussian_math::{
    build_covariance, build_covariance_backward, eval_gaussian_2d, eval_gaussian_2d_backward, project_gaussian,
    project_gaussian_backward, CameraView, ProjectedGrad,
};
use tissuesplat::knn::NeighborGraph;
use tissuesplat::losses::{
    deformation_cov_loss, deformation_pos_loss, masked_l1_color, masked_l1_depth, masked_ssim, masked_ssim_grad,
    total_loss, tv_smooth_loss, LossInputs, LossWeights,
};
use tissuesplat::raster::{composite_backward, render, RenderConfig};
use tissuesplat::{Camera, FrameRecord, GaussianGrads, GaussianSet, Grid, Mask, RenderOutput};

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 100;

pub enum Outcome {
    Accepted(f64),
    Rejected,
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` of one instance, or `Rejected`
/// when a coordinate sits near a discontinuity.
pub fn check(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> Outcome {
    check_coords(f, x, analytic, &(0..x.len()).collect::<Vec<_>>())
}

/// [`check`] restricted to the listed coordinates.
pub fn check_coords(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: &[usize]) -> Outcome {
    assert_eq!(x.len(), analytic.len());
    let mut xp = x.to_vec();
    let mut central = |i: usize, h: f64| {
        xp[i] = x[i] + h;
        let a = f(&xp);
        xp[i] = x[i] - h;
        let b = f(&xp);
        xp[i] = x[i];
        (a - b) / (2.0 * h)
    };
    let mut err = 0.0;
    let mut an = 0.0;
    let mut nn = 0.0;
    for &i in coords {
        let d1 = central(i, H);
        let d2 = central(i, 2.0 * H);
        if (d1 - d2).abs() > 1e-6 * (1.0 + d1.abs()) {
            return Outcome::Rejected;
        }
        err += (analytic[i] - d1).powi(2);
        an += analytic[i].powi(2);
        nn += d1.powi(2);
    }
    let scale = an.sqrt().max(nn.sqrt());
    Outcome::Accepted(if scale == 0.0 { 0.0 } else { err.sqrt() / scale })
}

#[derive(Clone, Debug)]
pub struct ClassReport {
    pub name: &'static str,
    pub accepted: usize,
    pub rejected: usize,
    pub worst: f64,
}

impl ClassReport {
    pub fn passed(&self) -> bool {
        self.accepted >= INSTANCES && self.worst < TOLERANCE
    }
}

pub fn run_class(name: &'static str, seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> Outcome) -> ClassReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ClassReport { name, accepted: 0, rejected: 0, worst: 0.0 };
    while report.accepted < INSTANCES && report.rejected < 4 * INSTANCES {
        match instance(&mut rng) {
            Outcome::Accepted(e) => {
                report.accepted += 1;
                report.worst = report.worst.max(e);
            }
            Outcome::Rejected => report.rejected += 1,
        }
    }
    report
}

pub fn all_classes() -> Vec<ClassReport> {
    vec![
        covariance_class(),
        projection_class(),
        gaussian_2d_class(),
        rasterizer_class(),
        deformation_apply_class(),
        deformation_net_class(),
        color_loss_class(),
        depth_loss_class(),
        ssim_class(),
        smooth_loss_class(),
        pos_loss_class(),
        cov_loss_class(),
        total_loss_class(),
        pipeline_class(),
    ]
}

// Random instance builders.

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn vec3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| uniform(rng, lo, hi))
}

fn quat(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    loop {
        let q = Vector4::from_fn(|_, _| uniform(rng, -1.0, 1.0));
        if q.norm() > 0.3 {
            return q * uniform(rng, 0.5, 1.5);
        }
    }
}

fn values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, lo, hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rgb(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> Grid<Vector3<f64>> {
    Grid::from_fn(w, h, |_, _| vec3(rng, lo, hi))
}

fn scalar(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> Grid<f64> {
    Grid::from_fn(w, h, |_, _| uniform(rng, lo, hi))
}

fn mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
    let mut m = Grid::from_fn(w, h, |_, _| rng.gen_bool(p));
    m.data[0] = false;
    m
}

fn flat_rgb(img: &Grid<Vector3<f64>>) -> Vec<f64> {
    img.data.iter().flat_map(|c| c.iter().copied()).collect()
}

fn unflat_rgb(x: &[f64], w: usize, h: usize) -> Grid<Vector3<f64>> {
    Grid { width: w, height: h, data: x.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect() }
}

/// Gaussian parameters in the field-major order of `GaussianGrads::flatten`.
pub fn set_to_flat(set: &GaussianSet<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(set.len() * 14);
    set.positions.iter().for_each(|v| out.extend(v.iter()));
    set.log_scales.iter().for_each(|v| out.extend(v.iter()));
    set.rotations.iter().for_each(|v| out.extend(v.iter()));
    out.extend(set.opacity_logits.iter());
    set.colors.iter().for_each(|v| out.extend(v.iter()));
    out
}

pub fn set_from_flat(x: &[f64], n: usize) -> GaussianSet<f64> {
    let mut set = GaussianSet::with_capacity(n);
    let (p, rest) = x.split_at(3 * n);
    let (s, rest) = rest.split_at(3 * n);
    let (q, rest) = rest.split_at(4 * n);
    let (o, c) = rest.split_at(n);
    for i in 0..n {
        set.push(
            Vector3::new(p[3 * i], p[3 * i + 1], p[3 * i + 2]),
            Vector3::new(s[3 * i], s[3 * i + 1], s[3 * i + 2]),
            Vector4::new(q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]),
            o[i],
            Vector3::new(c[3 * i], c[3 * i + 1], c[3 * i + 2]),
        );
    }
    set
}

/// Gaussians in front of an identity camera with focal `f` and resolution `w`×`h`.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, w: usize, h: usize, f: f64) -> GaussianSet<f64> {
    let mut set = GaussianSet::with_capacity(n);
    for _ in 0..n {
        let z = uniform(rng, 1.5, 3.0);
        let u = uniform(rng, 0.1, 0.9) * w as f64;
        let v = uniform(rng, 0.1, 0.9) * h as f64;
        let pos = Vector3::new((u - w as f64 / 2.0) * z / f, (v - h as f64 / 2.0) * z / f, z);
        let scale = Vector3::from_fn(|_, _| uniform(rng, 0.06, 0.25).ln());
        set.push(pos, scale, quat(rng), uniform(rng, -1.5, 2.5), vec3(rng, 0.0, 1.0));
    }
    set
}

fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let axis = vec3(rng, -1.0, 1.0);
    let rot = Rotation3::new(axis * 0.3);
    let mut e = Matrix4::identity();
    e.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
    e.fixed_view_mut::<3, 1>(0, 3).copy_from(&vec3(rng, -0.3, 0.3));
    Camera::new(uniform(rng, 15.0, 30.0), uniform(rng, 15.0, 30.0), 10.5, 8.5, 20, 16, e).unwrap()
}

fn sym3(x: &[f64]) -> Matrix3<f64> {
    Matrix3::new(x[0], x[1], x[2], x[1], x[3], x[4], x[2], x[4], x[5])
}

fn sym3_grad(g: &Matrix3<f64>) -> [f64; 6] {
    [g[(0, 0)], g[(0, 1)] + g[(1, 0)], g[(0, 2)] + g[(2, 0)], g[(1, 1)], g[(1, 2)] + g[(2, 1)], g[(2, 2)]]
}

fn sym3_flat(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

// Classes.

pub fn covariance_class() -> ClassReport {
    run_class("covariance", 1, |rng| {
        let w = Matrix3::from_fn(|_, _| uniform(rng, -1.0, 1.0));
        let x: Vec<f64> = vec3(rng, 0.05, 2.0).iter().chain(quat(rng).iter()).copied().collect();
        let f = |x: &[f64]| {
            let s = Vector3::new(x[0], x[1], x[2]);
            let q = Vector4::new(x[3], x[4], x[5], x[6]);
            build_covariance(&s, &q).unwrap().component_mul(&w).sum()
        };
        let (ds, dq) =
            build_covariance_backward(&Vector3::new(x[0], x[1], x[2]), &Vector4::new(x[3], x[4], x[5], x[6]), &w)
                .unwrap();
        let analytic: Vec<f64> = ds.iter().chain(dq.iter()).copied().collect();
        check(&f, &x, &analytic)
    })
}

pub fn projection_class() -> ClassReport {
    run_class("projection", 2, |rng| {
        let cam = random_camera(rng);
        let view = CameraView::<f64>::new(&cam);
        let world = cam.camera_to_world(&Vector3::new(
            uniform(rng, -0.4, 0.4),
            uniform(rng, -0.3, 0.3),
            uniform(rng, 1.0, 3.0),
        ));
        let l = Matrix3::from_fn(|r, c| if r >= c { uniform(rng, -0.2, 0.2) } else { 0.0 });
        let sigma = l * l.transpose() + Matrix3::identity() * 0.01;
        let grad = ProjectedGrad {
            mean2d: Vector2::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0)),
            conic: Matrix2::from_fn(|_, _| uniform(rng, -1.0, 1.0)),
            depth: uniform(rng, -1.0, 1.0),
        };
        let mut x: Vec<f64> = world.iter().copied().collect();
        x.extend(sym3_flat(&sigma));
        let f = |x: &[f64]| {
            let p = project_gaussian(&Vector3::new(x[0], x[1], x[2]), &sym3(&x[3..]), &view).expect("visible");
            grad.mean2d.dot(&p.mean2d) + grad.conic.component_mul(&p.conic).sum() + grad.depth * p.depth
        };
        let pos = Vector3::new(x[0], x[1], x[2]);
        let Some(proj) = project_gaussian(&pos, &sigma, &view) else {
            return Outcome::Rejected;
        };
        let (dx, dsigma) = project_gaussian_backward(&pos, &sigma, &view, &proj, &grad);
        let mut analytic: Vec<f64> = dx.iter().copied().collect();
        analytic.extend(sym3_grad(&dsigma));
        check(&f, &x, &analytic)
    })
}

pub fn gaussian_2d_class() -> ClassReport {
    run_class("gaussian_2d", 3, |rng| {
        let view = CameraView::<f64>::new(&Camera::identity_pose(20.0, 20.0, 10.5, 8.5, 20, 16).unwrap());
        let sigma = Matrix3::from_diagonal(&vec3(rng, 0.005, 0.05));
        let base = project_gaussian(&Vector3::new(0.1, -0.1, 2.0), &sigma, &view).unwrap();
        let pixel = base.mean2d + Vector2::new(uniform(rng, -3.0, 3.0), uniform(rng, -3.0, 3.0));
        let d_value = uniform(rng, -1.0, 1.0);
        let c = base.conic;
        let x = vec![base.mean2d.x, base.mean2d.y, c[(0, 0)], c[(0, 1)], c[(1, 1)], pixel.x, pixel.y];
        let f = |x: &[f64]| {
            let mut g = base;
            g.mean2d = Vector2::new(x[0], x[1]);
            g.conic = Matrix2::new(x[2], x[3], x[3], x[4]);
            d_value * eval_gaussian_2d(&g, &Vector2::new(x[5], x[6]))
        };
        let (dm, dc, dp) = eval_gaussian_2d_backward(&base, &pixel, d_value);
        let analytic = vec![dm.x, dm.y, dc[(0, 0)], dc[(0, 1)] + dc[(1, 0)], dc[(1, 1)], dp.x, dp.y];
        check(&f, &x, &analytic)
    })
}

pub fn rasterizer_class() -> ClassReport {
    run_class("rasterizer", 4, |rng| {
        let (w, h) = (20, 16);
        let cam = Camera::identity_pose(20.0, 20.0, 10.5, 8.5, w, h).unwrap();
        let n = rng.gen_range(2..6);
        let set = random_scene(rng, n, w, h, 20.0);
        let config = RenderConfig { tile_size: 8, normalize_depth: rng.gen_bool(0.5) };
        let dc = rgb(rng, w, h, -1.0, 1.0);
        let dd = scalar(rng, w, h, -1.0, 1.0);
        let da = scalar(rng, w, h, -1.0, 1.0);
        let f = |x: &[f64]| {
            let out = render(&set_from_flat(x, n), &cam, &config).unwrap();
            dot(&flat_rgb(&out.color), &flat_rgb(&dc)) + dot(&out.depth.data, &dd.data) + dot(&out.alpha.data, &da.data)
        };
        let out = render(&set, &cam, &config).unwrap();
        let grads = composite_backward(&set, &out, &dc, &dd, Some(&da)).unwrap();
        check(&f, &set_to_flat(&set), &grads.gaussians.flatten())
    })
}

pub fn deformation_apply_class() -> ClassReport {
    run_class("deformation_apply", 5, |rng| {
        let n = 3;
        let set = random_scene(rng, n, 20, 16, 20.0);
        let offsets = Offsets {
            dx: (0..n).map(|_| vec3(rng, -0.1, 0.1)).collect(),
            ds: (0..n).map(|_| vec3(rng, -0.2, 0.2)).collect(),
            dq: (0..n).map(|_| Vector4::from_fn(|_, _| uniform(rng, -0.3, 0.3))).collect(),
        };
        let upstream = set_from_flat(&values(rng, 14 * n, -1.0, 1.0), n);
        let mut x = set_to_flat(&set);
        for i in 0..n {
            x.extend(offsets.dx[i].iter().chain(offsets.ds[i].iter()).chain(offsets.dq[i].iter()));
        }
        let up = set_to_flat(&upstream);
        let f = |x: &[f64]| {
            let set = set_from_flat(&x[..14 * n], n);
            let o = &x[14 * n..];
            let off = Offsets {
                dx: (0..n).map(|i| Vector3::from_row_slice(&o[10 * i..10 * i + 3])).collect(),
                ds: (0..n).map(|i| Vector3::from_row_slice(&o[10 * i + 3..10 * i + 6])).collect(),
                dq: (0..n).map(|i| Vector4::from_row_slice(&o[10 * i + 6..10 * i + 10])).collect(),
            };
            dot(&set_to_flat(&apply_deformation(&set, &off).unwrap()), &up)
        };
        let d_obs = GaussianGrads {
            positions: upstream.positions.clone(),
            log_scales: upstream.log_scales.clone(),
            rotations: upstream.rotations.clone(),
            opacity_logits: upstream.opacity_logits.clone(),
            colors: upstream.colors.clone(),
        };
        let (dc, doff) = apply_deformation_backward(&set, &offsets, &d_obs).unwrap();
        let mut analytic = dc.flatten();
        for i in 0..n {
            analytic.extend(doff.dx[i].iter().chain(doff.ds[i].iter()).chain(doff.dq[i].iter()));
        }
        check(&f, &x, &analytic)
    })
}

fn small_net_config() -> NetConfig {
    NetConfig {
        hidden_layers: 3,
        width: 12,
        skip_layer: Some(2),
        encoding: EncodingConfig { position_freqs: 3, time_freqs: 2, include_input: true },
    }
}

fn random_net(rng: &mut ChaCha8Rng) -> DeformationNet<f64> {
    let mut net = DeformationNet::<f64>::new(small_net_config(), rng.gen());
    // Replace the zero output head so gradients reach every layer.
    for p in net.params.iter_mut() {
        if *p == 0.0 {
            *p = uniform(rng, -0.3, 0.3);
        }
    }
    net
}

fn offsets_rows(o: &Offsets<f64>) -> Vec<f64> {
    (0..o.len())
        .flat_map(|i| o.dx[i].iter().chain(o.ds[i].iter()).chain(o.dq[i].iter()).copied().collect::<Vec<_>>())
        .collect()
}

pub fn deformation_net_class() -> ClassReport {
    run_class("deformation_net", 6, |rng| {
        let net = random_net(rng);
        let n = 4;
        let positions: Vec<Vector3<f64>> = (0..n).map(|_| vec3(rng, -1.0, 1.0)).collect();
        let t = uniform(rng, 0.0, 1.0);
        let up = values(rng, 10 * n, -1.0, 1.0);
        let f = |x: &[f64]| {
            let net = DeformationNet::from_params(net.config, x.to_vec()).unwrap();
            dot(&offsets_rows(&net.predict_offsets(&positions, t)), &up)
        };
        let (_, cache) = net.forward(&positions, t);
        let d_off = Offsets {
            dx: (0..n).map(|i| Vector3::from_row_slice(&up[10 * i..10 * i + 3])).collect(),
            ds: (0..n).map(|i| Vector3::from_row_slice(&up[10 * i + 3..10 * i + 6])).collect(),
            dq: (0..n).map(|i| Vector4::from_row_slice(&up[10 * i + 6..10 * i + 10])).collect(),
        };
        let analytic = net.backward(&cache, &d_off);
        check(&f, &net.params, &analytic)
    })
}

pub fn color_loss_class() -> ClassReport {
    run_class("loss_color", 7, |rng| {
        let (w, h) = (7, 5);
        let gt = rgb(rng, w, h, 0.0, 1.0);
        let m = mask(rng, w, h, 0.3);
        let x = flat_rgb(&rgb(rng, w, h, 0.0, 1.0));
        let f = |x: &[f64]| masked_l1_color(&unflat_rgb(x, w, h), &gt, &m).unwrap().0;
        let (_, g) = masked_l1_color(&unflat_rgb(&x, w, h), &gt, &m).unwrap();
        check(&f, &x, &flat_rgb(&g))
    })
}

pub fn depth_loss_class() -> ClassReport {
    run_class("loss_depth", 8, |rng| {
        let (w, h) = (7, 5);
        let mut gt = scalar(rng, w, h, 0.5, 3.0);
        gt.data[3] = 0.0;
        let m = mask(rng, w, h, 0.3);
        let x = scalar(rng, w, h, 0.5, 3.0).data;
        let f = |x: &[f64]| masked_l1_depth(&Grid { width: w, height: h, data: x.to_vec() }, &gt, &m).unwrap().0;
        let (_, g) = masked_l1_depth(&Grid { width: w, height: h, data: x.clone() }, &gt, &m).unwrap();
        check(&f, &x, &g.data)
    })
}

pub fn ssim_class() -> ClassReport {
    run_class("loss_ssim", 9, |rng| {
        let (w, h) = (9, 8);
        let b = rgb(rng, w, h, 0.0, 1.0);
        let m = mask(rng, w, h, 0.3);
        let x = flat_rgb(&rgb(rng, w, h, 0.0, 1.0));
        let f = |x: &[f64]| masked_ssim(&unflat_rgb(x, w, h), &b, &m).unwrap();
        let (_, g) = masked_ssim_grad(&unflat_rgb(&x, w, h), &b, &m).unwrap();
        check(&f, &x, &flat_rgb(&g))
    })
}

pub fn smooth_loss_class() -> ClassReport {
    run_class("loss_smooth", 10, |rng| {
        let (w, h) = (7, 5);
        let region = mask(rng, w, h, 0.4);
        let x = flat_rgb(&rgb(rng, w, h, 0.0, 1.0));
        let f = |x: &[f64]| tv_smooth_loss(&unflat_rgb(x, w, h), &region).unwrap().0;
        let (_, g) = tv_smooth_loss(&unflat_rgb(&x, w, h), &region).unwrap();
        check(&f, &x, &flat_rgb(&g))
    })
}

fn flat_vec3(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| p.iter().copied()).collect()
}

fn unflat_vec3(x: &[f64]) -> Vec<Vector3<f64>> {
    x.chunks(3).map(Vector3::from_row_slice).collect()
}

pub fn pos_loss_class() -> ClassReport {
    run_class("loss_pos", 11, |rng| {
        let n = 8;
        let canonical: Vec<Vector3<f64>> = (0..n).map(|_| vec3(rng, -1.0, 1.0)).collect();
        let observed: Vec<Vector3<f64>> = canonical.iter().map(|p| p + vec3(rng, -0.2, 0.2)).collect();
        let graph = NeighborGraph::build(&canonical, 3);
        let mut x = flat_vec3(&canonical);
        x.extend(flat_vec3(&observed));
        let f =
            |x: &[f64]| deformation_pos_loss(&graph, &unflat_vec3(&x[..3 * n]), &unflat_vec3(&x[3 * n..])).unwrap().0;
        let (_, g) = deformation_pos_loss(&graph, &canonical, &observed).unwrap();
        let mut analytic = flat_vec3(&g.canonical);
        analytic.extend(flat_vec3(&g.observed));
        check(&f, &x, &analytic)
    })
}

pub fn cov_loss_class() -> ClassReport {
    run_class("loss_cov", 12, |rng| {
        let n = 8;
        let positions: Vec<Vector3<f64>> = (0..n).map(|_| vec3(rng, -1.0, 1.0)).collect();
        let graph = NeighborGraph::build(&positions, 3);
        let mut x = Vec::new();
        for _ in 0..2 * n {
            let l = Matrix3::from_fn(|r, c| if r >= c { uniform(rng, -0.5, 0.5) } else { 0.0 });
            x.extend(sym3_flat(&(l * l.transpose())));
        }
        let mats = |x: &[f64]| x.chunks(6).map(sym3).collect::<Vec<_>>();
        let f = |x: &[f64]| deformation_cov_loss(&graph, &mats(&x[..6 * n]), &mats(&x[6 * n..])).unwrap().0;
        let all = mats(&x);
        let (_, g) = deformation_cov_loss(&graph, &all[..n], &all[n..]).unwrap();
        let analytic: Vec<f64> = g.canonical.iter().chain(g.observed.iter()).flat_map(sym3_grad).collect();
        check(&f, &x, &analytic)
    })
}

fn random_weights(rng: &mut ChaCha8Rng) -> LossWeights {
    LossWeights {
        ssim: uniform(rng, 0.0, 1.0),
        depth: uniform(rng, 0.0, 1.0),
        pos: uniform(rng, 0.0, 2.0),
        cov: uniform(rng, 0.0, 20.0),
        smooth: uniform(rng, 0.0, 1.0),
    }
}

fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FrameRecord<f64> {
    FrameRecord {
        index: 0,
        time: 0.0,
        image: rgb(rng, w, h, 0.0, 1.0),
        depth: scalar(rng, w, h, 1.0, 3.0),
        mask: mask(rng, w, h, 0.25),
    }
}

/// Position, log-scale and rotation parameters of a set (the entries the
/// rigidity terms read).
fn geometry_flat(set: &GaussianSet<f64>) -> Vec<f64> {
    set_to_flat(set)[..10 * set.len()].to_vec()
}

fn with_geometry(set: &GaussianSet<f64>, x: &[f64]) -> GaussianSet<f64> {
    let mut flat = set_to_flat(set);
    flat[..x.len()].copy_from_slice(x);
    set_from_flat(&flat, set.len())
}

pub fn total_loss_class() -> ClassReport {
    run_class("loss_total", 13, |rng| {
        let (w, h) = (8, 7);
        let n = 6;
        let frame = random_frame(rng, w, h);
        let occluded = mask(rng, w, h, 0.2);
        let weights = random_weights(rng);
        let canonical = random_scene(rng, n, w, h, 8.0);
        let mut observed = canonical.clone();
        for i in 0..n {
            observed.positions[i] += vec3(rng, -0.1, 0.1);
            observed.log_scales[i] += vec3(rng, -0.2, 0.2);
            observed.rotations[i] = quat(rng);
        }
        let graph = NeighborGraph::build(&canonical.positions, 3);
        let render_out = RenderOutput {
            color: rgb(rng, w, h, 0.0, 1.0),
            depth: scalar(rng, w, h, 1.0, 3.0),
            alpha: scalar(rng, w, h, 0.0, 1.0),
            cache: None,
        };

        let split = |x: &[f64]| {
            let (c, rest) = x.split_at(3 * w * h);
            let (d, rest) = rest.split_at(w * h);
            let (gc, go) = rest.split_at(10 * n);
            let out = RenderOutput {
                color: unflat_rgb(c, w, h),
                depth: Grid { width: w, height: h, data: d.to_vec() },
                alpha: render_out.alpha.clone(),
                cache: None,
            };
            (out, with_geometry(&canonical, gc), with_geometry(&observed, go))
        };
        let f = |x: &[f64]| {
            let (out, c, o) = split(x);
            let inputs = LossInputs {
                render: &out,
                frame: &frame,
                occluded: Some(&occluded),
                canonical: &c,
                observed: &o,
                graph: &graph,
            };
            total_loss(&inputs, &weights).unwrap().0.total(&weights)
        };
        let mut x = flat_rgb(&render_out.color);
        x.extend(&render_out.depth.data);
        x.extend(geometry_flat(&canonical));
        x.extend(geometry_flat(&observed));

        let inputs = LossInputs {
            render: &render_out,
            frame: &frame,
            occluded: Some(&occluded),
            canonical: &canonical,
            observed: &observed,
            graph: &graph,
        };
        let (_, g) = total_loss(&inputs, &weights).unwrap();
        let mut analytic = flat_rgb(&g.color);
        analytic.extend(&g.depth.data);
        analytic.extend(&g.canonical.flatten()[..10 * n]);
        analytic.extend(&g.observed.flatten()[..10 * n]);
        check(&f, &x, &analytic)
    })
}

/// Full objective as a function of canonical Gaussians and network weights:
/// deform, render, evaluate every loss term.
pub fn pipeline_class() -> ClassReport {
    run_class("pipeline", 14, |rng| {
        let (w, h) = (20, 16);
        let cam = Camera::identity_pose(20.0, 20.0, 10.5, 8.5, w, h).unwrap();
        let n = 4;
        let canonical = random_scene(rng, n, w, h, 20.0);
        let mut net = random_net(rng);
        for p in net.params.iter_mut() {
            *p *= 0.3;
        }
        let frame = random_frame(rng, w, h);
        let frame = FrameRecord { time: uniform(rng, 0.0, 1.0), ..frame };
        let occluded = mask(rng, w, h, 0.2);
        let weights = random_weights(rng);
        let graph = NeighborGraph::build(&canonical.positions, 2);
        let config = RenderConfig { tile_size: 8, normalize_depth: false };

        // Network inputs are detached canonical positions, so they stay at
        // their unperturbed values inside the objective.
        let objective = |set: &GaussianSet<f64>, net: &DeformationNet<f64>| {
            let offsets = net.predict_offsets(&canonical.positions, frame.time);
            let observed = apply_deformation(set, &offsets).unwrap();
            let out = render(&observed, &cam, &config).unwrap();
            let inputs = LossInputs {
                render: &out,
                frame: &frame,
                occluded: Some(&occluded),
                canonical: set,
                observed: &observed,
                graph: &graph,
            };
            total_loss(&inputs, &weights).unwrap().0.total(&weights)
        };
        let f = |x: &[f64]| {
            let set = set_from_flat(&x[..14 * n], n);
            let net = DeformationNet::from_params(net.config, x[14 * n..].to_vec()).unwrap();
            objective(&set, &net)
        };

        let (offsets, cache) = net.forward(&canonical.positions, frame.time);
        let observed = apply_deformation(&canonical, &offsets).unwrap();
        let out = render(&observed, &cam, &config).unwrap();
        let inputs = LossInputs {
            render: &out,
            frame: &frame,
            occluded: Some(&occluded),
            canonical: &canonical,
            observed: &observed,
            graph: &graph,
        };
        let (_, lg) = total_loss(&inputs, &weights).unwrap();
        let rg = composite_backward(&observed, &out, &lg.color, &lg.depth, None).unwrap();
        let mut d_obs = rg.gaussians;
        d_obs.add_assign(&lg.observed);
        let (mut d_can, d_off) = apply_deformation_backward(&canonical, &offsets, &d_obs).unwrap();
        d_can.add_assign(&lg.canonical);
        let d_net = net.backward(&cache, &d_off);

        let mut x = set_to_flat(&canonical);
        x.extend(&net.params);
        let mut analytic = d_can.flatten();
        analytic.extend(&d_net);
        // Every Gaussian coordinate and a random sample of network weights.
        let mut coords: Vec<usize> = (0..14 * n).collect();
        coords.extend((0..48).map(|_| 14 * n + rng.gen_range(0..d_net.len())));
        check_coords(&f, &x, &analytic, &coords)
    })
}
