//! Finite-difference gradient checks for every differentiable kernel,
//! run in `f64` on seeded random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::losses::{
    center_loss, context_broadcast, context_broadcast_backward, focal, focal_logits, kl_div, kl_div_logits, supcon,
    Centers, LossConfig,
};
use crate::nn::{
    dot, frame_attention_pool, frame_attention_pool_backward, grad_check, max_pool, max_pool_backward, mean_pool,
    mean_pool_backward, softmax_rows, softmax_rows_backward, Aggregation, AttentionWeighting,
    GradCheckReport, Linear, Matrix, MsaParams, PoolParams,
};
use crate::trainer::{batch_objective, Example, FrameOutput, ModelConfig, ModelParams, Workers};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CheckSizes {
    pub frames: usize,
    pub dim: usize,
    pub heads: usize,
    pub batch: usize,
    pub proj_dim: usize,
    pub classes: usize,
}

impl Default for CheckSizes {
    fn default() -> Self {
        Self {
            frames: 6,
            dim: 32,
            heads: 16,
            batch: 4,
            proj_dim: 8,
            classes: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

struct Suite {
    rng: ChaCha8Rng,
    h: f64,
    tol: f64,
    results: Vec<KernelCheck>,
}

impl Suite {
    fn mat(&mut self, r: usize, c: usize, scale: f64) -> Matrix<f64> {
        let data = (0..r * c).map(|_| self.rng.random_range(-scale..scale)).collect();
        Matrix::from_vec(r, c, data).expect("sized")
    }

    fn vec(&mut self, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-scale..scale)).collect()
    }

    fn prob(&mut self, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| self.rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    fn check(&self, x: &[f64], f: impl FnMut(&[f64]) -> f64, analytic: &[f64]) -> GradCheckReport {
        let mut x = x.to_vec();
        grad_check(&mut x, f, analytic, self.h, self.tol)
    }

    /// Records the worst of several sub-checks under one kernel name.
    fn record(&mut self, kernel: &'static str, reports: Vec<GradCheckReport>) {
        let coordinates = reports.iter().map(|r| r.coordinates).sum();
        let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        self.results.push(KernelCheck {
            kernel,
            coordinates,
            max_rel_error,
            passed: reports.iter().all(|r| r.passed),
        });
    }
}

fn set_all(p: &mut ModelParams<f64>, v: &[f64]) {
    let mut it = v.iter();
    for t in p.trainable_tensors_mut() {
        for slot in t {
            *slot = *it.next().expect("enough values");
        }
    }
}

/// Runs every kernel check and returns one line per kernel.
pub fn run_suite(sizes: CheckSizes, seed: u64, h: f64, tol: f64) -> Vec<KernelCheck> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        h,
        tol,
        results: Vec::new(),
    };
    let CheckSizes { frames: t, dim: d, heads, batch: b, proj_dim: p, classes: c } = sizes;

    // Linear layer: weight, bias and input through a random probe.
    {
        let layer = Linear::init(d, p, &mut s.rng);
        let x = s.mat(t, d, 1.0);
        let probe = s.mat(t, p, 1.0);
        let g = layer.backward(&x, &probe).expect("shapes");
        let loss = |l: &Linear<f64>, x: &Matrix<f64>| dot(l.forward(x).expect("shapes").data(), probe.data());
        let r1 = s.check(layer.weight.data(), |w| {
            let mut l = layer.clone();
            l.weight.data_mut().copy_from_slice(w);
            loss(&l, &x)
        }, g.weight.data());
        let r2 = s.check(&layer.bias, |bv| {
            let mut l = layer.clone();
            l.bias.copy_from_slice(bv);
            loss(&l, &x)
        }, &g.bias);
        let r3 = s.check(x.data(), |xv| loss(&layer, &Matrix::from_vec(t, d, xv.to_vec()).expect("sized")), g.input.data());
        s.record("linear", vec![r1, r2, r3]);
    }

    {
        let x = s.mat(t, c, 2.0);
        let probe = s.mat(t, c, 1.0);
        let y = softmax_rows(&x);
        let g = softmax_rows_backward(&y, &probe);
        let r = s.check(x.data(), |xv| {
            dot(softmax_rows(&Matrix::from_vec(t, c, xv.to_vec()).expect("sized")).data(), probe.data())
        }, g.data());
        s.record("softmax", vec![r]);
    }

    {
        let msa = MsaParams::init(d, heads, &mut s.rng).expect("valid heads");
        let x = s.mat(t, d, 1.0);
        let probe = s.mat(t, d, 1.0);
        let (_, cache) = msa.forward(&x).expect("shapes");
        let g = msa.backward(&x, &cache, &probe).expect("shapes");
        let loss = |m: &MsaParams<f64>, x: &Matrix<f64>| dot(m.forward(x).expect("shapes").0.data(), probe.data());
        let mut reports = Vec::new();
        let analytic = g.params.tensors();
        for (which, tensor) in msa.tensors().into_iter().enumerate() {
            reports.push(s.check(tensor, |w| {
                let mut m = msa.clone();
                m.tensors_mut()[which].copy_from_slice(w);
                loss(&m, &x)
            }, analytic[which]));
        }
        reports.push(s.check(x.data(), |xv| loss(&msa, &Matrix::from_vec(t, d, xv.to_vec()).expect("sized")), g.input.data()));
        s.record("msa", reports);
    }

    for (name, weighting) in [("flam_pool", AttentionWeighting::Linear), ("flam_pool_softmax", AttentionWeighting::Softmax)] {
        let mut pool = PoolParams::init(d, &mut s.rng);
        pool.fc_bias = 0.2;
        let x = s.mat(t, d, 1.0);
        let probe = s.vec(d, 1.0);
        let (_, cache) = frame_attention_pool(&x, &pool, weighting).expect("shapes");
        let g = frame_attention_pool_backward(&x, &pool, weighting, &cache, &probe).expect("shapes");
        let loss = |pp: &PoolParams<f64>, x: &Matrix<f64>| dot(&frame_attention_pool(x, pp, weighting).expect("shapes").0, &probe);
        let mut reports = vec![
            s.check(&pool.fc_weight, |w| {
                let mut q = pool.clone();
                q.fc_weight.copy_from_slice(w);
                loss(&q, &x)
            }, &g.params.fc_weight),
            s.check(x.data(), |xv| loss(&pool, &Matrix::from_vec(t, d, xv.to_vec()).expect("sized")), g.input.data()),
        ];
        // Under softmax weighting the bias cancels, so its gradient is
        // identically zero and only checked in the linear mode.
        if weighting == AttentionWeighting::Linear {
            reports.push(s.check(&[pool.fc_bias], |bv| {
                let mut q = pool.clone();
                q.fc_bias = bv[0];
                loss(&q, &x)
            }, &[g.params.fc_bias]));
        }
        s.record(name, reports);
    }

    {
        let x = s.mat(t, d, 1.0);
        let probe = s.vec(d, 1.0);
        let r1 = s.check(x.data(), |xv| dot(&max_pool(&Matrix::from_vec(t, d, xv.to_vec()).expect("sized")), &probe), max_pool_backward(&x, &probe).data());
        s.record("max_pool", vec![r1]);
        let r2 = s.check(x.data(), |xv| dot(&mean_pool(&Matrix::from_vec(t, d, xv.to_vec()).expect("sized")), &probe), mean_pool_backward(t, &probe).data());
        s.record("mean_pool", vec![r2]);
    }

    {
        let y = s.prob(c);
        let p_hat = s.prob(c);
        let z = s.vec(c, 2.0);
        let (_, gp) = kl_div(&y, &p_hat).expect("valid");
        let (_, gz) = kl_div_logits(&y, &z).expect("valid");
        let r1 = s.check(&p_hat, |v| kl_div(&y, v).expect("valid").0, &gp);
        let r2 = s.check(&z, |v| kl_div_logits(&y, v).expect("valid").0, &gz);
        s.record("kl", vec![r1, r2]);
        let mut reports = Vec::new();
        for gamma in [0.0, 0.5, 2.0] {
            let (_, gp) = focal(&y, &p_hat, gamma).expect("valid");
            let (_, gz) = focal_logits(&y, &z, gamma).expect("valid");
            reports.push(s.check(&p_hat, |v| focal(&y, v, gamma).expect("valid").0, &gp));
            reports.push(s.check(&z, |v| focal_logits(&y, v, gamma).expect("valid").0, &gz));
        }
        s.record("focal", reports);
    }

    {
        let f = s.mat(b, p, 1.0);
        let centers = Centers { centers: s.mat(c, p, 1.0) };
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let (_, g) = center_loss(&f, &labels, &centers).expect("valid");
        let r = s.check(f.data(), |v| center_loss(&Matrix::from_vec(b, p, v.to_vec()).expect("sized"), &labels, &centers).expect("valid").0, g.data());
        s.record("center", vec![r]);
    }

    {
        let x = s.mat(t, p, 1.0);
        let probe = s.mat(t, p, 1.0);
        let r = s.check(x.data(), |v| dot(context_broadcast(&Matrix::from_vec(t, p, v.to_vec()).expect("sized")).data(), probe.data()), context_broadcast_backward(&probe).data());
        s.record("context_broadcast", vec![r]);
    }

    {
        let frames: Vec<Matrix<f64>> = (0..b).map(|_| s.mat(t, p, 1.0)).collect();
        let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
        let mut reports = Vec::new();
        for normalize in [true, false] {
            let (_, g) = supcon(&frames, &labels, 0.5, normalize).expect("valid");
            let analytic: Vec<f64> = g.iter().flat_map(|m| m.data().to_vec()).collect();
            let flat: Vec<f64> = frames.iter().flat_map(|m| m.data().to_vec()).collect();
            reports.push(s.check(&flat, |v| {
                let fs: Vec<Matrix<f64>> = v.chunks(t * p).map(|ch| Matrix::from_vec(t, p, ch.to_vec()).expect("sized")).collect();
                supcon(&fs, &labels, 0.5, normalize).expect("valid").0
            }, &analytic));
        }
        s.record("supcon", reports);
    }

    {
        let cfg = ModelConfig {
            dim: d,
            heads,
            proj_dim: p,
            n_classes: c,
            aggregation: Aggregation::Flam,
            weighting: AttentionWeighting::Linear,
            shared_frame_projection: false,
        };
        let mut params = ModelParams::<f64>::init(cfg, &mut s.rng).expect("valid config");
        params.pool.fc_bias = 0.1;
        params.centers = Centers { centers: s.mat(c, p, 0.5) };
        let data: Vec<Example<f64>> = (0..b)
            .map(|i| {
                let x = s.mat(t, d, 0.5);
                let mut target = vec![0.0; c];
                target[i % c] = 0.7;
                target[(i + 1) % c] += 0.3;
                Example::new(format!("u{i}"), x, target)
            })
            .collect();
        let refs: Vec<&Example<f64>> = data.iter().collect();
        let loss_cfg = LossConfig { proj_dim: p, tau: 0.5, ..Default::default() };
        let workers = Workers::new(1).expect("inline workers");
        let res = batch_objective(&params, &refs, &loss_cfg, FrameOutput::Broadcast, &workers).expect("valid batch");
        let analytic: Vec<f64> = res.grads.trainable_tensors().concat();
        let flat: Vec<f64> = params.trainable_tensors().concat();
        let r = s.check(&flat, |v| {
            let mut q = params.clone();
            set_all(&mut q, v);
            batch_objective(&q, &refs, &loss_cfg, FrameOutput::Broadcast, &workers).expect("valid batch").report.total
        }, &analytic);
        s.record("composite", vec![r]);
    }

    s.results
}
