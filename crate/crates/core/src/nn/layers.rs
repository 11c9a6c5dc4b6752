use rand::Rng;

use super::mat::Mat;
use super::Params;

const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Option<Mat>,
}

impl Linear {
    /// Symmetric uniform init with bound `1/sqrt(fan_in)` on weights and bias.
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Mat::uniform(fan_in, fan_out, bound, rng);
        let bias = bias.then(|| Mat::uniform(1, fan_out, bound, rng));
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Mat::zeros(fan_in, fan_out),
            bias: bias.then(|| Mat::zeros(1, fan_out)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.matmul(&self.weight);
        if let Some(b) = &self.bias {
            y.add_row_broadcast(b);
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Linear) -> Mat {
        self.backward_params(x, dy, grad);
        dy.matmul_t(&self.weight)
    }

    pub fn backward_params(&self, x: &Mat, dy: &Mat, grad: &mut Linear) {
        x.t_matmul_acc(dy, &mut grad.weight);
        if let Some(gb) = grad.bias.as_mut() {
            dy.col_sum_acc(gb);
        }
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Mat::filled(1, dim, 1.0),
            beta: Mat::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.cols();
        let mut xhat = Mat::zeros(x.rows(), d);
        let mut y = Mat::zeros(x.rows(), d);
        let mut rstd = Vec::with_capacity(x.rows());
        let (g, b) = (self.gamma.data(), self.beta.data());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            let yr = y.row_mut(i);
            for j in 0..d {
                yr[j] = xhat.get(i, j) * g[j] + b[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        let d = dy.cols();
        let nd = d as f64;
        let mut dx = Mat::zeros(dy.rows(), d);
        let g = self.gamma.data();
        let mut dxhat = vec![0.0; d];
        for i in 0..dy.rows() {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            {
                let gg = grad.gamma.data_mut();
                for j in 0..d {
                    gg[j] += dyr[j] * xh[j];
                }
            }
            {
                let gb = grad.beta.data_mut();
                for j in 0..d {
                    gb[j] += dyr[j];
                }
            }
            let mut sum = 0.0;
            let mut sum_xh = 0.0;
            for j in 0..d {
                dxhat[j] = dyr[j] * g[j];
                sum += dxhat[j];
                sum_xh += dxhat[j] * xh[j];
            }
            let r = cache.rstd[i] / nd;
            let out = dx.row_mut(i);
            for j in 0..d {
                out[j] = r * (nd * dxhat[j] - sum - xh[j] * sum_xh);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GeLU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn gelu_mat(x: &Mat) -> Mat {
    x.map(gelu)
}

/// `dy ⊙ gelu'(x)`.
pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut out = dy.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o *= gelu_grad(v);
    }
    out
}

/// Three linear layers with GeLU between them.
#[derive(Debug, Clone)]
pub struct Mlp3 {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

#[derive(Debug, Clone)]
pub struct Mlp3Cache {
    x: Mat,
    z1: Mat,
    a1: Mat,
    z2: Mat,
    a2: Mat,
}

impl Mlp3 {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(input, hidden, true, rng),
            l2: Linear::new(hidden, hidden, true, rng),
            l3: Linear::new(hidden, output, true, rng),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, Mlp3Cache) {
        let z1 = self.l1.forward(x);
        let a1 = gelu_mat(&z1);
        let z2 = self.l2.forward(&a1);
        let a2 = gelu_mat(&z2);
        let y = self.l3.forward(&a2);
        (
            y,
            Mlp3Cache {
                x: x.clone(),
                z1,
                a1,
                z2,
                a2,
            },
        )
    }

    /// Parameter gradients only; the head's input carries no gradient.
    pub fn backward(&self, cache: &Mlp3Cache, dy: &Mat, grad: &mut Mlp3) {
        let da2 = self.l3.backward(&cache.a2, dy, &mut grad.l3);
        let dz2 = gelu_backward(&cache.z2, &da2);
        let da1 = self.l2.backward(&cache.a1, &dz2, &mut grad.l2);
        let dz1 = gelu_backward(&cache.z1, &da1);
        self.l1.backward_params(&cache.x, &dz1, &mut grad.l1);
    }
}

impl Params for Mlp3 {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        self.l1.visit(&format!("{prefix}.0"), f);
        self.l2.visit(&format!("{prefix}.1"), f);
        self.l3.visit(&format!("{prefix}.2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Mat)) {
        self.l1.visit_mut(&format!("{prefix}.0"), f);
        self.l2.visit_mut(&format!("{prefix}.1"), f);
        self.l3.visit_mut(&format!("{prefix}.2"), f);
    }
}
