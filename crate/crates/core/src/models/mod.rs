//! Small fully-connected networks with hand-written forward and reverse passes.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix of
//! layer `l` (row-major, `out × in`) followed by its bias. Hidden layers apply
//! the network activation; the output layer is affine and produces logits.

mod attack;
mod curvature;
mod dual;
mod train;

pub use attack::{adversarial_loss, pgd_attack, pgd_attack_batch, PgdConfig};
pub use curvature::{dominant_hessian_eigenvalue, lambda_max_estimate, HessianEigen};
pub use dual::{Dual, Real};
pub use train::{sgd_train, TrainConfig, Trajectory};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{KahanSum, Matrix};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Softmax cross-entropy on integer labels (log-sum-exp stabilized).
    CrossEntropy,
    /// Mean over outputs of the squared error against one-hot targets.
    Mse,
}

/// Feedforward network `n → w₁ → … → w_L → C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    seed: u64,
    params: Vec<f64>,
}

/// Loss and exact gradients of the mean batch loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub param_grads: Vec<f64>,
    pub input_grads: Matrix,
}

fn param_count_of(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// He-scaled Gaussian weights (`N(0, 2/fan_in)`), zero biases.
    pub fn new(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut rng = seed::rng(seed);
        let mut params = Vec::with_capacity(param_count_of(widths));
        for w in widths.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid normal");
            params.extend((0..w[0] * w[1]).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            activation,
            seed,
            params,
        })
    }

    /// Sets the first-layer biases to `−W₁c`, so every first-layer unit
    /// starts with a zero pre-activation at `c`.
    pub fn centered_at(mut self, c: &[f64]) -> Result<Self> {
        let (n_in, n_out) = (self.widths[0], self.widths[1]);
        if c.len() != n_in {
            return Err(Error::shape("center dimension differs from the model input"));
        }
        for o in 0..n_out {
            let b = -crate::matrix::dot(&self.params[o * n_in..(o + 1) * n_in], c);
            self.params[n_in * n_out + o] = b;
        }
        Ok(self)
    }

    pub fn from_params(widths: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        Self::check_widths(widths)?;
        if params.len() != param_count_of(widths) {
            return Err(Error::shape(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                param_count_of(widths)
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            activation,
            seed: 0,
            params,
        })
    }

    /// Single affine layer `x ↦ x` (identity weights, zero bias).
    pub fn identity(n: usize) -> Self {
        let mut params = vec![0.0; n * n + n];
        for i in 0..n {
            params[i * n + i] = 1.0;
        }
        Mlp {
            widths: vec![n, n],
            activation: Activation::Relu,
            seed: 0,
            params,
        }
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::shape(format!("invalid layer widths {widths:?}")));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of hidden layers `L`.
    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Mlp> {
        let mut m = Mlp::from_params(&self.widths, self.activation, params)?;
        m.seed = self.seed;
        Ok(m)
    }

    /// Same architecture (widths and activation).
    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.widths == other.widths && self.activation == other.activation
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input has {} coordinates, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.output_dim() {
            return Err(Error::Label(format!(
                "label {y} out of range for {} outputs",
                self.output_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let cache = forward_pass(&self.widths, self.activation, &self.params, x);
        Ok(cache.post.last().unwrap().clone())
    }

    /// Logits and the per-layer feature list (`L` hidden post-activations
    /// followed by the logits).
    pub fn forward_with_features(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_input(x)?;
        let mut cache = forward_pass(&self.widths, self.activation, &self.params, x);
        cache.post.remove(0);
        let logits = cache.post.last().unwrap().clone();
        Ok((logits, cache.post))
    }

    /// Output-layer features (logits) for every row.
    pub fn output_features(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for i in 0..x.rows() {
            let f = self.forward(x.row(i))?;
            out.row_mut(i).copy_from_slice(&f);
        }
        Ok(out)
    }

    /// Last hidden post-activation (the logits for a network without hidden
    /// layers).
    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, mut feats) = self.forward_with_features(x)?;
        if feats.len() >= 2 {
            feats.truncate(feats.len() - 1);
        }
        Ok(feats.pop().unwrap())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let z = self.forward(x)?;
        Ok(argmax(&z))
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut hits = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            if self.predict(x.row(i))? == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / x.rows() as f64)
    }

    /// Per-sample loss.
    pub fn sample_loss(&self, x: &[f64], y: usize, loss: Loss) -> Result<f64> {
        self.check_input(x)?;
        self.check_label(y)?;
        let cache = forward_pass(&self.widths, self.activation, &self.params, x);
        Ok(loss_and_output_grad(cache.post.last().unwrap(), y, loss).0)
    }

    /// Mean loss over a batch (compensated sum).
    pub fn loss(&self, x: &Matrix, labels: &[usize], loss: Loss) -> Result<f64> {
        check_batch(x, labels)?;
        let mut acc = KahanSum::default();
        for (i, &y) in labels.iter().enumerate() {
            acc.add(self.sample_loss(x.row(i), y, loss)?);
        }
        Ok(acc.total() / x.rows() as f64)
    }

    /// Exact reverse-mode gradients of the mean batch loss with respect to
    /// every parameter and every input coordinate.
    pub fn backward(&self, x: &Matrix, labels: &[usize], loss: Loss) -> Result<Gradients> {
        check_batch(x, labels)?;
        if x.cols() != self.input_dim() {
            return Err(Error::shape("batch width does not match network input"));
        }
        let n = x.rows() as f64;
        let mut grads = vec![0.0; self.param_count()];
        let mut input_grads = Matrix::zeros(x.rows(), x.cols());
        let mut total = KahanSum::default();
        for (i, &y) in labels.iter().enumerate() {
            self.check_label(y)?;
            let cache = forward_pass(&self.widths, self.activation, &self.params, x.row(i));
            let (l, mut dout) = loss_and_output_grad(cache.post.last().unwrap(), y, loss);
            total.add(l);
            for g in &mut dout {
                *g /= n;
            }
            let gx = backprop(
                &self.widths,
                self.activation,
                &self.params,
                &cache,
                dout,
                None,
                Some(&mut grads),
            );
            input_grads.row_mut(i).copy_from_slice(&gx);
        }
        Ok(Gradients {
            loss: total.total() / n,
            param_grads: grads,
            input_grads,
        })
    }

    /// Loss and parameter gradient of a single sample.
    pub fn sample_param_grad(&self, x: &[f64], y: usize, loss: Loss) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        self.check_label(y)?;
        let cache = forward_pass(&self.widths, self.activation, &self.params, x);
        let (l, dout) = loss_and_output_grad(cache.post.last().unwrap(), y, loss);
        let mut grads = vec![0.0; self.param_count()];
        backprop(
            &self.widths,
            self.activation,
            &self.params,
            &cache,
            dout,
            None,
            Some(&mut grads),
        );
        Ok((l, grads))
    }

    /// Mean parameter gradient over the rows of `x`.
    pub fn mean_param_grad(&self, x: &Matrix, labels: &[usize], loss: Loss) -> Result<Vec<f64>> {
        Ok(self.backward(x, labels, loss)?.param_grads)
    }

    /// Parameter gradient of a single output coordinate `f_c(x)`.
    pub fn output_param_grad(&self, x: &[f64], c: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let cache = forward_pass(&self.widths, self.activation, &self.params, x);
        let mut dout = vec![0.0; self.output_dim()];
        dout[c] = 1.0;
        let mut grads = vec![0.0; self.param_count()];
        backprop(
            &self.widths,
            self.activation,
            &self.params,
            &cache,
            dout,
            None,
            Some(&mut grads),
        );
        Ok(grads)
    }

    /// Vector–Jacobian product from per-layer feature cotangents back to the
    /// input. `upstream[k]` pairs with entry `k` of the feature list returned
    /// by [`Mlp::forward_with_features`]; empty entries count as zero.
    pub fn feature_vjp(&self, x: &[f64], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let layers = self.widths.len() - 1;
        if upstream.len() != layers {
            return Err(Error::shape(format!(
                "expected {layers} feature cotangents, got {}",
                upstream.len()
            )));
        }
        for (k, u) in upstream.iter().enumerate() {
            if !u.is_empty() && u.len() != self.widths[k + 1] {
                return Err(Error::shape(format!("cotangent {k} has wrong width")));
            }
        }
        let cache = forward_pass(&self.widths, self.activation, &self.params, x);
        let last = upstream.last().unwrap();
        let dout = if last.is_empty() {
            vec![0.0; self.output_dim()]
        } else {
            last.clone()
        };
        Ok(backprop(
            &self.widths,
            self.activation,
            &self.params,
            &cache,
            dout,
            Some(upstream),
            None,
        ))
    }

    /// `∇ₓ ⟨direction, ∇_θ ℓ(θ; x, y)⟩`, computed exactly by running the
    /// reverse pass with dual-number parameters `θ + ε·direction`.
    pub fn mixed_input_grad(&self, x: &[f64], y: usize, loss: Loss, direction: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_label(y)?;
        if direction.len() != self.param_count() {
            return Err(Error::shape("direction length differs from parameter count"));
        }
        let params: Vec<Dual> = self
            .params
            .iter()
            .zip(direction)
            .map(|(&p, &d)| Dual::new(p, d))
            .collect();
        let xd: Vec<Dual> = x.iter().map(|&v| Dual::cst(v)).collect();
        let cache = forward_pass(&self.widths, self.activation, &params, &xd);
        let (_, dout) = loss_and_output_grad(cache.post.last().unwrap(), y, loss);
        let gx = backprop(&self.widths, self.activation, &params, &cache, dout, None, None);
        Ok(gx.into_iter().map(|g| g.d).collect())
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn check_batch(x: &Matrix, labels: &[usize]) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if x.rows() != labels.len() {
        return Err(Error::shape("batch rows and labels differ in length"));
    }
    Ok(())
}

pub(crate) struct Cache<R> {
    /// Pre-activations per layer.
    pub pre: Vec<Vec<R>>,
    /// `post[0]` is the input; `post[l+1]` the output of layer `l`.
    pub post: Vec<Vec<R>>,
}

#[inline]
fn act<R: Real>(a: Activation, z: R) -> R {
    match a {
        Activation::Relu => {
            if z.val() > 0.0 {
                z
            } else {
                R::cst(0.0)
            }
        }
        Activation::Tanh => z.tanh(),
    }
}

#[inline]
fn act_grad<R: Real>(a: Activation, z: R, out: R) -> R {
    match a {
        Activation::Relu => R::cst(if z.val() > 0.0 { 1.0 } else { 0.0 }),
        Activation::Tanh => R::cst(1.0) - out * out,
    }
}

pub(crate) fn forward_pass<R: Real, X: Copy + Into<R>>(
    widths: &[usize],
    activation: Activation,
    params: &[R],
    x: &[X],
) -> Cache<R> {
    let layers = widths.len() - 1;
    let mut pre = Vec::with_capacity(layers);
    let mut post: Vec<Vec<R>> = Vec::with_capacity(layers + 1);
    post.push(x.iter().map(|&v| v.into()).collect());
    let mut off = 0;
    for l in 0..layers {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let input = &post[l];
        let mut z = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = b[o];
            for (wi, &xi) in row.iter().zip(input.iter()) {
                acc += *wi * xi;
            }
            z.push(acc);
        }
        let a = if l + 1 < layers {
            z.iter().map(|&v| act(activation, v)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a);
    }
    Cache { pre, post }
}

impl From<f64> for Dual {
    fn from(v: f64) -> Self {
        Dual::cst(v)
    }
}

/// Loss value and gradient with respect to the logits.
pub(crate) fn loss_and_output_grad<R: Real>(z: &[R], y: usize, loss: Loss) -> (R, Vec<R>) {
    match loss {
        Loss::CrossEntropy => {
            let shift = z.iter().map(|v| v.val()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<R> = z.iter().map(|&v| (v - R::cst(shift)).exp()).collect();
            let mut sum = R::cst(0.0);
            for &e in &exps {
                sum += e;
            }
            let lse = sum.ln() + R::cst(shift);
            let l = lse - z[y];
            let mut g: Vec<R> = exps.iter().map(|&e| e / sum).collect();
            g[y] = g[y] - R::cst(1.0);
            (l, g)
        }
        Loss::Mse => {
            let c = z.len() as f64;
            let mut l = R::cst(0.0);
            let mut g = Vec::with_capacity(z.len());
            for (k, &v) in z.iter().enumerate() {
                let t = if k == y { 1.0 } else { 0.0 };
                let r = v - R::cst(t);
                l += r * r;
                g.push(R::cst(2.0 / c) * r);
            }
            (l / R::cst(c), g)
        }
    }
}

/// Reverse pass. Accumulates parameter gradients into `param_grads` when
/// given, adds optional per-layer feature cotangents, and returns the input
/// gradient.
pub(crate) fn backprop<R: Real>(
    widths: &[usize],
    activation: Activation,
    params: &[R],
    cache: &Cache<R>,
    dout: Vec<R>,
    upstream: Option<&[Vec<f64>]>,
    mut param_grads: Option<&mut [R]>,
) -> Vec<R> {
    let layers = widths.len() - 1;
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for l in 0..layers {
        offsets.push(off);
        off += widths[l] * widths[l + 1] + widths[l + 1];
    }
    // gradient w.r.t. post[layers] (the logits)
    let mut gpost = dout;
    for l in (0..layers).rev() {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let gpre: Vec<R> = if l + 1 < layers {
            gpost
                .iter()
                .zip(cache.pre[l].iter().zip(&cache.post[l + 1]))
                .map(|(&g, (&z, &a))| g * act_grad(activation, z, a))
                .collect()
        } else {
            gpost
        };
        let w_off = offsets[l];
        let b_off = w_off + n_in * n_out;
        let input = &cache.post[l];
        if let Some(pg) = param_grads.as_deref_mut() {
            for o in 0..n_out {
                let g = gpre[o];
                let row = &mut pg[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (r, &xi) in row.iter_mut().zip(input.iter()) {
                    *r += g * xi;
                }
                pg[b_off + o] += g;
            }
        }
        let w = &params[w_off..w_off + n_in * n_out];
        let mut gin = vec![R::cst(0.0); n_in];
        for o in 0..n_out {
            let g = gpre[o];
            let row = &w[o * n_in..(o + 1) * n_in];
            for (gi, &wi) in gin.iter_mut().zip(row) {
                *gi += wi * g;
            }
        }
        if l >= 1 {
            if let Some(up) = upstream {
                let u = &up[l - 1];
                if !u.is_empty() {
                    for (gi, &ui) in gin.iter_mut().zip(u) {
                        *gi += R::cst(ui);
                    }
                }
            }
        }
        gpost = gin;
    }
    gpost
}

/// Flat parameter difference norm `‖θ₁ − θ₂‖₂`; architectures must match.
pub fn parameter_distance(a: &Mlp, b: &Mlp) -> Result<f64> {
    if !a.same_architecture(b) {
        return Err(Error::Architecture(format!(
            "{:?} vs {:?}",
            a.widths(),
            b.widths()
        )));
    }
    Ok(crate::matrix::dist(a.params(), b.params()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::dot;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let widths = [3, 4, 2];
        let mut p = vec![0.0; param_count_of(&widths)];
        let n = p.len();
        p[n - 2] = 0.7;
        p[n - 1] = -0.2;
        let m = Mlp::from_params(&widths, Activation::Relu, p).unwrap();
        assert_eq!(m.forward(&[0.3, 0.1, 0.9]).unwrap(), vec![0.7, -0.2]);
    }

    #[test]
    fn relu_negative_preactivations_zero_features() {
        // hidden weights all -1, bias -1, input non-negative
        let widths = [2, 3, 1];
        let mut p = vec![-1.0; 2 * 3 + 3];
        p.extend([1.0, 1.0, 1.0, 0.0]);
        let m = Mlp::from_params(&widths, Activation::Relu, p).unwrap();
        let (_, feats) = m.forward_with_features(&[0.5, 0.25]).unwrap();
        assert_eq!(feats[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(feats.len(), 2);
    }

    #[test]
    fn hand_computed_tanh_network() {
        // 1-2-1: h = tanh(w1*x + b1), out = v·h + c
        let p = vec![0.5, -1.0, 0.1, 0.2, 2.0, 3.0, -0.5];
        let m = Mlp::from_params(&[1, 2, 1], Activation::Tanh, p).unwrap();
        let x = 0.8;
        let h1 = (0.5f64 * x + 0.1).tanh();
        let h2 = (-1.0f64 * x + 0.2).tanh();
        let expected = 2.0 * h1 + 3.0 * h2 - 0.5;
        let got = m.forward(&[x]).unwrap()[0];
        assert!((got - expected).abs() <= 1e-12);
    }

    fn fd_param_check(m: &Mlp, x: &Matrix, labels: &[usize], loss: Loss) -> f64 {
        let g = m.backward(x, labels, loss).unwrap();
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        for k in 0..m.param_count() {
            let mut p = m.params().to_vec();
            p[k] += h;
            let up = m.with_params(p.clone()).unwrap().loss(x, labels, loss).unwrap();
            p[k] -= 2.0 * h;
            let down = m.with_params(p).unwrap().loss(x, labels, loss).unwrap();
            let fd = (up - down) / (2.0 * h);
            if fd.abs() > 1e-7 || g.param_grads[k].abs() > 1e-7 {
                worst = worst.max(rel_err(g.param_grads[k], fd));
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_on_2_4_2() {
        let m = Mlp::new(&[2, 4, 2], Activation::Tanh, 4).unwrap();
        let x = Matrix::from_rows(&[[0.2, 0.7], [0.9, 0.1], [0.4, 0.4]]).unwrap();
        let labels = [0, 1, 1];
        for loss in [Loss::CrossEntropy, Loss::Mse] {
            assert!(fd_param_check(&m, &x, &labels, loss) <= 1e-5);
        }
        let g = m.backward(&x, &labels, Loss::CrossEntropy).unwrap();
        let h = 1e-5;
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut xp = x.clone();
                xp.set(i, j, x.get(i, j) + h);
                let up = m.loss(&xp, &labels, Loss::CrossEntropy).unwrap();
                xp.set(i, j, x.get(i, j) - h);
                let down = m.loss(&xp, &labels, Loss::CrossEntropy).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(g.input_grads.get(i, j), fd) <= 1e-5);
            }
        }
    }

    #[test]
    fn duplicated_rows_leave_mean_gradient_unchanged() {
        let m = Mlp::new(&[2, 3, 2], Activation::Relu, 1).unwrap();
        let one = Matrix::from_rows(&[[0.3, 0.6]]).unwrap();
        let two = Matrix::from_rows(&[[0.3, 0.6], [0.3, 0.6]]).unwrap();
        let a = m.backward(&one, &[1], Loss::CrossEntropy).unwrap();
        let b = m.backward(&two, &[1, 1], Loss::CrossEntropy).unwrap();
        for (x, y) in a.param_grads.iter().zip(&b.param_grads) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn mixed_gradient_matches_finite_difference_of_input_grad() {
        let m = Mlp::new(&[3, 5, 4, 2], Activation::Tanh, 8).unwrap();
        let x = [0.1, 0.5, 0.9];
        let v: Vec<f64> = (0..m.param_count()).map(|k| ((k * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let got = m.mixed_input_grad(&x, 1, Loss::CrossEntropy, &v).unwrap();
        // finite difference in x of <v, grad_theta>
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x;
            xp[j] += h;
            let up = dot(&v, &m.sample_param_grad(&xp, 1, Loss::CrossEntropy).unwrap().1);
            xp[j] -= 2.0 * h;
            let down = dot(&v, &m.sample_param_grad(&xp, 1, Loss::CrossEntropy).unwrap().1);
            assert!(rel_err(got[j], (up - down) / (2.0 * h)) <= 1e-5);
        }
    }

    #[test]
    fn feature_vjp_matches_directional_derivative() {
        let m = Mlp::new(&[2, 4, 3], Activation::Tanh, 3).unwrap();
        let x = [0.35, 0.8];
        let up = vec![vec![0.3, -0.1, 0.2, 0.5], vec![1.0, -2.0, 0.5]];
        let g = m.feature_vjp(&x, &up).unwrap();
        let phi = |x: &[f64]| -> f64 {
            let (_, f) = m.forward_with_features(x).unwrap();
            dot(&f[0], &up[0]) + dot(&f[1], &up[1])
        };
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            xp[j] += h;
            let a = phi(&xp);
            xp[j] -= 2.0 * h;
            let b = phi(&xp);
            assert!(rel_err(g[j], (a - b) / (2.0 * h)) <= 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let m = Mlp::new(&[2, 2], Activation::Relu, 0).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(Mlp::new(&[2], Activation::Relu, 0).is_err());
    }
}
