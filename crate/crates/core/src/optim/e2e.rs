//! End-to-end codebook fine-tuning of a small feed-forward student against a
//! full-precision teacher through a temperature-softened KL objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hessian::{
    accumulate_hessian, damped_inverse_factor, hessian_aware_init, residual_init, HessianConfig,
};
use crate::quant::{compute_quant_params, QuantParams, RoundingSpec};
use crate::reparam::{init_codebook, ClusterSpace, Codebook};
use crate::tensor::{matmul_f64, Tensor2D};

use super::adam::{adam_step, AdamState};
use super::layer::{centroids_f64, codebook_from_f64, SoftQuantLayer};
use super::schedule::{anneal_beta, FinetuneConfig};

/// Frozen grid, integer base and trainable codebook of a quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub params: QuantParams,
    pub base: Tensor2D,
    pub codebook: Codebook,
}

impl LayerQuant {
    fn soft(&self, spec: &RoundingSpec) -> Result<SoftQuantLayer> {
        SoftQuantLayer::with_base(&self.base, &self.params, &self.codebook, spec)
    }
}

/// Linear map `x -> x W^T` with an optional codebook-quantized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor2D,
    pub quant: Option<LayerQuant>,
}

impl Layer {
    pub fn dense(weight: Tensor2D) -> Self {
        Self {
            weight,
            quant: None,
        }
    }

    /// Quantized layer rounding relative to `floor(W/s)`.
    pub fn quantized(weight: Tensor2D, params: QuantParams, codebook: Codebook) -> Result<Self> {
        if params.rows() != weight.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight rows vs {} quantization rows",
                weight.rows(),
                params.rows()
            )));
        }
        let base = Tensor2D::from_fn(weight.rows(), weight.cols(), |i, j| {
            (weight.get(i, j) / params.scale[i]).floor()
        })?;
        Self::quantized_with_base(weight, params, base, codebook)
    }

    pub fn quantized_with_base(
        weight: Tensor2D,
        params: QuantParams,
        base: Tensor2D,
        codebook: Codebook,
    ) -> Result<Self> {
        if codebook.shape() != weight.shape()
            || params.rows() != weight.rows()
            || base.shape() != weight.shape()
        {
            return Err(Error::ShapeMismatch(format!(
                "layer weight {}x{} vs codebook {}x{}, base {}x{} and {} quantization rows",
                weight.rows(),
                weight.cols(),
                codebook.shape().0,
                codebook.shape().1,
                base.rows(),
                base.cols(),
                params.rows()
            )));
        }
        Ok(Self {
            weight,
            quant: Some(LayerQuant {
                params,
                base,
                codebook,
            }),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Stack of linear layers with ReLU between them and logits at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    layers: Vec<Layer>,
}

impl TinyNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ArchitectureMismatch("network has no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ArchitectureMismatch(format!(
                    "layer {i} emits {} features, layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        if dims.len() < 2 {
            return Err(Error::ArchitectureMismatch(
                "need at least input and output widths".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = 1.0 / (w[0] as f32).sqrt();
                Tensor2D::from_fn(w[1], w[0], |_, _| {
                    std * rng.sample::<f32, _>(StandardNormal)
                })
                .map(Layer::dense)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn codebooks(&self) -> Vec<&Codebook> {
        self.layers
            .iter()
            .filter_map(|l| l.quant.as_ref().map(|q| &q.codebook))
            .collect()
    }

    /// Replaces the codebooks of the quantized layers in order.
    pub fn with_codebooks(&self, codebooks: &[Codebook]) -> Result<Self> {
        let mut out = self.clone();
        let mut it = codebooks.iter();
        for layer in out.layers.iter_mut() {
            if let Some(LayerQuant { codebook: cb, .. }) = layer.quant.as_mut() {
                let next = it
                    .next()
                    .ok_or_else(|| Error::ArchitectureMismatch("too few codebooks".into()))?;
                if next.shape() != cb.shape() || next.indices() != cb.indices() {
                    return Err(Error::ArchitectureMismatch(
                        "codebook does not match its layer".into(),
                    ));
                }
                *cb = next.clone();
            }
        }
        if it.next().is_some() {
            return Err(Error::ArchitectureMismatch("too many codebooks".into()));
        }
        Ok(out)
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Logits using the full-precision weights of every layer.
    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.check_input(x)?;
        let weights: Vec<Vec<f64>> = self.layers.iter().map(|l| l.weight.to_f64()).collect();
        let acts = forward_layers(&self.layers, &weights, x);
        logits_tensor(acts, x.rows(), self.out_dim())
    }

    /// Logits with every quantized layer hard-rounded.
    pub fn hard_forward(&self, x: &Tensor2D, spec: &RoundingSpec) -> Result<Tensor2D> {
        self.check_input(x)?;
        let weights = self
            .layers
            .iter()
            .map(|l| match &l.quant {
                Some(q) => Ok(q.soft(spec)?.hard_weights(&centroids_f64(&q.codebook))),
                None => Ok(l.weight.to_f64()),
            })
            .collect::<Result<Vec<_>>>()?;
        let acts = forward_layers(&self.layers, &weights, x);
        logits_tensor(acts, x.rows(), self.out_dim())
    }
}

fn logits_tensor(mut acts: Vec<Vec<f64>>, rows: usize, cols: usize) -> Result<Tensor2D> {
    let top = acts.pop().expect("at least one layer");
    Tensor2D::new(rows, cols, top.into_iter().map(|v| v as f32).collect())
}

/// Pre-activations `z_l` of every layer, with `z_0 = x W_0^T` and
/// `z_l = relu(z_{l-1}) W_l^T`.
fn forward_layers(layers: &[Layer], weights: &[Vec<f64>], x: &Tensor2D) -> Vec<Vec<f64>> {
    let b = x.rows();
    let mut out = Vec::with_capacity(layers.len());
    let mut input = x.to_f64();
    for (l, layer) in layers.iter().enumerate() {
        let (o, i) = (layer.out_dim(), layer.in_dim());
        if l > 0 {
            input = out
                .last()
                .map(|z: &Vec<f64>| z.iter().map(|v| v.max(0.0)).collect())
                .unwrap();
        }
        let wt = transpose(&weights[l], o, i);
        out.push(matmul_f64(&input, &wt, b, i, o));
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn log_softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|v| v - lse).collect()
}

/// Row-averaged KL plus its gradient with respect to the student logits.
fn kl_with_grad(
    student: &[f64],
    teacher: &[f64],
    rows: usize,
    cols: usize,
    temperature: f64,
) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = vec![0.0; rows * cols];
    for r in 0..rows {
        let ls = log_softmax(&student[r * cols..(r + 1) * cols], temperature);
        let lt = log_softmax(&teacher[r * cols..(r + 1) * cols], temperature);
        let p: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let ell: Vec<f64> = ls.iter().zip(&lt).map(|(a, b)| a - b).collect();
        let kl: f64 = p.iter().zip(&ell).map(|(a, b)| a * b).sum();
        total += kl;
        for j in 0..cols {
            grad[r * cols + j] = p[j] * (ell[j] - kl) / (temperature * rows as f64);
        }
    }
    (total / rows as f64, grad)
}

/// `KL(softmax(student/T) || softmax(teacher/T))` averaged over rows.
pub fn kl_loss(
    student_logits: &Tensor2D,
    teacher_logits: &Tensor2D,
    temperature: f32,
) -> Result<f32> {
    student_logits.ensure_same_shape(teacher_logits, "kl_loss")?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let (kl, _) = kl_with_grad(
        &student_logits.to_f64(),
        &teacher_logits.to_f64(),
        student_logits.rows(),
        student_logits.cols(),
        temperature as f64,
    );
    Ok(kl as f32)
}

/// Mean hard-rounded KL of `student` against `teacher` over `data`.
pub fn hard_kl(
    teacher: &TinyNet,
    student: &TinyNet,
    data: &[Tensor2D],
    spec: &RoundingSpec,
    temperature: f32,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut sum = 0.0;
    for x in data {
        let s = student.hard_forward(x, spec)?;
        let t = teacher.forward(x)?;
        sum += kl_loss(&s, &t, temperature)? as f64;
    }
    Ok(sum / data.len() as f64)
}

/// How a student is derived from a teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub bits: u32,
    pub k: usize,
    pub d: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    /// Hessian-aware initialization from teacher activations; plain residual when `None`.
    pub hessian: Option<HessianConfig>,
    pub space: ClusterSpace,
    /// Caps `k` at `blocks / min_blocks_per_centroid` for each layer.
    pub min_blocks_per_centroid: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            bits: 3,
            k: 4096,
            d: 8,
            kmeans_iters: 100,
            seed: 0,
            hessian: Some(HessianConfig::default()),
            space: ClusterSpace::Latent,
            min_blocks_per_centroid: 1,
        }
    }
}

/// Quantizes every teacher layer with its own codebook. With a Hessian
/// configuration, rounding is relative to the initialization's integer base.
pub fn build_student(
    teacher: &TinyNet,
    data: &[Tensor2D],
    spec: &RoundingSpec,
    cfg: &StudentConfig,
) -> Result<TinyNet> {
    let mut inputs: Vec<f64> = Vec::new();
    let mut rows = 0;
    if cfg.hessian.is_some() {
        if data.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        for x in data {
            teacher.check_input(x)?;
            inputs.extend(x.to_f64());
            rows += x.rows();
        }
    }
    let mut layers = Vec::with_capacity(teacher.layers.len());
    for (l, layer) in teacher.layers.iter().enumerate() {
        let w = &layer.weight;
        let p = compute_quant_params(w, cfg.bits)?;
        let (base, h_tilde) = match &cfg.hessian {
            Some(hcfg) => {
                let i = layer.in_dim();
                // Calibration columns are the samples reaching this layer.
                let x = Tensor2D::new(
                    i,
                    rows,
                    transpose(&inputs, rows, i)
                        .into_iter()
                        .map(|v| v as f32)
                        .collect(),
                )?;
                let factor = damped_inverse_factor(&accumulate_hessian(&x)?, hcfg)?;
                let init = hessian_aware_init(w, &p, &factor, hcfg)?;
                (init.base, init.h_tilde)
            }
            None => {
                let base = Tensor2D::from_fn(w.rows(), w.cols(), |i, j| {
                    (w.get(i, j) / p.scale[i]).floor()
                })?;
                (base, residual_init(w, &p)?)
            }
        };
        let blocks = w.len() / cfg.d.max(1);
        let k = cfg
            .k
            .min(blocks / cfg.min_blocks_per_centroid.max(1))
            .max(1);
        let fit = init_codebook(
            &h_tilde,
            spec,
            cfg.d,
            k,
            cfg.kmeans_iters,
            cfg.seed.wrapping_add(l as u64),
            cfg.space,
        )?;
        layers.push(Layer::quantized_with_base(
            w.clone(),
            p,
            base,
            fit.codebook,
        )?);
        if cfg.hessian.is_some() && l + 1 < teacher.layers.len() {
            let wt = transpose(&w.to_f64(), layer.out_dim(), layer.in_dim());
            inputs = matmul_f64(&inputs, &wt, rows, layer.in_dim(), layer.out_dim())
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
        }
    }
    TinyNet::new(layers)
}

/// Per-step loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct E2eLoss {
    pub kd: f64,
    pub regularizer: f64,
    pub total: f64,
}

/// Frozen teacher targets and student structure for analytic backprop.
#[derive(Debug, Clone)]
pub struct E2eProblem {
    layers: Vec<Layer>,
    soft: Vec<Option<SoftQuantLayer>>,
    samples: Vec<Tensor2D>,
    targets: Vec<Vec<f64>>,
    out_dim: usize,
    temperature: f64,
}

impl E2eProblem {
    pub fn new(
        teacher: &TinyNet,
        student: &TinyNet,
        data: &[Tensor2D],
        spec: &RoundingSpec,
        temperature: f32,
    ) -> Result<Self> {
        if teacher.layers.len() != student.layers.len() {
            return Err(Error::ArchitectureMismatch(format!(
                "teacher has {} layers, student {}",
                teacher.layers.len(),
                student.layers.len()
            )));
        }
        for (i, (t, s)) in teacher.layers.iter().zip(&student.layers).enumerate() {
            if t.weight.shape() != s.weight.shape() {
                return Err(Error::ArchitectureMismatch(format!(
                    "layer {i}: teacher {}x{}, student {}x{}",
                    t.weight.rows(),
                    t.weight.cols(),
                    s.weight.rows(),
                    s.weight.cols()
                )));
            }
        }
        if student.codebooks().is_empty() {
            return Err(Error::ArchitectureMismatch(
                "student has no codebook layers".into(),
            ));
        }
        if data.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature {temperature} must be positive"
            )));
        }
        let soft = student
            .layers
            .iter()
            .map(|l| l.quant.as_ref().map(|q| q.soft(spec)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let targets = data
            .iter()
            .map(|x| teacher.forward(x).map(|t| t.to_f64()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers: student.layers.clone(),
            soft,
            samples: data.to_vec(),
            targets,
            out_dim: student.out_dim(),
            temperature: temperature as f64,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// Initial centroid tables of the quantized layers, in layer order.
    pub fn initial_params(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .filter_map(|l| l.quant.as_ref().map(|q| centroids_f64(&q.codebook)))
            .collect()
    }

    pub fn loss(&self, params: &[Vec<f64>], sample: usize, lambda: f64, beta: f64) -> E2eLoss {
        self.evaluate(params, sample, lambda, beta, false).0
    }

    pub fn loss_and_grad(
        &self,
        params: &[Vec<f64>],
        sample: usize,
        lambda: f64,
        beta: f64,
    ) -> (E2eLoss, Vec<Vec<f64>>) {
        self.evaluate(params, sample, lambda, beta, true)
    }

    fn evaluate(
        &self,
        params: &[Vec<f64>],
        sample: usize,
        lambda: f64,
        beta: f64,
        want_grad: bool,
    ) -> (E2eLoss, Vec<Vec<f64>>) {
        let x = &self.samples[sample];
        let b = x.rows();
        let mut states = Vec::with_capacity(self.layers.len());
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut pi = 0;
        for (layer, soft) in self.layers.iter().zip(&self.soft) {
            match soft {
                Some(sq) => {
                    let st = sq.forward(&params[pi]);
                    pi += 1;
                    weights.push(st.w_hat.clone());
                    states.push(Some(st));
                }
                None => {
                    weights.push(layer.weight.to_f64());
                    states.push(None);
                }
            }
        }
        let pre = forward_layers(&self.layers, &weights, x);
        let (kd, dlogits) = kl_with_grad(
            pre.last().unwrap(),
            &self.targets[sample],
            b,
            self.out_dim,
            self.temperature,
        );

        let mut regularizer = 0.0;
        if lambda != 0.0 {
            for (sq, st) in self.soft.iter().zip(&states) {
                if let (Some(sq), Some(st)) = (sq, st) {
                    regularizer += lambda * sq.regularizer(st, beta);
                }
            }
        }
        let loss = E2eLoss {
            kd,
            regularizer,
            total: kd + regularizer,
        };
        if !want_grad {
            return (loss, Vec::new());
        }

        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); pi];
        let mut dz = dlogits;
        for l in (0..self.layers.len()).rev() {
            let (o, i) = (self.layers[l].out_dim(), self.layers[l].in_dim());
            let input: Vec<f64> = if l == 0 {
                x.to_f64()
            } else {
                pre[l - 1].iter().map(|v| v.max(0.0)).collect()
            };
            if let (Some(sq), Some(st)) = (&self.soft[l], &states[l]) {
                // dW = dz^T * input
                let dzt = transpose(&dz, b, o);
                let dw = matmul_f64(&dzt, &input, o, b, i);
                pi -= 1;
                grads[pi] = sq.backward(st, &dw, lambda, beta);
            }
            if l > 0 {
                let mut da = matmul_f64(&dz, &weights[l], b, o, i);
                for (g, z) in da.iter_mut().zip(&pre[l - 1]) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
                dz = da;
            }
        }
        (loss, grads)
    }
}

#[derive(Debug, Clone)]
pub struct E2eRun {
    pub codebooks: Vec<Codebook>,
    /// Codebooks after the last warm-up step (the initial ones when warm-up is empty).
    pub warmup_codebooks: Vec<Codebook>,
    pub losses: Vec<f64>,
    pub kd_losses: Vec<f64>,
    /// `lambda * R(H; beta)` at each step; exactly 0 during warm-up.
    pub reg_terms: Vec<f64>,
}

/// Batch-size-1 distillation: one sample per step, visited round-robin in
/// an order shuffled once by `cfg.seed`. Only the centroid tables train.
pub fn e2e_finetune(
    teacher: &TinyNet,
    student: &TinyNet,
    data: &[Tensor2D],
    spec: &RoundingSpec,
    cfg: &FinetuneConfig,
) -> Result<E2eRun> {
    cfg.validate()?;
    let prob = E2eProblem::new(teacher, student, data, spec, cfg.temperature)?;
    let originals: Vec<Codebook> = student.codebooks().into_iter().cloned().collect();
    let mut params = prob.initial_params();
    let mut adams: Vec<AdamState> = params.iter().map(|p| AdamState::new(p.len())).collect();
    let mut order: Vec<usize> = (0..prob.num_samples()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let to_codebooks = |params: &[Vec<f64>]| -> Result<Vec<Codebook>> {
        originals
            .iter()
            .zip(params)
            .map(|(cb, p)| codebook_from_f64(cb, p))
            .collect()
    };
    let warm = cfg.warmup_steps();
    let mut warmup_codebooks = if warm == 0 {
        Some(originals.clone())
    } else {
        None
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut kd_losses = Vec::with_capacity(cfg.steps);
    let mut reg_terms = Vec::with_capacity(cfg.steps);

    for t in 1..=cfg.steps {
        let beta = anneal_beta(t, cfg)? as f64;
        let lambda = cfg.lambda_at(t);
        let sample = order[(t - 1) % order.len()];
        let (loss, grads) = prob.loss_and_grad(&params, sample, lambda, beta);
        losses.push(loss.total);
        kd_losses.push(loss.kd);
        reg_terms.push(loss.regularizer);
        for ((p, g), st) in params.iter_mut().zip(&grads).zip(adams.iter_mut()) {
            adam_step(st, p, g, cfg.lr as f64)?;
        }
        if t == warm {
            warmup_codebooks = Some(to_codebooks(&params)?);
        }
    }

    let codebooks = to_codebooks(&params)?;
    Ok(E2eRun {
        warmup_codebooks: warmup_codebooks.unwrap_or_else(|| codebooks.clone()),
        codebooks,
        losses,
        kd_losses,
        reg_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn t(rows: &[&[f32]]) -> Tensor2D {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn kl_examples() {
        let a = t(&[&[0.3, -1.0, 2.0]]);
        assert_eq!(kl_loss(&a, &a, 1.0).unwrap(), 0.0);
        let s = t(&[&[0.0, 0.0]]);
        let tt = t(&[&[0.0, 3f32.ln()]]);
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_loss(&s, &tt, 1.0).unwrap() as f64 - want).abs() < 1e-6);
        assert!((want - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_grows_with_teacher_gap() {
        let s = t(&[&[0.0, 0.0]]);
        let mut last = 0.0;
        for gap in [1.0f32, 5.0, 20.0, 60.0] {
            let kl = kl_loss(&s, &t(&[&[0.0, gap]]), 1.0).unwrap();
            assert!(kl > last);
            last = kl;
        }
        assert!(last > 25.0);
    }

    #[test]
    fn kl_shape_mismatch() {
        assert!(kl_loss(&t(&[&[0.0, 1.0]]), &t(&[&[0.0, 1.0, 2.0]]), 1.0).is_err());
    }

    #[test]
    fn kl_gradient_matches_differences() {
        let s = [0.2, -0.7, 1.1, 0.4, 0.0, -0.3];
        let tg = [1.0, 0.5, -0.2, 0.0, 0.8, 0.1];
        let (_, g) = kl_with_grad(&s, &tg, 2, 3, 1.7);
        let h = 1e-5;
        for i in 0..6 {
            let mut p = s;
            p[i] += h;
            let mut m = s;
            m[i] -= h;
            let num = (kl_with_grad(&p, &tg, 2, 3, 1.7).0 - kl_with_grad(&m, &tg, 2, 3, 1.7).0)
                / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn incompatible_layers_rejected() {
        let a = Layer::dense(Tensor2D::zeros(4, 3).unwrap());
        let b = Layer::dense(Tensor2D::zeros(2, 5).unwrap());
        assert!(matches!(
            TinyNet::new(vec![a, b]),
            Err(Error::ArchitectureMismatch(_))
        ));
    }

    #[test]
    fn exact_grid_student_has_zero_kd() {
        // Integer weights on a unit grid; H = 0 reproduces them exactly.
        let w1 = t(&[&[1.0, -2.0, 0.0, 3.0], &[2.0, 1.0, -1.0, 0.0]]);
        let w2 = t(&[&[1.0, -1.0], &[0.0, 2.0]]);
        let teacher =
            TinyNet::new(vec![Layer::dense(w1.clone()), Layer::dense(w2.clone())]).unwrap();
        let q = |rows: usize| QuantParams {
            bits: 4,
            q_min: 0,
            q_max: 15,
            scale: vec![1.0; rows],
            zero: vec![4; rows],
        };
        let cb = |shape| {
            Codebook::new(Tensor2D::filled(1, 2, -20.0).unwrap(), vec![0; 4], shape).unwrap()
        };
        let cb2 =
            Codebook::new(Tensor2D::filled(1, 2, -20.0).unwrap(), vec![0; 2], (2, 2)).unwrap();
        let student = TinyNet::new(vec![
            Layer::quantized(w1, q(2), cb((2, 4))).unwrap(),
            Layer::quantized(w2, q(2), cb2).unwrap(),
        ])
        .unwrap();
        let data = vec![t(&[&[0.5, -1.0, 2.0, 0.25]]), t(&[&[1.0, 1.0, 1.0, 1.0]])];
        let spec = RoundingSpec::default();
        let prob = E2eProblem::new(&teacher, &student, &data, &spec, 1.0).unwrap();
        let p0 = prob.initial_params();
        for s in 0..2 {
            assert_eq!(prob.loss(&p0, s, 0.01, 20.0).total, 0.0);
        }
        assert_eq!(hard_kl(&teacher, &student, &data, &spec, 1.0).unwrap(), 0.0);
    }

    fn toy(seed: u64) -> (TinyNet, TinyNet, Vec<Tensor2D>) {
        let teacher = TinyNet::random(&[8, 12, 4], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let data: Vec<Tensor2D> = (0..16)
            .map(|_| Tensor2D::from_fn(1, 8, |_, _| rng.sample(StandardNormal)).unwrap())
            .collect();
        let cfg = StudentConfig {
            k: 8,
            d: 4,
            kmeans_iters: 20,
            ..Default::default()
        };
        let student = build_student(&teacher, &data, &RoundingSpec::default(), &cfg).unwrap();
        (teacher, student, data)
    }

    #[test]
    fn backprop_matches_central_differences() {
        let (teacher, student, data) = toy(3);
        let spec = RoundingSpec::default();
        let prob = E2eProblem::new(&teacher, &student, &data, &spec, 1.5).unwrap();
        // Move the centroids into the unclipped interior.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params: Vec<Vec<f64>> = prob
            .initial_params()
            .iter()
            .map(|p| p.iter().map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let (_, g) = prob.loss_and_grad(&params, 2, 0.05, 4.0);
        let h = 1e-4;
        let mut checked = 0;
        for l in 0..params.len() {
            for i in 0..params[l].len() {
                let mut plus = params.clone();
                plus[l][i] += h;
                let mut minus = params.clone();
                minus[l][i] -= h;
                let num = (prob.loss(&plus, 2, 0.05, 4.0).total
                    - prob.loss(&minus, 2, 0.05, 4.0).total)
                    / (2.0 * h);
                let scale = num.abs().max(g[l][i].abs()).max(1e-6);
                assert!(
                    (num - g[l][i]).abs() / scale < 1e-4,
                    "layer {l} coord {i}: {num} vs {}",
                    g[l][i]
                );
                checked += 1;
            }
        }
        assert!(checked >= 40);
    }

    #[test]
    fn warmup_has_no_regularizer_and_indices_stay() {
        let (teacher, student, data) = toy(5);
        let spec = RoundingSpec::default();
        let cfg = FinetuneConfig {
            steps: 40,
            ..Default::default()
        };
        let run = e2e_finetune(&teacher, &student, &data, &spec, &cfg).unwrap();
        for t in 0..cfg.warmup_steps() {
            assert_eq!(run.reg_terms[t], 0.0);
            assert_eq!(run.losses[t], run.kd_losses[t]);
        }
        assert!(run.reg_terms[cfg.warmup_steps()..].iter().all(|&r| r > 0.0));
        for (a, b) in run.codebooks.iter().zip(student.codebooks()) {
            assert_eq!(a.indices(), b.indices());
        }
        assert!(student.with_codebooks(&run.codebooks).is_ok());
    }

    #[test]
    fn mismatched_teacher_rejected() {
        let (_, student, data) = toy(1);
        let other = TinyNet::random(&[8, 10, 4], 0).unwrap();
        let err = e2e_finetune(
            &other,
            &student,
            &data,
            &RoundingSpec::default(),
            &FinetuneConfig::default(),
        );
        assert!(matches!(err, Err(Error::ArchitectureMismatch(_))));
    }

    #[test]
    fn zero_steps_keeps_codebooks() {
        let (teacher, student, data) = toy(2);
        let cfg = FinetuneConfig {
            steps: 0,
            ..Default::default()
        };
        let run = e2e_finetune(&teacher, &student, &data, &RoundingSpec::default(), &cfg).unwrap();
        let before: Vec<Codebook> = student.codebooks().into_iter().cloned().collect();
        assert_eq!(run.codebooks, before);
        assert_eq!(run.warmup_codebooks, before);
    }
}
