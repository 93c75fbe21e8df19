//! Stacked denoising autoencoder over bag-of-words rows.
//!
//! Each paper's word-count row is rescaled by its maximum, corrupted by
//! zeroing coordinates at random and passed through a stack of LeakyReLU
//! layers. The innermost code is the paper's text embedding `t`.

use log::{debug, info};
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::HeteroGraph;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out x in
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn glorot<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdaeParams {
    /// Outermost first; the last encoder emits the text code.
    pub encoders: Vec<DenseLayer>,
    /// Innermost first; the last decoder reconstructs the input.
    pub decoders: Vec<DenseLayer>,
    pub corruption_rate: f64,
    /// Ridge weight on every weight matrix (biases are not penalised).
    pub weight_decay: f64,
    pub leaky_slope: f64,
}

impl SdaeParams {
    pub fn input_dim(&self) -> usize {
        self.encoders.first().map_or(0, DenseLayer::input_dim)
    }

    pub fn code_dim(&self) -> usize {
        self.encoders.last().map_or(0, DenseLayer::output_dim)
    }

    /// Checks that encoder and decoder shapes chain and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() || self.decoders.len() != self.encoders.len() {
            return Err(Error::shape(format!(
                "{} encoder and {} decoder layers",
                self.encoders.len(),
                self.decoders.len()
            )));
        }
        let chain: Vec<&DenseLayer> = self.encoders.iter().chain(&self.decoders).collect();
        for pair in chain.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape("autoencoder layers do not chain"));
            }
        }
        for l in &chain {
            if l.bias.len() != l.output_dim() {
                return Err(Error::shape("bias length differs from layer width"));
            }
        }
        if chain.last().unwrap().output_dim() != self.input_dim() {
            return Err(Error::shape("decoder output differs from encoder input"));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(Error::config("corruption rate must lie in [0, 1)"));
        }
        if !chain
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
        {
            return Err(Error::NonFinite("autoencoder parameters".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.encoders.iter().chain(&self.decoders)
    }

    /// Sum of squared Frobenius norms of every weight matrix.
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers().map(|l| l.weight.iter().map(|w| w * w).sum::<f64>()).sum()
    }
}

/// Zeroes each coordinate independently with probability `rate`.
pub fn corrupt<R: Rng>(x: ArrayView1<f64>, rate: f64, rng: &mut R) -> Result<Array1<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("corruption rate {rate} outside [0, 1)")));
    }
    Ok(x.mapv(|v| if rng.gen::<f64>() < rate { 0.0 } else { v }))
}

fn corrupt_batch<R: Rng>(x: &Array2<f64>, rate: f64, rng: &mut R) -> Array2<f64> {
    x.mapv(|v| if rng.gen::<f64>() < rate { 0.0 } else { v })
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Activations recorded by a forward pass: `inputs[l]` feeds layer `l`,
/// `pre[l]` is its pre-activation. The network output is `inputs.last()`.
struct Trace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Trace {
    fn output(&self) -> &Array2<f64> {
        self.inputs.last().unwrap()
    }
}

fn forward<'a>(layers: impl IntoIterator<Item = &'a DenseLayer>, x: Array2<f64>, slope: f64) -> Trace {
    let mut trace = Trace {
        inputs: vec![x],
        pre: Vec::new(),
    };
    for layer in layers {
        let z = trace.inputs.last().unwrap().dot(&layer.weight.t()) + &layer.bias;
        let a = z.mapv(|v| leaky(v, slope));
        trace.pre.push(z);
        trace.inputs.push(a);
    }
    trace
}

/// Backpropagates `d_out` (gradient w.r.t. the network output) and returns
/// per-layer gradients `(dW, db)` in layer order.
fn backward(layers: &[&DenseLayer], trace: &Trace, d_out: Array2<f64>, slope: f64) -> Vec<DenseLayer> {
    let mut grads = Vec::with_capacity(layers.len());
    let mut delta = d_out;
    for l in (0..layers.len()).rev() {
        let dz = &delta * &trace.pre[l].mapv(|v| leaky_grad(v, slope));
        let dw = dz.t().dot(&trace.inputs[l]);
        let db = dz.sum_axis(Axis(0));
        if l > 0 {
            delta = dz.dot(&layers[l].weight);
        }
        grads.push(DenseLayer { weight: dw, bias: db });
    }
    grads.reverse();
    grads
}

/// Text code for one (possibly corrupted) input row.
pub fn encode(x: ArrayView1<f64>, params: &SdaeParams) -> Result<Array1<f64>> {
    if x.len() != params.input_dim() {
        return Err(Error::shape(format!(
            "input has {} entries, encoder expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let row = x.to_owned().insert_axis(Axis(0));
    let trace = forward(&params.encoders, row, params.leaky_slope);
    Ok(trace.output().row(0).to_owned())
}

/// Reconstruction from a text code.
pub fn decode(t: ArrayView1<f64>, params: &SdaeParams) -> Result<Array1<f64>> {
    if t.len() != params.code_dim() {
        return Err(Error::shape(format!(
            "code has {} entries, decoder expects {}",
            t.len(),
            params.code_dim()
        )));
    }
    let row = t.to_owned().insert_axis(Axis(0));
    let trace = forward(&params.decoders, row, params.leaky_slope);
    Ok(trace.output().row(0).to_owned())
}

/// Encodes every row of `x` (papers x words).
pub fn encode_batch(x: &Array2<f64>, params: &SdaeParams) -> Array2<f64> {
    forward(&params.encoders, x.clone(), params.leaky_slope)
        .inputs
        .pop()
        .unwrap()
}

/// Clean targets and the corrupted inputs fed to the encoder.
#[derive(Debug, Clone)]
pub struct SdaeBatch {
    pub targets: Array2<f64>,
    pub inputs: Array2<f64>,
}

/// `Σ_i ||x_i - x̂_i||² + λ Σ ||W||²` over the batch.
pub fn sdae_loss(batch: &SdaeBatch, params: &SdaeParams) -> f64 {
    let trace = forward(params.layers(), batch.inputs.clone(), params.leaky_slope);
    let recon: f64 = (trace.output() - &batch.targets).iter().map(|e| e * e).sum();
    recon + params.weight_decay * params.weight_norm_sq()
}

/// Gradient of [`sdae_loss`] with respect to every weight and bias, in the
/// layer order of [`SdaeParams::layers`].
pub fn sdae_loss_grad(batch: &SdaeBatch, params: &SdaeParams) -> (f64, Vec<DenseLayer>) {
    loss_and_grad(params, batch, 1.0, params.weight_decay, None)
}

/// Reconstruction loss scaled by `recon_scale` plus `decay * ||W||²`, and,
/// when `align` is given, `align_scale * Σ ||encode(clean) - target||²`.
fn loss_and_grad(
    params: &SdaeParams,
    batch: &SdaeBatch,
    recon_scale: f64,
    decay: f64,
    align: Option<(&Array2<f64>, f64)>,
) -> (f64, Vec<DenseLayer>) {
    let slope = params.leaky_slope;
    let layers: Vec<&DenseLayer> = params.layers().collect();
    let trace = forward(layers.iter().copied(), batch.inputs.clone(), slope);
    let err = trace.output() - &batch.targets;
    let mut loss = recon_scale * err.iter().map(|e| e * e).sum::<f64>();
    let mut grads = backward(&layers, &trace, err * (2.0 * recon_scale), slope);

    if let Some((code_targets, scale)) = align {
        let enc: Vec<&DenseLayer> = params.encoders.iter().collect();
        let clean = forward(enc.iter().copied(), batch.targets.clone(), slope);
        let diff = clean.output() - code_targets;
        loss += scale * diff.iter().map(|e| e * e).sum::<f64>();
        let enc_grads = backward(&enc, &clean, diff * (2.0 * scale), slope);
        for (g, e) in grads.iter_mut().zip(enc_grads) {
            g.weight += &e.weight;
            g.bias += &e.bias;
        }
    }

    loss += decay * params.weight_norm_sq();
    for (g, l) in grads.iter_mut().zip(&layers) {
        g.weight.scaled_add(2.0 * decay, &l.weight);
    }
    (loss, grads)
}

fn apply_step(params: &mut SdaeParams, grads: &[DenseLayer], lr: f64) {
    let layers = params.encoders.iter_mut().chain(params.decoders.iter_mut());
    for (l, g) in layers.zip(grads) {
        l.weight.scaled_add(-lr, &g.weight);
        l.bias.scaled_add(-lr, &g.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdaeConfig {
    /// Encoder output widths, outermost first; the last one is the code size.
    pub layer_widths: Vec<usize>,
    pub corruption_rate: f64,
    pub weight_decay: f64,
    pub leaky_slope: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl SdaeConfig {
    /// Default stack `|V_w| -> 256 -> K/2`.
    pub fn for_embedding_size(k: usize) -> Result<Self> {
        if k == 0 || !k.is_multiple_of(2) {
            return Err(Error::config(format!("embedding size {k} must be even and positive")));
        }
        Ok(Self {
            layer_widths: vec![256, k / 2],
            corruption_rate: 0.3,
            weight_decay: 0.01,
            leaky_slope: 0.01,
            lr: 0.01,
            batch_size: 64,
            epochs: 50,
            seed: 0,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() {
            return Err(Error::config("autoencoder needs at least one layer"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(Error::config("corruption rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Rescaled sparse inputs: each paper's counts divided by its largest count.
#[derive(Debug, Clone)]
pub struct TextInputs {
    dim: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl TextInputs {
    pub fn from_graph(graph: &HeteroGraph) -> Self {
        let rows = (0..graph.num_papers())
            .map(|p| {
                let bow = graph.bow_of(p);
                let max = bow.iter().map(|&(_, c)| c).max().unwrap_or(1) as f64;
                bow.iter().map(|&(w, c)| (w as usize, c as f64 / max)).collect()
            })
            .collect();
        Self {
            dim: graph.vocab_size(),
            rows,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dense(&self, papers: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((papers.len(), self.dim));
        for (r, &p) in papers.iter().enumerate() {
            for &(w, v) in &self.rows[p] {
                out[[r, w]] = v;
            }
        }
        out
    }

    fn has_text(&self, p: usize) -> bool {
        !self.rows[p].is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PretrainedText {
    pub params: SdaeParams,
    /// Papers x code size, computed on uncorrupted inputs.
    pub embeddings: Array2<f64>,
    /// Mean per-paper loss of each epoch, one series per greedy layer.
    pub layer_losses: Vec<Vec<f64>>,
}

/// Trains one denoising autoencoder on `data` (rows = examples).
fn train_layer(
    data: &Array2<f64>,
    output: usize,
    cfg: &SdaeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SdaeParams, Vec<f64>)> {
    let input = data.ncols();
    let mut params = SdaeParams {
        encoders: vec![DenseLayer::glorot(input, output, rng)],
        decoders: vec![DenseLayer::glorot(output, input, rng)],
        corruption_rate: cfg.corruption_rate,
        weight_decay: cfg.weight_decay,
        leaky_slope: cfg.leaky_slope,
    };
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let targets = data.select(Axis(0), chunk);
            let inputs = corrupt_batch(&targets, cfg.corruption_rate, rng);
            let batch = SdaeBatch { targets, inputs };
            let (loss, grads) = loss_and_grad(&params, &batch, 1.0 / chunk.len() as f64, cfg.weight_decay, None);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("autoencoder loss at epoch {epoch}")));
            }
            total += loss * chunk.len() as f64;
            apply_step(&mut params, &grads, cfg.lr);
        }
        let mean = total / data.nrows().max(1) as f64;
        debug!("sdae layer {input}->{output} epoch {epoch}: loss {mean:.6}");
        losses.push(mean);
    }
    Ok((params, losses))
}

/// Greedy layer-wise pretraining: each layer is a denoising autoencoder
/// trained on the clean codes of the layer below.
pub fn pretrain(graph: &HeteroGraph, cfg: &SdaeConfig) -> Result<PretrainedText> {
    cfg.validate()?;
    let inputs = TextInputs::from_graph(graph);
    pretrain_inputs(&inputs, cfg)
}

pub fn pretrain_inputs(inputs: &TextInputs, cfg: &SdaeConfig) -> Result<PretrainedText> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let with_text: Vec<usize> = (0..inputs.len()).filter(|&p| inputs.has_text(p)).collect();
    let mut data = inputs.dense(&with_text);

    let mut encoders = Vec::new();
    let mut decoders = Vec::new();
    let mut layer_losses = Vec::new();
    for &width in &cfg.layer_widths {
        let (layer, losses) = train_layer(&data, width, cfg, &mut rng)?;
        data = encode_batch(&data, &layer);
        let SdaeParams {
            encoders: mut e,
            decoders: mut d,
            ..
        } = layer;
        encoders.push(e.remove(0));
        decoders.insert(0, d.remove(0));
        layer_losses.push(losses);
    }
    let params = SdaeParams {
        encoders,
        decoders,
        corruption_rate: cfg.corruption_rate,
        weight_decay: cfg.weight_decay,
        leaky_slope: cfg.leaky_slope,
    };
    params.validate()?;
    let all: Vec<usize> = (0..inputs.len()).collect();
    let embeddings = encode_batch(&inputs.dense(&all), &params);
    info!(
        "pretrained text autoencoder {:?} on {} papers",
        cfg.layer_widths,
        with_text.len()
    );
    Ok(PretrainedText {
        params,
        embeddings,
        layer_losses,
    })
}

/// Hyperparameters of one fine-tuning epoch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FinetuneStep {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub mu: f64,
}

/// One epoch of mini-batch descent on
/// `(L_t + mu * Σ ||encode(x_p) - target_p||²) / (1 + mu)`, per-example averaged.
/// Returns the summed reconstruction loss seen during the epoch.
pub(crate) fn finetune_epoch(
    params: &mut SdaeParams,
    inputs: &TextInputs,
    targets: &Array2<f64>,
    step: FinetuneStep,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..inputs.len()).filter(|&p| inputs.has_text(p)).collect();
    order.shuffle(rng);
    let norm = 1.0 / (1.0 + step.mu);
    let mut total = 0.0;
    for chunk in order.chunks(step.batch_size.max(1)) {
        let clean = inputs.dense(chunk);
        let noisy = corrupt_batch(&clean, params.corruption_rate, rng);
        let code_targets = targets.select(Axis(0), chunk);
        let batch = SdaeBatch {
            targets: clean,
            inputs: noisy,
        };
        let scale = norm / chunk.len() as f64;
        let align = (step.mu > 0.0).then_some((&code_targets, scale * step.mu));
        let (loss, grads) = loss_and_grad(params, &batch, scale, norm * step.weight_decay, align);
        if !loss.is_finite() {
            return Err(Error::NonFinite("autoencoder fine-tuning loss".into()));
        }
        total += sdae_loss(&batch, params) - params.weight_decay * params.weight_norm_sq();
        apply_step(params, &grads, step.lr);
    }
    Ok(total)
}

/// Text codes for every paper on clean inputs.
pub(crate) fn embed_all(params: &SdaeParams, inputs: &TextInputs) -> Array2<f64> {
    let all: Vec<usize> = (0..inputs.len()).collect();
    let mut out = Array2::zeros((inputs.len(), params.code_dim()));
    for chunk in all.chunks(256) {
        let codes = encode_batch(&inputs.dense(chunk), params);
        out.slice_mut(s![chunk[0]..chunk[0] + chunk.len(), ..]).assign(&codes);
    }
    out
}
