//! The seven parameterised functions: anatomy encoder, modality encoder,
//! decoder, segmentor, temporal transformer, discriminator and the
//! mutual-information estimator.
//!
//! Tensors are laid out `[batch, channel, height, width]`. Layers only hold
//! parameter ids, so the same [`Networks`] runs on raw or averaged weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdtnet_tensor::nn::{Conv2d, Linear};
use sdtnet_tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::{Error, Result};

/// Number of halvings inside the temporal transformer.
pub const TRANSFORMER_DEPTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    pub anatomy_channels: usize,
    pub n_z: usize,
    /// Feature widths per resolution level of the anatomy UNet.
    pub anatomy_widths: Vec<usize>,
    /// Widths of the four levels above the transformer bottleneck.
    pub transformer_widths: Vec<usize>,
    pub transformer_bottleneck: usize,
    pub transformer_hidden: usize,
    /// Channels of the reshaped temporal code joined to the bottleneck.
    pub transformer_code_channels: usize,
    pub modality_widths: Vec<usize>,
    pub decoder_width: usize,
    pub segmentor_width: usize,
    pub discriminator_widths: Vec<usize>,
    pub mi_widths: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            anatomy_channels: 8,
            n_z: 8,
            anatomy_widths: vec![16, 32, 64, 64],
            transformer_widths: vec![8, 16, 32, 32],
            transformer_bottleneck: 64,
            transformer_hidden: 128,
            transformer_code_channels: 16,
            modality_widths: vec![8, 16, 32],
            decoder_width: 16,
            segmentor_width: 16,
            discriminator_widths: vec![8, 16, 32],
            mi_widths: vec![8, 16, 32],
            leaky_slope: 0.2,
        }
    }
}

impl NetworkConfig {
    /// Small widths for CPU-scale experiments on `size x size` images.
    pub fn desk(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            anatomy_widths: vec![8, 16, 32, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::data::check_size_multiple_of_16(self.height, self.width)?;
        let lists = [
            ("anatomy_widths", &self.anatomy_widths),
            ("modality_widths", &self.modality_widths),
            ("discriminator_widths", &self.discriminator_widths),
            ("mi_widths", &self.mi_widths),
        ];
        for (name, v) in lists {
            if v.is_empty() || v.contains(&0) {
                return Err(Error::Config(format!("{name} must be a non-empty list of positive widths")));
            }
        }
        if self.anatomy_widths.len() > 5 {
            return Err(Error::Config("anatomy_widths allows at most 4 halvings".into()));
        }
        if self.transformer_widths.len() != TRANSFORMER_DEPTH || self.transformer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "transformer_widths must list {TRANSFORMER_DEPTH} positive widths"
            )));
        }
        let positive = [
            ("anatomy_channels", self.anatomy_channels),
            ("n_z", self.n_z),
            ("transformer_bottleneck", self.transformer_bottleneck),
            ("transformer_hidden", self.transformer_hidden),
            ("transformer_code_channels", self.transformer_code_channels),
            ("decoder_width", self.decoder_width),
            ("segmentor_width", self.segmentor_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.anatomy_channels < 2 {
            return Err(Error::Config("anatomy_channels must be at least 2".into()));
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return Err(Error::Config("leaky_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Spatial size of the transformer bottleneck.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        (self.height >> TRANSFORMER_DEPTH, self.width >> TRANSFORMER_DEPTH)
    }

    /// Widths of the three layers of the temporal MLP.
    pub fn transformer_mlp_widths(&self) -> [usize; 3] {
        let (bh, bw) = self.bottleneck_hw();
        [self.transformer_hidden, self.transformer_hidden, bh * bw * self.transformer_code_channels]
    }
}

/// Two 3x3 convolutions with leaky ReLUs.
#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new<F: Float>(store: &mut ParamStore<F>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv2d::new(store, &format!("{name}.0"), cin, cout, 3, rng),
            b: Conv2d::new(store, &format!("{name}.1"), cout, cout, 3, rng),
        }
    }

    fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var, bounded: bool) -> Result<Var> {
        let h = cx.lrelu(self.a.forward(cx.g, cx.store, x)?);
        let h = self.b.forward(cx.g, cx.store, h)?;
        Ok(if bounded { cx.g.sigmoid(h) } else { cx.lrelu(h) })
    }
}

/// Shapes observed inside one transformer pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TransformerProbe {
    /// `[B, C, H, W]` of the bottleneck features before the temporal code joins.
    pub bottleneck: Vec<usize>,
    pub mlp_widths: Vec<usize>,
    /// `[B, C, H, W]` of the reshaped temporal code.
    pub code: Vec<usize>,
    pub concat_channels: usize,
}

/// UNet with max-pool downsampling, nearest upsampling and skip concatenation.
/// With `code_channels > 0` the deepest level is sigmoid-bounded and extra
/// feature maps are concatenated to it before decoding.
#[derive(Clone, Debug)]
struct UNet {
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
    code_channels: usize,
}

impl UNet {
    fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        widths: &[usize],
        cout: usize,
        code_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut enc = Vec::new();
        let mut prev = cin;
        for (i, &w) in widths.iter().enumerate() {
            enc.push(DoubleConv::new(store, &format!("{name}.enc{i}"), prev, w, rng));
            prev = w;
        }
        prev += code_channels;
        let mut dec = Vec::new();
        for i in (0..widths.len() - 1).rev() {
            dec.push(DoubleConv::new(store, &format!("{name}.dec{i}"), prev + widths[i], widths[i], rng));
            prev = widths[i];
        }
        let head = Conv2d::new(store, &format!("{name}.head"), prev, cout, 1, rng);
        Self {
            enc,
            dec,
            head,
            code_channels,
        }
    }

    /// Returns output logits and the (bottleneck, joined) vars.
    fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var, code: Option<Var>) -> Result<(Var, Var, Var)> {
        let g = cx.g;
        let last = self.enc.len() - 1;
        let mut skips = Vec::new();
        let mut h = x;
        for (i, level) in self.enc.iter().enumerate() {
            if i > 0 {
                h = g.maxpool2(h)?;
            }
            h = level.forward(cx, h, i == last && self.code_channels > 0)?;
            skips.push(h);
        }
        let bottleneck = h;
        if let Some(c) = code {
            h = g.concat_channels(&[h, c])?;
        }
        let joined = h;
        for (j, level) in self.dec.iter().enumerate() {
            let skip = skips[last - 1 - j];
            h = g.upsample2(h)?;
            h = g.concat_channels(&[h, skip])?;
            h = level.forward(cx, h, false)?;
        }
        Ok((self.head.forward(g, cx.store, h)?, bottleneck, joined))
    }
}

/// Convolution/pooling stages, global average pooling and a linear head.
#[derive(Clone, Debug)]
struct ConvHead {
    convs: Vec<Conv2d>,
    hidden: Linear,
    outs: Vec<Linear>,
}

impl ConvHead {
    fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        widths: &[usize],
        outs: &[(&str, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut convs = Vec::new();
        let mut prev = cin;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), prev, w, 3, rng));
            prev = w;
        }
        let hidden = Linear::new(store, &format!("{name}.fc"), prev, prev, rng);
        let outs = outs
            .iter()
            .map(|(suffix, n)| Linear::new(store, &format!("{name}.{suffix}"), prev, *n, rng))
            .collect();
        Self { convs, hidden, outs }
    }

    fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Result<Vec<Var>> {
        let g = cx.g;
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            h = cx.lrelu(c.forward(g, cx.store, h)?);
            if i + 1 < self.convs.len() {
                h = g.maxpool2(h)?;
            }
        }
        let h = cx.lrelu(self.hidden.forward(g, cx.store, g.global_avg_pool(h)?)?);
        self.outs
            .iter()
            .map(|l| Ok(l.forward(g, cx.store, h)?))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    convs: [Conv2d; 3],
    film: [(Linear, Linear); 2],
}

#[derive(Clone, Debug)]
struct Segmentor {
    convs: [Conv2d; 3],
}

#[derive(Clone, Debug)]
struct Transformer {
    unet: UNet,
    mlp: [Linear; 3],
}

/// Parameter groups, matched by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Anatomy,
    Modality,
    Decoder,
    Segmentor,
    Transformer,
    Discriminator,
    MiEstimator,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Anatomy,
        Component::Modality,
        Component::Decoder,
        Component::Segmentor,
        Component::Transformer,
        Component::Discriminator,
        Component::MiEstimator,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Anatomy => "anatomy.",
            Component::Modality => "modality.",
            Component::Decoder => "decoder.",
            Component::Segmentor => "segmentor.",
            Component::Transformer => "transformer.",
            Component::Discriminator => "discriminator.",
            Component::MiEstimator => "mi.",
        }
    }

    pub fn of(name: &str) -> Option<Component> {
        Self::ALL.into_iter().find(|c| name.starts_with(c.prefix()))
    }
}

/// Architecture of all seven networks.
#[derive(Clone, Debug)]
pub struct Networks {
    config: NetworkConfig,
    anatomy: UNet,
    modality: ConvHead,
    decoder: Decoder,
    segmentor: Segmentor,
    transformer: Transformer,
    discriminator: ConvHead,
    mi: ConvHead,
}

/// Architecture plus one set of parameter values.
#[derive(Clone, Debug)]
pub struct NetworkBundle<F> {
    pub nets: Networks,
    pub params: ParamStore<F>,
}

impl<F: Float> NetworkBundle<F> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let (nets, params) = Networks::new(config, seed)?;
        Ok(Self { nets, params })
    }

    pub fn bind<'a>(&'a self, g: &'a Graph<F>) -> Ctx<'a, F> {
        self.nets.bind(g, &self.params)
    }
}

impl Networks {
    pub fn new<F: Float>(config: NetworkConfig, seed: u64) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let ca = c.anatomy_channels;
        let anatomy = UNet::new(&mut store, "anatomy", 1, &c.anatomy_widths, ca, 0, &mut rng);
        let modality = ConvHead::new(
            &mut store,
            "modality",
            1 + ca,
            &c.modality_widths,
            &[("mean", c.n_z), ("log_var", c.n_z)],
            &mut rng,
        );
        let dw = c.decoder_width;
        let decoder = Decoder {
            convs: [
                Conv2d::new(&mut store, "decoder.conv0", ca, dw, 3, &mut rng),
                Conv2d::new(&mut store, "decoder.conv1", dw, dw, 3, &mut rng),
                Conv2d::new(&mut store, "decoder.conv2", dw, 1, 3, &mut rng),
            ],
            film: [0, 1].map(|i| {
                (
                    Linear::new(&mut store, &format!("decoder.film{i}.gamma"), c.n_z, dw, &mut rng),
                    Linear::new(&mut store, &format!("decoder.film{i}.beta"), c.n_z, dw, &mut rng),
                )
            }),
        };
        let sw = c.segmentor_width;
        let segmentor = Segmentor {
            convs: [
                Conv2d::new(&mut store, "segmentor.conv0", ca, sw, 3, &mut rng),
                Conv2d::new(&mut store, "segmentor.conv1", sw, sw, 3, &mut rng),
                Conv2d::new(&mut store, "segmentor.conv2", sw, NUM_CLASSES, 1, &mut rng),
            ],
        };
        let mut widths = c.transformer_widths.clone();
        widths.push(c.transformer_bottleneck);
        let [m0, m1, m2] = c.transformer_mlp_widths();
        let transformer = Transformer {
            unet: UNet::new(&mut store, "transformer", ca, &widths, ca, c.transformer_code_channels, &mut rng),
            mlp: [
                Linear::new(&mut store, "transformer.mlp0", 2, m0, &mut rng),
                Linear::new(&mut store, "transformer.mlp1", m0, m1, &mut rng),
                Linear::new(&mut store, "transformer.mlp2", m1, m2, &mut rng),
            ],
        };
        let discriminator = ConvHead::new(
            &mut store,
            "discriminator",
            NUM_CLASSES - 1,
            &c.discriminator_widths,
            &[("score", 1)],
            &mut rng,
        );
        let mi = ConvHead::new(&mut store, "mi", 1, &c.mi_widths, &[("code", c.n_z)], &mut rng);
        // FiLM starts as the identity modulation.
        for l in decoder.film.iter().flat_map(|(a, b)| [a, b]) {
            *store.get_mut(l.weight) = store.get(l.weight).map(|v| v * F::from_f64(0.1));
        }
        let nets = Self {
            config,
            anatomy,
            modality,
            decoder,
            segmentor,
            transformer,
            discriminator,
            mi,
        };
        Ok((nets, store))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn bind<'a, F: Float>(&'a self, g: &'a Graph<F>, store: &'a ParamStore<F>) -> Ctx<'a, F> {
        Ctx { nets: self, g, store }
    }

    /// Ids of every parameter belonging to `component`.
    pub fn params_of<F: Float>(store: &ParamStore<F>, component: Component) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, name, _)| Component::of(name) == Some(component))
            .map(|(id, _, _)| id)
            .collect()
    }
}

pub struct AnatomyOutput {
    /// Channel softmax before binarisation.
    pub soft: Var,
    /// One-hot factors with straight-through gradients.
    pub hard: Var,
}

pub struct ModalityOutput {
    pub mean: Var,
    pub log_var: Var,
    pub sample: Var,
}

pub struct TransformOutput {
    pub soft: Var,
    pub hard: Var,
    pub probe: TransformerProbe,
}

/// Networks bound to a graph and a parameter set.
pub struct Ctx<'a, F: Float> {
    pub nets: &'a Networks,
    pub g: &'a Graph<F>,
    pub store: &'a ParamStore<F>,
}

impl<'a, F: Float> Ctx<'a, F> {
    fn lrelu(&self, x: Var) -> Var {
        self.g.leaky_relu(x, self.nets.config.leaky_slope)
    }

    fn check_image(&self, x: Var) -> Result<(usize, usize, usize)> {
        let shape = self.g.shape(x);
        match shape[..] {
            [n, 1, h, w] => {
                check_spatial(h, w)?;
                Ok((n, h, w))
            }
            _ => Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
                "expected an image batch [B, 1, H, W], got {shape:?}"
            )))),
        }
    }

    fn check_factors(&self, s: Var) -> Result<()> {
        let shape = self.g.shape(s);
        let ca = self.nets.config.anatomy_channels;
        match shape[..] {
            [_, c, h, w] if c == ca => check_spatial(h, w),
            _ => Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
                "expected anatomy factors with {ca} channels, got {shape:?}"
            )))),
        }
    }

    pub fn anatomy_encode(&self, x: Var) -> Result<AnatomyOutput> {
        self.check_image(x)?;
        let (logits, _, _) = self.nets.anatomy.forward(self, x, None)?;
        let soft = self.g.softmax_channels(logits)?;
        let hard = self.g.straight_through_one_hot(soft)?;
        Ok(AnatomyOutput { soft, hard })
    }

    /// `eps` supplies the standard-normal draw `[B, n_z]`; without it the
    /// sample is the posterior mean.
    pub fn modality_encode(&self, x: Var, s: Var, eps: Option<Tensor<F>>) -> Result<ModalityOutput> {
        self.check_image(x)?;
        self.check_factors(s)?;
        let g = self.g;
        let outs = self.nets.modality.forward(self, g.concat_channels(&[x, s])?)?;
        let (mean, log_var) = (outs[0], outs[1]);
        let sample = match eps {
            None => mean,
            Some(e) => {
                if e.shape() != g.shape(mean).as_slice() {
                    return Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
                        "eps {:?} for code {:?}",
                        e.shape(),
                        g.shape(mean)
                    ))));
                }
                let std = g.exp(g.scale(log_var, 0.5));
                g.add(mean, g.mul(std, g.constant(e))?)?
            }
        };
        Ok(ModalityOutput { mean, log_var, sample })
    }

    pub fn decode(&self, s: Var, z: Var) -> Result<Var> {
        self.check_factors(s)?;
        let g = self.g;
        let d = &self.nets.decoder;
        let mut h = s;
        for (conv, (gamma, beta)) in d.convs.iter().zip(&d.film) {
            h = conv.forward(g, self.store, h)?;
            let gm = g.add_scalar(gamma.forward(g, self.store, z)?, 1.0);
            let bt = beta.forward(g, self.store, z)?;
            h = self.lrelu(g.film(h, gm, bt)?);
        }
        Ok(d.convs[2].forward(g, self.store, h)?)
    }

    /// Per-pixel class probabilities `[B, 4, H, W]`.
    pub fn segment(&self, s: Var) -> Result<Var> {
        self.check_factors(s)?;
        let c = &self.nets.segmentor.convs;
        let h = self.lrelu(c[0].forward(self.g, self.store, s)?);
        let h = self.lrelu(c[1].forward(self.g, self.store, h)?);
        Ok(self.g.softmax_channels(c[2].forward(self.g, self.store, h)?)?)
    }

    /// Predicts the factors `dt` later in the cycle from factors at phase `t`
    /// (one pair of scalars per batch element).
    pub fn transform(&self, s: Var, t: &[f64], dt: &[f64]) -> Result<TransformOutput> {
        self.check_factors(s)?;
        let g = self.g;
        let n = g.shape(s)[0];
        if t.len() != n || dt.len() != n {
            return Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
                "{} phase scalars for batch {n}",
                t.len()
            ))));
        }
        for (&a, &b) in t.iter().zip(dt) {
            if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0 && a + b <= 1.0 + 1e-9) {
                return Err(Error::Precondition(format!("invalid phase t={a}, dt={b}: need t, dt >= 0 and t + dt <= 1")));
            }
        }
        let cfg = &self.nets.config;
        let shape = g.shape(s);
        let (bh, bw) = (shape[2] >> TRANSFORMER_DEPTH, shape[3] >> TRANSFORMER_DEPTH);
        let phase: Vec<f64> = t.iter().zip(dt).flat_map(|(&a, &b)| [a, b]).collect();
        let mut h = g.constant(Tensor::from_f64(&[n, 2], &phase)?);
        let mut mlp_widths = Vec::new();
        for (i, l) in self.nets.transformer.mlp.iter().enumerate() {
            h = l.forward(g, self.store, h)?;
            h = if i == 2 { g.sigmoid(h) } else { self.lrelu(h) };
            mlp_widths.push(g.shape(h)[1]);
        }
        let k = cfg.transformer_code_channels;
        if mlp_widths[2] != bh * bw * k {
            return Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
                "transformer built for {}x{} cannot run on {}x{}",
                cfg.height, cfg.width, shape[2], shape[3]
            ))));
        }
        let code = g.reshape(h, &[n, k, bh, bw])?;
        let (logits, bottleneck, joined) = self.nets.transformer.unet.forward(self, s, Some(code))?;
        let logits = g.add(logits, s)?;
        let soft = g.softmax_channels(logits)?;
        let hard = g.straight_through_one_hot(soft)?;
        let probe = TransformerProbe {
            bottleneck: g.shape(bottleneck),
            mlp_widths,
            code: g.shape(code),
            concat_channels: g.shape(joined)[1],
        };
        Ok(TransformOutput { soft, hard, probe })
    }

    /// Critic scores `[B, 1]` of the foreground channels of a 4-class mask.
    pub fn discriminate(&self, mask: Var) -> Result<Var> {
        let shape = self.g.shape(mask);
        if shape.len() != 4 || shape[1] != NUM_CLASSES {
            return Err(Error::Shape(sdtnet_tensor::ShapeError::new(format!(
                "expected a {NUM_CLASSES}-class mask, got {shape:?}"
            ))));
        }
        let fg = self.g.narrow_channels(mask, 1, NUM_CLASSES - 1)?;
        Ok(self.nets.discriminator.forward(self, fg)?[0])
    }

    /// Code estimate `[B, n_z]` from a reconstructed image.
    pub fn estimate_mi_code(&self, x: Var) -> Result<Var> {
        self.check_image(x)?;
        Ok(self.nets.mi.forward(self, x)?[0])
    }
}

fn check_spatial(h: usize, w: usize) -> Result<()> {
    crate::data::check_size_multiple_of_16(h, w)
        .map_err(|e| Error::Shape(sdtnet_tensor::ShapeError::new(e.to_string())))
}

/// Image tensor `[N, 1, H, W]` from frames of equal size.
pub fn image_batch<F: Float>(frames: &[&crate::data::Frame]) -> Result<Tensor<F>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Precondition("empty frame batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        if (f.height, f.width) != (h, w) {
            return Err(Error::Precondition("frames in a batch differ in size".into()));
        }
        data.extend(f.data.iter().map(|&v| F::from_f64(v as f64)));
    }
    Ok(Tensor::new(&[frames.len(), 1, h, w], data)?)
}

/// One-hot mask tensor `[N, 4, H, W]` from label maps of equal size.
pub fn mask_batch<F: Float>(labels: &[&crate::data::LabelMap]) -> Result<Tensor<F>> {
    let first = labels
        .first()
        .ok_or_else(|| Error::Precondition("empty label batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut all = Vec::with_capacity(labels.len() * h * w);
    for l in labels {
        if (l.height, l.width) != (h, w) {
            return Err(Error::Precondition("label maps in a batch differ in size".into()));
        }
        all.extend_from_slice(&l.data);
    }
    Ok(Tensor::one_hot(&all, labels.len(), NUM_CLASSES, h, w)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sdtnet_tensor::Parallelism;

    use super::*;

    fn tiny(size: usize) -> NetworkConfig {
        NetworkConfig {
            height: size,
            width: size,
            anatomy_channels: 4,
            n_z: 3,
            anatomy_widths: vec![4, 4],
            transformer_widths: vec![2, 2, 2, 2],
            transformer_bottleneck: 4,
            transformer_hidden: 6,
            transformer_code_channels: 2,
            modality_widths: vec![4],
            decoder_width: 4,
            segmentor_width: 4,
            discriminator_widths: vec![4],
            mi_widths: vec![4],
            leaky_slope: 0.2,
        }
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[n, 1, size, size], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn assert_one_hot(t: &Tensor<f64>) {
        let (n, c, h, w) = t.dims4().unwrap();
        let p = h * w;
        for b in 0..n {
            for i in 0..p {
                let mut sum = 0.0;
                for k in 0..c {
                    let v = t.data()[(b * c + k) * p + i];
                    assert!(v == 0.0 || v == 1.0);
                    sum += v;
                }
                assert_eq!(sum, 1.0);
            }
        }
    }

    #[test]
    fn output_shapes_and_binarity() {
        let bundle = NetworkBundle::<f64>::new(tiny(16), 1).unwrap();
        let g = Graph::inference(Parallelism::Sequential);
        let cx = bundle.bind(&g);
        let x = g.input(random_images(2, 16, 2));
        let s = cx.anatomy_encode(x).unwrap();
        assert_eq!(g.shape(s.hard), vec![2, 4, 16, 16]);
        assert_one_hot(&g.value(s.hard));
        let z = cx.modality_encode(x, s.hard, None).unwrap();
        assert_eq!(g.shape(z.sample), vec![2, 3]);
        assert_eq!(g.shape(cx.decode(s.hard, z.sample).unwrap()), vec![2, 1, 16, 16]);
        let y = cx.segment(s.hard).unwrap();
        let yv = g.value(y);
        for b in 0..2 {
            for i in 0..256 {
                let sum: f64 = (0..4).map(|k| yv.data()[(b * 4 + k) * 256 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
        let tr = cx.transform(s.hard, &[0.0, 0.2], &[0.5, 0.8]).unwrap();
        assert_eq!(g.shape(tr.hard), vec![2, 4, 16, 16]);
        assert_one_hot(&g.value(tr.hard));
        assert_eq!(g.shape(cx.discriminate(y).unwrap()), vec![2, 1]);
        assert_eq!(g.shape(cx.estimate_mi_code(x).unwrap()), vec![2, 3]);
    }

    #[test]
    fn transform_rejects_phases_past_the_cycle() {
        let bundle = NetworkBundle::<f64>::new(tiny(16), 1).unwrap();
        let g = Graph::inference(Parallelism::Sequential);
        let cx = bundle.bind(&g);
        let s = cx.anatomy_encode(g.input(random_images(1, 16, 3))).unwrap();
        assert!(matches!(cx.transform(s.hard, &[0.6], &[0.5]), Err(Error::Precondition(_))));
    }

    #[test]
    fn sizes_not_divisible_by_16_are_rejected() {
        assert!(NetworkBundle::<f64>::new(tiny(20), 0).is_err());
        let bundle = NetworkBundle::<f64>::new(tiny(16), 1).unwrap();
        let g = Graph::inference(Parallelism::Sequential);
        let x = g.input(random_images(1, 24, 0).reshape(&[1, 1, 24, 24]).unwrap());
        assert!(bundle.bind(&g).anatomy_encode(x).is_err());
    }

    #[test]
    fn reparameterisation() {
        let bundle = NetworkBundle::<f64>::new(tiny(16), 4).unwrap();
        let g = Graph::inference(Parallelism::Sequential);
        let cx = bundle.bind(&g);
        let x = g.input(random_images(1, 16, 5));
        let s = cx.anatomy_encode(x).unwrap().hard;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = cx.modality_encode(x, s, Some(Tensor::randn(&[1, 3], 1.0, &mut rng))).unwrap();
        let b = cx.modality_encode(x, s, Some(Tensor::randn(&[1, 3], 1.0, &mut rng))).unwrap();
        assert_eq!(*g.value(a.mean), *g.value(b.mean));
        assert_ne!(*g.value(a.sample), *g.value(b.sample));
        // variance -> 0: sample -> mean
        let mean = g.value(a.mean).to_f64_vec();
        let lv = g.constant(Tensor::full(&[1, 3], -200.0));
        let eps = g.constant(Tensor::randn(&[1, 3], 1.0, &mut rng));
        let sample = g.add(a.mean, g.mul(g.exp(g.scale(lv, 0.5)), eps).unwrap()).unwrap();
        for (u, v) in g.value(sample).to_f64_vec().iter().zip(&mean) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_uses_the_code_and_is_deterministic() {
        let bundle = NetworkBundle::<f64>::new(tiny(16), 7).unwrap();
        let g = Graph::inference(Parallelism::Sequential);
        let cx = bundle.bind(&g);
        let s = cx.anatomy_encode(g.input(random_images(1, 16, 8))).unwrap().hard;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z1 = g.constant(Tensor::randn(&[1, 3], 1.0, &mut rng));
        let z2 = g.constant(Tensor::randn(&[1, 3], 1.0, &mut rng));
        let a = g.value(cx.decode(s, z1).unwrap());
        let b = g.value(cx.decode(s, z2).unwrap());
        let again = g.value(cx.decode(s, z1).unwrap());
        assert_eq!(*a, *again);
        let diff: f64 = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).powi(2)).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn decoder_gradient_reaches_both_branches() {
        let bundle = NetworkBundle::<f64>::new(tiny(16), 10).unwrap();
        let g = Graph::new(Parallelism::Sequential);
        let cx = bundle.bind(&g);
        let x = g.input(random_images(2, 16, 11));
        let s = cx.anatomy_encode(x).unwrap().hard;
        let z = cx.modality_encode(x, s, None).unwrap().sample;
        let out = cx.decode(s, z).unwrap();
        let loss = g.mean(g.mul(out, out).unwrap());
        let grads = g.backward(loss);
        let norm = |c: Component| -> f64 {
            Networks::params_of(&bundle.params, c)
                .into_iter()
                .filter_map(|id| grads.param(id))
                .map(|t| t.norm().powi(2))
                .sum()
        };
        assert!(norm(Component::Anatomy) > 0.0, "no gradient on the factor path");
        assert!(norm(Component::Modality) > 0.0, "no gradient on the code path");
    }

    #[test]
    fn input_gradient_through_binarisation_is_nonzero() {
        let bundle = NetworkBundle::<f64>::new(tiny(16), 12).unwrap();
        let g = Graph::new(Parallelism::Sequential);
        let cx = bundle.bind(&g);
        let x = g.input(random_images(1, 16, 13));
        let s = cx.anatomy_encode(x).unwrap().hard;
        let w = g.constant(Tensor::randn(&[1, 4, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(14)));
        let loss = g.mean(g.mul(s, w).unwrap());
        let gx = g.backward(loss).get(x).unwrap().norm();
        assert!(gx > 0.0);
    }

    #[test]
    fn discriminator_input_gradient_is_finite() {
        let bundle = NetworkBundle::<f64>::new(tiny(16), 15).unwrap();
        let g = Graph::new(Parallelism::Sequential);
        let cx = bundle.bind(&g);
        let soft = Tensor::uniform(&[2, 4, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(16));
        let y = g.input(soft);
        let d = cx.discriminate(y).unwrap();
        let again = g.value(cx.discriminate(y).unwrap());
        assert_eq!(*g.value(d), *again);
        let grad = g.backward(g.mean(d));
        let gy = grad.get(y).unwrap();
        assert!(gy.all_finite() && gy.norm() > 0.0);
    }

    #[test]
    fn transformer_probe_scales_with_resolution() {
        let mut cfg = tiny(32);
        cfg.transformer_code_channels = 3;
        let bundle = NetworkBundle::<f64>::new(cfg, 17).unwrap();
        let g = Graph::inference(Parallelism::Sequential);
        let cx = bundle.bind(&g);
        let s = cx.anatomy_encode(g.input(random_images(1, 32, 18))).unwrap().hard;
        let out = cx.transform(s, &[0.1], &[0.3]).unwrap();
        assert_eq!(out.probe.bottleneck, vec![1, 4, 2, 2]);
        assert_eq!(out.probe.mlp_widths, vec![6, 6, 12]);
        assert_eq!(out.probe.code, vec![1, 3, 2, 2]);
        assert_eq!(out.probe.concat_channels, 7);
    }

    #[test]
    fn components_partition_the_parameters() {
        let bundle = NetworkBundle::<f32>::new(tiny(16), 0).unwrap();
        let total: usize = Component::ALL
            .iter()
            .map(|&c| Networks::params_of(&bundle.params, c).len())
            .sum();
        assert_eq!(total, bundle.params.len());
    }
}
