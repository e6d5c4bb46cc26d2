//! The trainable denoiser: a two-level convolutional U-Net conditioned on the
//! diffusion step and a task switch.
//!
//! ```text
//! input (noise ++ image, or image only)
//!   enc1: conv3x3 -> +cond -> silu -> conv3x3 -> silu          (H,   W,   w0)  -> skip1
//!   enc2: conv3x3/2 -> +cond -> silu -> conv3x3 -> silu        (H/2, W/2, w1)  -> skip2
//!   mid:  conv3x3/2 -> +cond -> silu -> conv3x3 -> silu        (H/4, W/4, wb)
//!   up2:  conv(up2x(mid)) + conv(skip2) -> +cond -> silu -> conv3x3 -> silu
//!   up1:  conv(up2x(up2)) + conv(skip1) -> +cond -> silu -> conv3x3 -> silu
//!   out:  conv3x3 -> annotation channels
//! ```
//!
//! Skip concatenation is written as a sum of two convolutions, which is the
//! same linear map as convolving the concatenated tensor. Conditioning is a
//! per-channel bias projected from `silu(time_mlp(sin(t)) + pe(switch))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Broadcast, ParamStore, Tape, Var};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_grid, Grid, RandomSource};

/// Whether the noisy annotation is part of the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Noise concatenated to the image; stochastic predictions.
    Generative,
    /// Image only; deterministic predictions.
    Discriminative,
}

/// Which output the network is asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSwitch {
    /// Reconstruct the input image.
    Reconstruct,
    /// Predict the annotation.
    Annotate,
    /// Additional annotation tasks, numbered from 0.
    Extra(u32),
}

impl TaskSwitch {
    pub fn id(self) -> u32 {
        match self {
            TaskSwitch::Reconstruct => 0,
            TaskSwitch::Annotate => 1,
            TaskSwitch::Extra(k) => 2 + k,
        }
    }
}

/// First-layer initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Fresh,
    /// Annotation-channel kernels copy the image-channel kernels and the whole
    /// first layer is halved, so activations keep their image-only scale.
    DuplicatedInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub image_channels: usize,
    pub annotation_channels: usize,
    /// Channel widths of the two resolution levels.
    pub widths: [usize; 2],
    pub bottleneck: usize,
    pub embed_dim: usize,
    pub variant: Variant,
    /// Largest valid diffusion step.
    pub total_steps: usize,
    /// Number of switch ids understood by the net (2 = reconstruct + annotate).
    pub task_count: u32,
    /// Base of the sinusoidal encoders.
    pub encoding_base: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_channels: 3,
            annotation_channels: 3,
            widths: [16, 32],
            bottleneck: 64,
            embed_dim: 32,
            variant: Variant::Generative,
            total_steps: 1000,
            task_count: 2,
            encoding_base: 10_000.0,
        }
    }
}

impl NetConfig {
    pub fn input_channels(&self) -> usize {
        match self.variant {
            Variant::Generative => self.annotation_channels + self.image_channels,
            Variant::Discriminative => self.image_channels,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.bottleneck == 0 || self.image_channels == 0 || self.annotation_channels == 0
        {
            return Err(Error::InvalidArgument("network widths and channel counts must be >= 1".into()));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("embed_dim must be even, got {}", self.embed_dim)));
        }
        if self.total_steps == 0 || self.task_count == 0 {
            return Err(Error::InvalidArgument("total_steps and task_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// `[sin(v f_0), .., sin(v f_{d/2-1}), cos(v f_0), ..]` with
/// `f_i = base^(-i / (d/2))`.
pub fn sinusoidal_encoding(value: f64, dim: usize, base: f64) -> Result<Grid> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("encoding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let f = base.powf(-(i as f64) / half as f64);
        data[i] = (value * f).sin();
        data[half + i] = (value * f).cos();
    }
    Grid::from_vec(1, 1, dim, data)
}

/// Positional encoding of a switch id; added to the time embedding.
pub fn switch_embedding(s: TaskSwitch, cfg: &NetConfig) -> Result<Grid> {
    if s.id() >= cfg.task_count {
        return Err(Error::InvalidArgument(format!("switch id {} unknown to a {}-task net", s.id(), cfg.task_count)));
    }
    sinusoidal_encoding(s.id() as f64, cfg.embed_dim, cfg.encoding_base)
}

fn check_step(t: usize, cfg: &NetConfig) -> Result<()> {
    if t == 0 || t > cfg.total_steps {
        return Err(Error::InvalidArgument(format!("time step {t} outside 1..={}", cfg.total_steps)));
    }
    Ok(())
}

/// Conditioning stages, in forward order, with their channel counts.
fn cond_stages(cfg: &NetConfig) -> [(&'static str, usize); 5] {
    let [w0, w1] = cfg.widths;
    [("enc1", w0), ("enc2", w1), ("mid", cfg.bottleneck), ("up2", w1), ("up1", w0)]
}

/// The denoiser and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    cfg: NetConfig,
    params: ParamStore,
}

fn conv_shape(cin: usize, cout: usize) -> (usize, usize, usize) {
    (3, 3, cin * cout)
}

impl DenoiserNet {
    /// Fan-in scaled Gaussian weights, zero biases. Each parameter draws from
    /// its own named stream, so nets of different variants share every
    /// parameter except the first layer.
    pub fn init(cfg: NetConfig, rng: RandomSource, mode: InitMode) -> Result<Self> {
        cfg.validate()?;
        let [w0, w1] = cfg.widths;
        let (wb, e) = (cfg.bottleneck, cfg.embed_dim);
        let (ic, ac) = (cfg.image_channels, cfg.annotation_channels);
        let mut params = ParamStore::new();

        let weight = |name: &str, (h, w, c): (usize, usize, usize), fan_in: usize| -> Result<Grid> {
            let g = gaussian_grid(rng.derive_named(name), h, w, c)?;
            Ok(g.scale(1.0 / (fan_in as f64).sqrt()))
        };
        let add_w = |params: &mut ParamStore, name: &str, shape: (usize, usize, usize), fan_in: usize| -> Result<()> {
            let g = weight(name, shape, fan_in)?;
            params.insert(name, g).map(|_| ())
        };
        let bias = |params: &mut ParamStore, name: &str, c: usize| -> Result<()> {
            params.insert(name, Grid::zeros(1, 1, c)).map(|_| ())
        };

        add_w(&mut params, "time.w1", (e, e, 1), e)?;
        bias(&mut params, "time.b1", e)?;
        add_w(&mut params, "time.w2", (e, e, 1), e)?;
        bias(&mut params, "time.b2", e)?;
        for (stage, c) in cond_stages(&cfg) {
            add_w(&mut params, &format!("{stage}.cond.w"), (e, c, 1), e)?;
            bias(&mut params, &format!("{stage}.cond.b"), c)?;
        }

        // First layer.
        let first = match (mode, cfg.variant) {
            (InitMode::Fresh, _) => {
                weight("enc1.conv_in.w", conv_shape(cfg.input_channels(), w0), 9 * cfg.input_channels())?
            }
            (InitMode::DuplicatedInput, Variant::Generative) => {
                if ac != ic {
                    return Err(Error::InvalidArgument(format!(
                        "duplicated input needs equal image and annotation channels, got {ic} and {ac}"
                    )));
                }
                let img = weight("enc1.conv_in.w", conv_shape(ic, w0), 9 * ic)?;
                // Layout [ky][kx][cin][cout]; annotation channels come first.
                let cin = ac + ic;
                let mut full = Grid::zeros(3, 3, cin * w0);
                for tap in 0..9 {
                    for ci in 0..ic {
                        for co in 0..w0 {
                            let v = 0.5 * img.data()[(tap * ic + ci) * w0 + co];
                            full.data_mut()[(tap * cin + ci) * w0 + co] = v;
                            full.data_mut()[(tap * cin + ac + ci) * w0 + co] = v;
                        }
                    }
                }
                full
            }
            (InitMode::DuplicatedInput, Variant::Discriminative) => {
                return Err(Error::InvalidArgument(
                    "duplicated input initialization applies to generative nets only".into(),
                ))
            }
        };
        params.insert("enc1.conv_in.w", first)?;
        bias(&mut params, "enc1.conv_in.b", w0)?;

        let convs: [(&str, usize, usize); 9] = [
            ("enc1.conv", w0, w0),
            ("enc2.down", w0, w1),
            ("enc2.conv", w1, w1),
            ("mid.down", w1, wb),
            ("mid.conv", wb, wb),
            ("up2.up", wb, w1),
            ("up2.conv", w1, w1),
            ("up1.up", w1, w0),
            ("up1.conv", w0, w0),
        ];
        for (name, cin, cout) in convs {
            add_w(&mut params, &format!("{name}.w"), conv_shape(cin, cout), 9 * cin)?;
            bias(&mut params, &format!("{name}.b"), cout)?;
        }
        add_w(&mut params, "up2.skip.w", conv_shape(w1, w1), 9 * w1)?;
        add_w(&mut params, "up1.skip.w", conv_shape(w0, w0), 9 * w0)?;
        add_w(&mut params, "out.w", conv_shape(w0, ac), 9 * w0)?;
        bias(&mut params, "out.b", ac)?;

        Ok(DenoiserNet { cfg, params })
    }

    /// Rebuilds a net from stored parameters, checking every name and shape.
    pub fn from_params(cfg: NetConfig, params: ParamStore) -> Result<Self> {
        let reference = DenoiserNet::init(cfg.clone(), RandomSource::new(0, 0), InitMode::Fresh)?;
        if reference.params.len() != params.len() {
            return Err(Error::Format {
                what: "checkpoint parameters",
                detail: format!("expected {} tensors, found {}", reference.params.len(), params.len()),
            });
        }
        for (name, g) in reference.params.iter() {
            match params.by_name(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => {
                    return Err(Error::Format {
                        what: "checkpoint parameters",
                        detail: format!("{name}: expected {}, found {}", g.shape(), p.shape()),
                    })
                }
                None => return Err(Error::Format { what: "checkpoint parameters", detail: format!("missing {name}") }),
            }
        }
        Ok(DenoiserNet { cfg, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Raw sinusoidal encoding of step `t`.
    pub fn time_encoding(&self, t: usize) -> Result<Grid> {
        check_step(t, &self.cfg)?;
        sinusoidal_encoding(t as f64, self.cfg.embed_dim, self.cfg.encoding_base)
    }

    /// Learned time embedding of step `t` (encoding through the 2-layer map).
    pub fn time_embedding(&self, t: usize) -> Result<Grid> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let v = self.time_embedding_on(&mut tape, &vars, t)?;
        Ok(tape.value(v).clone())
    }

    fn register<'a>(&'a self, tape: &mut Tape<'a>) -> Vec<Var> {
        (0..self.params.len()).map(|id| tape.param(id, self.params.get(id))).collect()
    }

    fn p(&self, vars: &[Var], name: &str) -> Var {
        vars[self.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    fn time_embedding_on(&self, tape: &mut Tape<'_>, vars: &[Var], t: usize) -> Result<Var> {
        let enc = tape.leaf(self.time_encoding(t)?);
        let h = tape.matmul(enc, self.p(vars, "time.w1"))?;
        let h = tape.add(h, self.p(vars, "time.b1"))?;
        let h = tape.activation(h, Activation::Silu);
        let h = tape.matmul(h, self.p(vars, "time.w2"))?;
        tape.add(h, self.p(vars, "time.b2"))
    }

    fn conv_bias(&self, tape: &mut Tape<'_>, vars: &[Var], x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, self.p(vars, &format!("{name}.w")), stride, 1)?;
        tape.add_channel_bias(y, self.p(vars, &format!("{name}.b")))
    }

    fn condition(&self, tape: &mut Tape<'_>, vars: &[Var], x: Var, cond: Var, stage: &str) -> Result<Var> {
        let b = tape.matmul(cond, self.p(vars, &format!("{stage}.cond.w")))?;
        let b = tape.add(b, self.p(vars, &format!("{stage}.cond.b")))?;
        let x = tape.add_channel_bias(x, b)?;
        Ok(tape.activation(x, Activation::Silu))
    }

    /// Builds one forward pass on `tape` and returns the output node.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        noisy: Option<&Grid>,
        image: &Grid,
        t: usize,
        switch: TaskSwitch,
    ) -> Result<Var> {
        let input = self.assemble_input(noisy, image)?;
        if input.height() % 4 != 0 || input.width() % 4 != 0 {
            return Err(Error::shape("denoiser input", "height and width divisible by 4", input.shape()));
        }
        let vars = self.register(tape);
        let silu = Activation::Silu;

        let temb = self.time_embedding_on(tape, &vars, t)?;
        let sw = tape.leaf(switch_embedding(switch, &self.cfg)?);
        let cond = tape.add(temb, sw)?;
        let cond = tape.activation(cond, silu);

        let x = tape.leaf(input);
        let h = self.conv_bias(tape, &vars, x, "enc1.conv_in", 1)?;
        let h = self.condition(tape, &vars, h, cond, "enc1")?;
        let h = self.conv_bias(tape, &vars, h, "enc1.conv", 1)?;
        let skip1 = tape.activation(h, silu);

        let h = self.conv_bias(tape, &vars, skip1, "enc2.down", 2)?;
        let h = self.condition(tape, &vars, h, cond, "enc2")?;
        let h = self.conv_bias(tape, &vars, h, "enc2.conv", 1)?;
        let skip2 = tape.activation(h, silu);

        let h = self.conv_bias(tape, &vars, skip2, "mid.down", 2)?;
        let h = self.condition(tape, &vars, h, cond, "mid")?;
        let h = self.conv_bias(tape, &vars, h, "mid.conv", 1)?;
        let mid = tape.activation(h, silu);

        let u = tape.broadcast(mid, Broadcast::Upsample(2))?;
        let u = self.conv_bias(tape, &vars, u, "up2.up", 1)?;
        let s = tape.conv2d(skip2, self.p(&vars, "up2.skip.w"), 1, 1)?;
        let h = tape.add(u, s)?;
        let h = self.condition(tape, &vars, h, cond, "up2")?;
        let h = self.conv_bias(tape, &vars, h, "up2.conv", 1)?;
        let up2 = tape.activation(h, silu);

        let u = tape.broadcast(up2, Broadcast::Upsample(2))?;
        let u = self.conv_bias(tape, &vars, u, "up1.up", 1)?;
        let s = tape.conv2d(skip1, self.p(&vars, "up1.skip.w"), 1, 1)?;
        let h = tape.add(u, s)?;
        let h = self.condition(tape, &vars, h, cond, "up1")?;
        let h = self.conv_bias(tape, &vars, h, "up1.conv", 1)?;
        let up1 = tape.activation(h, silu);

        self.conv_bias(tape, &vars, up1, "out", 1)
    }

    /// Network input: `noise ++ image` for generative nets, `image` otherwise.
    pub fn assemble_input(&self, noisy: Option<&Grid>, image: &Grid) -> Result<Grid> {
        image.ensure_channels(self.cfg.image_channels, "denoiser image")?;
        match (self.cfg.variant, noisy) {
            (Variant::Generative, Some(n)) => {
                n.ensure_channels(self.cfg.annotation_channels, "denoiser noisy annotation")?;
                Grid::concat_channels(&[n, image])
            }
            (Variant::Generative, None) => {
                Err(Error::InvalidArgument("generative denoiser needs a noisy annotation input".into()))
            }
            (Variant::Discriminative, None) => Ok(image.clone()),
            (Variant::Discriminative, Some(_)) => {
                Err(Error::InvalidArgument("discriminative denoiser takes no noise input".into()))
            }
        }
    }
}

impl Denoiser for DenoiserNet {
    fn variant(&self) -> Variant {
        self.cfg.variant
    }

    fn annotation_channels(&self) -> usize {
        self.cfg.annotation_channels
    }

    fn predict(&self, noisy: Option<&Grid>, image: &Grid, t: usize, switch: TaskSwitch) -> Result<Grid> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, noisy, image, t, switch)?;
        Ok(tape.value(out).clone())
    }
}
