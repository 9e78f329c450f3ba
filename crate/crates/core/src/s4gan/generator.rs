use semiseg_nn::{Conv2d, ConvSpec, Graph, ParamSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::sample::{images_to_tensor, ImageTensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width of the first stage; deeper stages use 2x and 4x.
    pub base_width: usize,
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.base_width == 0 {
            return Err(Error::Architecture(format!(
                "invalid generator config {self:?}"
            )));
        }
        if !self.height.is_multiple_of(8)
            || !self.width.is_multiple_of(8)
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::Architecture(format!(
                "generator input {}x{} must be a positive multiple of 8",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    stem: Conv2d,
    enc1: Conv2d,
    down2: Conv2d,
    enc2: Conv2d,
    down3: Conv2d,
    context: Conv2d,
    merge2: Conv2d,
    dec2: Conv2d,
    merge1: Conv2d,
    dec1: Conv2d,
    head: Conv2d,
}

/// Small encoder–decoder with skip connections. Logits are produced at half
/// resolution, upsampled bilinearly and normalized with a per-pixel softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamSet,
    layers: Layers,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let rng = &mut rng;
        let w = config.base_width;
        let mut p = ParamSet::new();
        let same = ConvSpec::new(1, 1);
        let down = ConvSpec::new(2, 1);
        let point = ConvSpec::new(1, 0);
        let layers = Layers {
            stem: Conv2d::new(&mut p, "stem", 3, w, 3, down, rng),
            enc1: Conv2d::new(&mut p, "enc1", w, w, 3, same, rng),
            down2: Conv2d::new(&mut p, "down2", w, 2 * w, 3, down, rng),
            enc2: Conv2d::new(&mut p, "enc2", 2 * w, 2 * w, 3, same, rng),
            down3: Conv2d::new(&mut p, "down3", 2 * w, 4 * w, 3, down, rng),
            context: Conv2d::new(
                &mut p,
                "context",
                4 * w,
                4 * w,
                3,
                ConvSpec::dilated(2, 2),
                rng,
            ),
            merge2: Conv2d::new(&mut p, "merge2", 6 * w, 2 * w, 1, point, rng),
            dec2: Conv2d::new(&mut p, "dec2", 2 * w, 2 * w, 3, same, rng),
            merge1: Conv2d::new(&mut p, "merge1", 3 * w, w, 1, point, rng),
            dec1: Conv2d::new(&mut p, "dec1", w, w, 3, same, rng),
            head: Conv2d::new(&mut p, "head", w, config.num_classes, 1, point, rng),
        };
        Ok(Self {
            config,
            params: p,
            layers,
        })
    }

    /// Rebuild from stored parameters; the layout must match `config`.
    pub fn from_params(config: GeneratorConfig, params: ParamSet) -> Result<Self> {
        let mut g = Self::new(config, 0)?;
        if !g.params.same_layout(&params) {
            return Err(Error::Architecture(
                "generator parameters do not match config".into(),
            ));
        }
        g.params = params;
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `images [N,3,H,W]` → per-pixel class probabilities `[N,C,H,W]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], images: Var) -> Result<Var> {
        let shape = g.value(images).shape();
        if shape.len() != 4 || shape[1..] != [3, self.config.height, self.config.width] {
            return Err(Error::Shape {
                what: "generator input",
                expected: vec![0, 3, self.config.height, self.config.width],
                got: shape.to_vec(),
            });
        }
        let l = &self.layers;
        let conv_relu = |g: &mut Graph, c: &Conv2d, x: Var| -> Result<Var> {
            let y = c.forward(g, vars, x)?;
            Ok(g.relu(y))
        };
        let x = conv_relu(g, &l.stem, images)?;
        let skip1 = conv_relu(g, &l.enc1, x)?;
        let x = conv_relu(g, &l.down2, skip1)?;
        let skip2 = conv_relu(g, &l.enc2, x)?;
        let x = conv_relu(g, &l.down3, skip2)?;
        let x = conv_relu(g, &l.context, x)?;
        let x = g.upsample2x(x)?;
        let x = g.concat_channels(x, skip2)?;
        let x = conv_relu(g, &l.merge2, x)?;
        let x = conv_relu(g, &l.dec2, x)?;
        let x = g.upsample2x(x)?;
        let x = g.concat_channels(x, skip1)?;
        let x = conv_relu(g, &l.merge1, x)?;
        let x = conv_relu(g, &l.dec1, x)?;
        let logits = l.head.forward(g, vars, x)?;
        let logits = g.upsample2x(logits)?;
        Ok(g.softmax_channels(logits)?)
    }

    /// Inference on a batch tensor without tracking gradients.
    pub fn segment_batch(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let x = g.input(images.clone());
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }

    /// Probability maps `[C,H,W]` for one image.
    pub fn segment(&self, image: &ImageTensor) -> Result<Tensor> {
        let batch = images_to_tensor(&[image])?;
        Ok(self.segment_batch(&batch)?.index(0)?)
    }
}
