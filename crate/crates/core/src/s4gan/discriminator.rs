use rand::RngCore;
use semiseg_nn::{Conv2d, ConvSpec, Graph, Linear, ParamSet, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    /// Output channels of the four 4×4 stride-2 convolutions.
    pub widths: [usize; 4],
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl DiscriminatorConfig {
    /// Full-size widths {64, 128, 256, 512}, leaky slope 0.2, dropout 0.5.
    pub fn standard(num_classes: usize) -> Self {
        Self::scaled(num_classes, 64)
    }

    /// Same shape with the first width set to `base`, doubling per stage.
    pub fn scaled(num_classes: usize, base: usize) -> Self {
        Self {
            num_classes,
            widths: [base, 2 * base, 4 * base, 8 * base],
            leaky_slope: 0.2,
            dropout: 0.5,
        }
    }

    /// Input channels: class maps concatenated with the RGB image.
    pub fn in_channels(&self) -> usize {
        self.num_classes + 3
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[3]
    }
}

/// Output of a recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// `[N, 1]`, sigmoid probabilities of "ground truth".
    pub score: Var,
    /// `[N, F]` globally pooled features that feed the scalar head.
    pub features: Var,
}

/// Anything that scores segmentation/image pairs and exposes pooled features.
/// Implemented by [`Discriminator`]; tests substitute fixed features.
pub trait Critic {
    /// Evaluation-mode scores and features for `seg ⊕ image`.
    fn critique(&self, seg: &Tensor, image: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// Image-wise discriminator: four strided convolutions with leaky ReLU and
/// dropout, global average pooling, and a fully connected scalar head.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    convs: [Conv2d; 4],
    head: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if config.widths.contains(&0) || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Architecture(format!(
                "invalid discriminator config {config:?}"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init, 1);
        let mut p = ParamSet::new();
        let spec = ConvSpec::new(2, 1);
        let mut in_c = config.in_channels();
        let convs = std::array::from_fn(|i| {
            let c = Conv2d::new(
                &mut p,
                &format!("conv{}", i + 1),
                in_c,
                config.widths[i],
                4,
                spec,
                &mut rng,
            );
            in_c = config.widths[i];
            c
        });
        let head = Linear::new(&mut p, "head", config.feature_dim(), 1, &mut rng);
        Ok(Self {
            config,
            params: p,
            convs,
            head,
        })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamSet) -> Result<Self> {
        let mut d = Self::new(config, 0)?;
        if !d.params.same_layout(&params) {
            return Err(Error::Architecture(
                "discriminator parameters do not match config".into(),
            ));
        }
        d.params = params;
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Record `D(seg ⊕ image)`. Dropout is active only when `dropout_rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        seg: Var,
        image: Var,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<DiscOutput> {
        let seg_shape = g.value(seg).shape();
        if seg_shape.len() != 4 || seg_shape[1] != self.config.num_classes {
            return Err(Error::Shape {
                what: "discriminator segmentation input",
                expected: vec![0, self.config.num_classes, 0, 0],
                got: seg_shape.to_vec(),
            });
        }
        let mut x = g.concat_channels(seg, image)?;
        for conv in &self.convs {
            x = conv.forward(g, vars, x)?;
            x = g.leaky_relu(x, self.config.leaky_slope);
            if let Some(rng) = dropout_rng.as_deref_mut() {
                x = g.dropout(x, self.config.dropout, rng);
            }
        }
        let features = g.global_avg_pool(x)?;
        let logit = self.head.forward(g, vars, features)?;
        let score = g.sigmoid(logit);
        Ok(DiscOutput { score, features })
    }
}

impl Critic for Discriminator {
    fn critique(&self, seg: &Tensor, image: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let s = g.input(seg.clone());
        let i = g.input(image.clone());
        let out = self.forward(&mut g, &vars, s, i, None)?;
        Ok((
            g.value(out.score).data().to_vec(),
            g.value(out.features).clone(),
        ))
    }
}

/// Scores in (0, 1) and pooled features of `seg ⊕ image`, evaluation mode.
pub fn discriminate(
    disc: &impl Critic,
    seg: &Tensor,
    image: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    disc.critique(seg, image)
}
