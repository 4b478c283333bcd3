//! FiLM-style visual reasoning network: an unconditioned convolutional
//! stem, a core of residual blocks whose normalization is modulated by a
//! question embedding, and a classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gru::GruEncoder;
use super::layers::{coord_maps, Conv2d, Linear};
use crate::error::{Error, Result};
use crate::norm::{AffineKind, NormLayer, StatDomain, DEFAULT_EPS, DEFAULT_GROUPS};
use crate::param::{Ctx, Mode, Module, Param};
use crate::tensor::{Tensor, Var};

/// Which normalization each stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// Every conditional and regular BN replaced by its GN counterpart.
    AllGn,
    /// Conditional layers use GN; stem and classifier keep BN.
    GnBnStem,
    /// Conditional layers use GN; stem keeps BN; classifier hidden layer unnormalized.
    GnBnStemNoclf,
    /// Conditional batch normalization baseline.
    AllBn,
}

impl NormVariant {
    pub const ALL: [NormVariant; 4] = [
        NormVariant::AllGn,
        NormVariant::GnBnStem,
        NormVariant::GnBnStemNoclf,
        NormVariant::AllBn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormVariant::AllGn => "all_gn",
            NormVariant::GnBnStem => "gn_bn_stem",
            NormVariant::GnBnStemNoclf => "gn_bn_stem_noclf",
            NormVariant::AllBn => "all_bn",
        }
    }

    pub fn parse(s: &str) -> Option<NormVariant> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// `(stem, conditioned blocks, classifier hidden layer)` domains.
    pub fn domains(self, groups: usize) -> (StatDomain, StatDomain, Option<StatDomain>) {
        let gn = StatDomain::Group(groups);
        match self {
            NormVariant::AllGn => (gn, gn, Some(gn)),
            NormVariant::GnBnStem => (StatDomain::Batch, gn, Some(StatDomain::Batch)),
            NormVariant::GnBnStemNoclf => (StatDomain::Batch, gn, None),
            NormVariant::AllBn => (
                StatDomain::Batch,
                StatDomain::Batch,
                Some(StatDomain::Batch),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilmConfig {
    pub in_channels: usize,
    pub stem_layers: usize,
    /// Width of the stem and of every residual block.
    pub width: usize,
    pub num_blocks: usize,
    pub classifier_width: usize,
    pub fc_width: usize,
    pub num_answers: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub groups: usize,
    pub eps: f64,
    pub variant: NormVariant,
    /// Append row/column coordinate channels to the stem and block inputs.
    pub coord_maps: bool,
}

impl Default for FilmConfig {
    fn default() -> Self {
        FilmConfig {
            in_channels: 1,
            stem_layers: 2,
            width: 32,
            num_blocks: 4,
            classifier_width: 64,
            fc_width: 64,
            num_answers: 2,
            vocab_size: 14,
            embed_dim: 32,
            gru_hidden: 64,
            groups: DEFAULT_GROUPS,
            eps: DEFAULT_EPS,
            variant: NormVariant::AllBn,
            coord_maps: true,
        }
    }
}

/// `out = x + relu(cond_norm(conv3x3(relu(conv1x1(x))), c))`.
#[derive(Clone, Debug)]
pub struct FilmBlock {
    pub conv_1x1: Conv2d,
    pub conv_3x3: Conv2d,
    pub cond_norm: NormLayer,
    pub coord_maps: bool,
}

impl FilmBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        width: usize,
        cond_dim: usize,
        domain: StatDomain,
        eps: f64,
        coord_maps: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let cin = width + if coord_maps { 2 } else { 0 };
        Ok(FilmBlock {
            conv_1x1: Conv2d::new(&format!("{name}.conv_1x1"), cin, width, 1, rng)?,
            conv_3x3: Conv2d::without_bias(&format!("{name}.conv_3x3"), width, width, 3, rng)?,
            cond_norm: NormLayer::new(
                &format!("{name}.cond_norm"),
                width,
                domain,
                eps,
                AffineKind::Conditional { cond_dim },
            )?,
            coord_maps,
        })
    }

    pub fn forward<'t>(&mut self, ctx: &Ctx<'t>, x: Var<'t>, cond: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.conv_3x3.out_channels() {
            return Err(Error::ShapeMismatch {
                op: "film_block",
                lhs: shape,
                rhs: vec![self.conv_3x3.out_channels()],
            });
        }
        let input = if self.coord_maps {
            let coords = ctx.input(coord_maps(shape[0], shape[2], shape[3])?);
            Var::concat(&[x, coords], 1)?
        } else {
            x
        };
        let h = self.conv_1x1.forward(ctx, input)?.relu()?;
        let h = self.conv_3x3.forward(ctx, h)?;
        let h = self.cond_norm.forward(ctx, h, Some(cond))?.relu()?;
        x.add(h)
    }
}

impl Module for FilmBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv_1x1.visit(f);
        self.conv_3x3.visit(f);
        self.cond_norm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv_1x1.visit_mut(f);
        self.conv_3x3.visit_mut(f);
        self.cond_norm.visit_mut(f);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.cond_norm.set_mode(mode);
    }
}

#[derive(Clone, Debug)]
pub struct StemLayer {
    pub conv: Conv2d,
    pub norm: NormLayer,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub conv: Conv2d,
    pub hidden: Linear,
    pub norm: Option<NormLayer>,
    pub output: Linear,
}

/// Where a normalization layer sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stem,
    Block,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormInfo {
    pub name: String,
    pub stage: Stage,
    pub domain: StatDomain,
    pub conditional: bool,
}

#[derive(Clone, Debug)]
pub struct FilmNetwork {
    pub config: FilmConfig,
    pub encoder: GruEncoder,
    pub stem: Vec<StemLayer>,
    pub blocks: Vec<FilmBlock>,
    pub classifier: Classifier,
}

impl FilmNetwork {
    pub fn new<R: Rng + ?Sized>(config: FilmConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        if c.stem_layers == 0 || c.width == 0 || c.num_answers == 0 {
            return Err(Error::Config(
                "stem_layers, width and num_answers must be positive".into(),
            ));
        }
        let (stem_dom, block_dom, clf_dom) = c.variant.domains(c.groups);
        let extra = if c.coord_maps { 2 } else { 0 };
        let encoder = GruEncoder::new("encoder", c.vocab_size, c.embed_dim, c.gru_hidden, rng)?;
        let stem = (0..c.stem_layers)
            .map(|i| {
                let cin = if i == 0 {
                    c.in_channels + extra
                } else {
                    c.width
                };
                let name = format!("stem.{i}");
                Ok(StemLayer {
                    conv: Conv2d::without_bias(&format!("{name}.conv"), cin, c.width, 3, rng)?,
                    norm: NormLayer::new(
                        &format!("{name}.norm"),
                        c.width,
                        stem_dom,
                        c.eps,
                        AffineKind::Fixed,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let blocks = (0..c.num_blocks)
            .map(|i| {
                FilmBlock::new(
                    &format!("blocks.{i}"),
                    c.width,
                    c.gru_hidden,
                    block_dom,
                    c.eps,
                    c.coord_maps,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let classifier = Classifier {
            conv: Conv2d::new("classifier.conv", c.width, c.classifier_width, 1, rng)?,
            hidden: if clf_dom.is_some() {
                Linear::without_bias(
                    "classifier.hidden",
                    c.classifier_width,
                    c.fc_width,
                    1.0,
                    rng,
                )?
            } else {
                Linear::new(
                    "classifier.hidden",
                    c.classifier_width,
                    c.fc_width,
                    1.0,
                    rng,
                )?
            },
            norm: clf_dom
                .map(|d| NormLayer::new("classifier.norm", c.fc_width, d, c.eps, AffineKind::Fixed))
                .transpose()?,
            // small output weights keep the initial prediction near uniform
            output: Linear::new("classifier.output", c.fc_width, c.num_answers, 0.1, rng)?,
        };
        Ok(FilmNetwork {
            config,
            encoder,
            stem,
            blocks,
            classifier,
        })
    }

    /// Logits `[N, A]`. Softmax is left to the loss.
    pub fn forward<'t>(
        &mut self,
        ctx: &Ctx<'t>,
        images: &Tensor,
        questions: &[Vec<usize>],
    ) -> Result<Var<'t>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "film_forward",
                lhs: shape.to_vec(),
                rhs: vec![self.config.in_channels],
            });
        }
        let n = shape[0];
        if questions.len() != n {
            return Err(Error::Data(format!(
                "{n} images but {} questions",
                questions.len()
            )));
        }
        let cond = self.encoder.forward(ctx, questions)?;
        let mut x = ctx.input(images.clone());
        if self.config.coord_maps {
            let coords = ctx.input(coord_maps(n, shape[2], shape[3])?);
            x = Var::concat(&[x, coords], 1)?;
        }
        for layer in &mut self.stem {
            let h = layer.conv.forward(ctx, x)?;
            x = layer.norm.forward(ctx, h, None)?.relu()?;
        }
        for block in &mut self.blocks {
            x = block.forward(ctx, x, cond)?;
        }
        let clf = &mut self.classifier;
        let h = clf.conv.forward(ctx, x)?.relu()?.max(&[2, 3])?;
        let h = h.reshape(&[n, self.config.classifier_width])?;
        let mut h = clf.hidden.forward(ctx, h)?;
        if let Some(norm) = clf.norm.as_mut() {
            let fc = self.config.fc_width;
            h = norm
                .forward(ctx, h.reshape(&[n, fc, 1, 1])?, None)?
                .reshape(&[n, fc])?;
        }
        clf.output.forward(ctx, h.relu()?)
    }

    /// Domain and affine kind of every normalization layer, in forward order.
    pub fn norm_layers(&self) -> Vec<NormInfo> {
        let info = |l: &NormLayer, stage| NormInfo {
            name: l.name.clone(),
            stage,
            domain: l.domain,
            conditional: l.is_conditional(),
        };
        let mut out: Vec<NormInfo> = self
            .stem
            .iter()
            .map(|s| info(&s.norm, Stage::Stem))
            .collect();
        out.extend(self.blocks.iter().map(|b| info(&b.cond_norm, Stage::Block)));
        out.extend(
            self.classifier
                .norm
                .iter()
                .map(|n| info(n, Stage::Classifier)),
        );
        out
    }
}

impl Module for FilmNetwork {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.encoder.visit(f);
        for s in &self.stem {
            s.conv.visit(f);
            s.norm.visit(f);
        }
        for b in &self.blocks {
            b.visit(f);
        }
        let c = &self.classifier;
        c.conv.visit(f);
        c.hidden.visit(f);
        if let Some(n) = &c.norm {
            n.visit(f);
        }
        c.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_mut(f);
        for s in &mut self.stem {
            s.conv.visit_mut(f);
            s.norm.visit_mut(f);
        }
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        let c = &mut self.classifier;
        c.conv.visit_mut(f);
        c.hidden.visit_mut(f);
        if let Some(n) = &mut c.norm {
            n.visit_mut(f);
        }
        c.output.visit_mut(f);
    }

    fn set_mode(&mut self, mode: Mode) {
        for s in &mut self.stem {
            s.norm.set_mode(mode);
        }
        for b in &mut self.blocks {
            b.set_mode(mode);
        }
        if let Some(n) = &mut self.classifier.norm {
            n.set_mode(mode);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: NormVariant) -> FilmConfig {
        FilmConfig {
            in_channels: 1,
            stem_layers: 1,
            width: 4,
            num_blocks: 2,
            classifier_width: 4,
            fc_width: 4,
            num_answers: 2,
            vocab_size: 6,
            embed_dim: 3,
            gru_hidden: 3,
            groups: 2,
            eps: 1e-5,
            variant,
            coord_maps: true,
        }
    }

    #[test]
    fn variant_wiring() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in NormVariant::ALL {
            let net = FilmNetwork::new(tiny(v), &mut rng).unwrap();
            let layers = net.norm_layers();
            let (stem, block, clf) = v.domains(2);
            for l in &layers {
                match l.stage {
                    Stage::Stem => assert!(l.domain == stem && !l.conditional),
                    Stage::Block => assert!(l.domain == block && l.conditional),
                    Stage::Classifier => assert!(Some(l.domain) == clf && !l.conditional),
                }
            }
            assert_eq!(
                layers.iter().any(|l| l.stage == Stage::Classifier),
                clf.is_some()
            );
        }
    }

    #[test]
    fn block_shape_preserved_and_zero_init_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for width in [4, 8] {
            let mut block =
                FilmBlock::new("b", width, 3, StatDomain::Group(2), 1e-5, true, &mut rng).unwrap();
            let x = Tensor::randn([2, width, 5, 5], 1.0, &mut rng).unwrap();
            let tape = crate::tensor::Tape::new();
            let ctx = Ctx::no_grad(&tape);
            let c = ctx.input(Tensor::zeros([3]).unwrap());
            let y = block.forward(&ctx, ctx.input(x.clone()), c).unwrap();
            assert_eq!(y.shape(), x.shape());
            block.conv_1x1.zero_();
            block.conv_3x3.zero_();
            let tape = crate::tensor::Tape::new();
            let ctx = Ctx::no_grad(&tape);
            let c = ctx.input(Tensor::zeros([3]).unwrap());
            let y = block.forward(&ctx, ctx.input(x.clone()), c).unwrap();
            assert_eq!(*y.value(), x);
        }
    }

    #[test]
    fn mismatched_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = FilmNetwork::new(tiny(NormVariant::AllGn), &mut rng).unwrap();
        let tape = crate::tensor::Tape::new();
        let ctx = Ctx::no_grad(&tape);
        let images = Tensor::zeros([2, 1, 4, 4]).unwrap();
        assert!(net.forward(&ctx, &images, &[vec![0, 1, 2]]).is_err());
        assert!(net
            .forward(&ctx, &images, &[vec![0, 1, 2], vec![3, 4, 5]])
            .is_ok());
    }
}
