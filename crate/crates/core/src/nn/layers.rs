use rand::Rng;

use crate::error::Result;
use crate::param::{Ctx, Mode, Module, Param};
use crate::tensor::{Tensor, Var};

/// He fan-in scaled normal initialization.
pub fn he_normal<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Square-kernel convolution with "same" padding.
///
/// Layers feeding a normalization layer carry no bias; the norm's shift
/// takes its place.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(
                    &[cout, cin, kernel, kernel],
                    cin * kernel * kernel,
                    1.0,
                    rng,
                )?,
            ),
            bias: Some(Param::new(format!("{name}.bias"), Tensor::zeros([cout])?)),
            padding: kernel / 2,
        })
    }

    pub fn without_bias<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Conv2d {
            bias: None,
            ..Self::new(name, cin, cout, kernel, rng)?
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let bias = match &self.bias {
            Some(b) => ctx.param(b),
            None => ctx.input(Tensor::zeros([self.out_channels()])?),
        };
        x.conv2d(ctx.param(&self.weight), bias, self.padding)
    }

    pub fn zero_(&mut self) {
        self.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn set_mode(&mut self, _mode: Mode) {}
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(&[fan_in, fan_out], fan_in, gain, rng)?,
            ),
            bias: Some(Param::new(
                format!("{name}.bias"),
                Tensor::zeros([fan_out])?,
            )),
        })
    }

    pub fn without_bias<R: Rng + ?Sized>(
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Linear {
            bias: None,
            ..Self::new(name, fan_in, fan_out, gain, rng)?
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(ctx.param(&self.weight))?;
        match &self.bias {
            Some(b) => y.add(ctx.param(b).reshape(&[1, b.value.numel()])?),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn set_mode(&mut self, _mode: Mode) {}
}

/// Two constant channels holding row and column positions in `[-1, 1]`.
pub fn coord_maps(n: usize, h: usize, w: usize) -> Result<Tensor> {
    let lin = |i: usize, e: usize| {
        if e > 1 {
            2.0 * i as f64 / (e - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    Tensor::from_fn([n, 2, h, w], |k| {
        let ch = (k / (h * w)) % 2;
        let (y, x) = ((k / w) % h, k % w);
        if ch == 0 {
            lin(y, h)
        } else {
            lin(x, w)
        }
    })
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
