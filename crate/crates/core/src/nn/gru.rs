//! Gated recurrent unit question encoder.
//!
//! ```text
//! z  = sigmoid(x W_z + h U_z + b_z)
//! r  = sigmoid(x W_r + h U_r + b_r)
//! h~ = tanh(x W_h + (r * h) U_h + b_h)
//! h' = (1 - z) * h + z * h~
//! ```

use rand::Rng;

use super::layers::he_normal;
use crate::error::{Error, Result};
use crate::param::{Ctx, Mode, Module, Param};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Gate {
    /// `[E, H]`
    pub input: Param,
    /// `[H, H]`
    pub recurrent: Param,
    pub bias: Param,
}

impl Gate {
    fn new<R: Rng + ?Sized>(name: &str, embed: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Gate {
            input: Param::new(
                format!("{name}.input"),
                he_normal(&[embed, hidden], embed, 0.5, rng)?,
            ),
            recurrent: Param::new(
                format!("{name}.recurrent"),
                he_normal(&[hidden, hidden], hidden, 0.5, rng)?,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([hidden])?),
        })
    }

    fn pre<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let hidden = self.bias.value.numel();
        x.matmul(ctx.param(&self.input))?
            .add(h.matmul(ctx.param(&self.recurrent))?)?
            .add(ctx.param(&self.bias).reshape(&[1, hidden])?)
    }
}

#[derive(Clone, Debug)]
pub struct GruEncoder {
    /// `[V, E]`
    pub embedding: Param,
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
}

impl GruEncoder {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        vocab: usize,
        embed: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruEncoder {
            embedding: Param::new(
                format!("{name}.embedding"),
                Tensor::randn([vocab, embed], 1.0, rng)?,
            ),
            update: Gate::new(&format!("{name}.update"), embed, hidden, rng)?,
            reset: Gate::new(&format!("{name}.reset"), embed, hidden, rng)?,
            candidate: Gate::new(&format!("{name}.candidate"), embed, hidden, rng)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embedding.value.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.update.bias.value.numel()
    }

    /// Final hidden states `[N, H]` for a batch of equal-length sequences.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, sequences: &[Vec<usize>]) -> Result<Var<'t>> {
        let n = sequences.len();
        let hidden = self.hidden();
        let len = sequences.first().map_or(0, Vec::len);
        if let Some(bad) = sequences.iter().find(|s| s.len() != len) {
            return Err(Error::Data(format!(
                "sequences in a batch must share a length ({len} vs {})",
                bad.len()
            )));
        }
        let vocab = self.vocab();
        if let Some(&tok) = sequences.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange {
                index: tok,
                extent: vocab,
            });
        }
        let table = ctx.param(&self.embedding);
        let mut h = ctx.input(Tensor::zeros([n.max(1), hidden])?);
        for t in 0..len {
            let tokens: Vec<usize> = sequences.iter().map(|s| s[t]).collect();
            let x = table.index_select(&tokens)?;
            let z = self.update.pre(ctx, x, h)?.sigmoid()?;
            let r = self.reset.pre(ctx, x, h)?.sigmoid()?;
            let cand = self.candidate.pre(ctx, x, r.mul(h)?)?.tanh()?;
            h = h.add(z.mul(cand.sub(h)?)?)?;
        }
        Ok(h)
    }
}

impl Module for GruEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.embedding);
        for g in [&self.update, &self.reset, &self.candidate] {
            f(&g.input);
            f(&g.recurrent);
            f(&g.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.embedding);
        for g in [&mut self.update, &mut self.reset, &mut self.candidate] {
            f(&mut g.input);
            f(&mut g.recurrent);
            f(&mut g.bias);
        }
    }

    fn set_mode(&mut self, _mode: Mode) {}
}

/// Value-level encoding of one token sequence; returns `[H]`.
pub fn gru_encode(tokens: &[usize], enc: &GruEncoder) -> Result<Tensor> {
    let tape = Tape::new();
    let ctx = Ctx::no_grad(&tape);
    let h = enc.forward(&ctx, &[tokens.to_vec()])?;
    h.value().reshape([enc.hidden()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_sequence_is_zero_state() {
        let enc = GruEncoder::new("q", 5, 3, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(gru_encode(&[], &enc).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn zero_parameters_stay_at_zero() {
        let mut enc = GruEncoder::new("q", 5, 3, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        enc.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
        assert_eq!(gru_encode(&[2], &enc).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let enc = GruEncoder::new("q", 5, 3, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            gru_encode(&[5], &enc),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn hidden_state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = GruEncoder::new("q", 4, 3, 5, &mut rng).unwrap();
        enc.visit_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v *= 3.0));
        let seq: Vec<usize> = (0..20).map(|i| i % 4).collect();
        for len in 1..seq.len() {
            let h = gru_encode(&seq[..len], &enc).unwrap();
            assert!(h.data().iter().all(|v| v.abs() < 1.0));
        }
    }
}
