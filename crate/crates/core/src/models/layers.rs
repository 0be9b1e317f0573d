//! Parameterized layer building blocks shared by the model definitions.

use rand_chacha::ChaCha8Rng;

use crate::numerics::{NodeId, NumericsError, Tape, Tensor};

use super::{kaiming, trunc_normal, Binding, ParamId, ParamStore};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn create(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming(rng, vec![cout, cin, k, k], cin * k * k));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Conv { w, b, stride, pad: k / 2 }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, NumericsError> {
        tape.conv2d(x, bind.node(self.w), bind.node(self.b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    /// Transformer-style init (truncated normal, sigma 0.02).
    pub fn create_tn(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), trunc_normal(rng, vec![din, dout], 0.02));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![dout]));
        Linear { w, b }
    }

    /// Fan-in scaled init for relu pipelines.
    pub fn create_kaiming(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming(rng, vec![din, dout], din));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![dout]));
        Linear { w, b }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, NumericsError> {
        tape.linear(x, bind.node(self.w), bind.node(self.b))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    pub fn create(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let g = store.add(
            format!("{name}.g"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("shape/data agree"),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![dim]));
        Norm { g, b }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, NumericsError> {
        tape.layer_norm(x, bind.node(self.g), bind.node(self.b), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn create(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Attention {
            q: Linear::create_tn(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::create_tn(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::create_tn(store, rng, &format!("{name}.v"), dim, dim),
            o: Linear::create_tn(store, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Self-attention over `x` of shape `[T, dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let q = self.q.forward(tape, bind, x)?;
        let k = self.k.forward(tape, bind, x)?;
        let v = self.v.forward(tape, bind, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale)?;
            let attn = tape.softmax(scaled, 1)?;
            heads_out.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(&heads_out, 1)?;
        self.o.forward(tape, bind, merged)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn create(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::create_tn(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::create_tn(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let h = self.fc1.forward(tape, bind, x)?;
        let g = tape.gelu(h)?;
        self.fc2.forward(tape, bind, g)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    mlp: Mlp,
}

impl Block {
    pub fn create(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Block {
            ln1: Norm::create(store, &format!("{name}.ln1"), dim),
            attn: Attention::create(store, rng, &format!("{name}.attn"), dim, heads),
            ln2: Norm::create(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::create(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let h = self.ln1.forward(tape, bind, x)?;
        let a = self.attn.forward(tape, bind, h)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, bind, x)?;
        let m = self.mlp.forward(tape, bind, h)?;
        tape.add(x, m)
    }
}
