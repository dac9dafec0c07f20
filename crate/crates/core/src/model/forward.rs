use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::mask::{build_compression_mask, AttentionMask, SegmentLayout};
use crate::tensor::{Real, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Which weights get gradient tracking when bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradPolicy {
    None,
    Trainable,
    All,
}

/// Model weights recorded as leaves of one tape.
pub struct BoundParams<'p, T> {
    params: &'p ModelParams<T>,
    vars: Vec<Var>,
}

impl<'p, T: Real> BoundParams<'p, T> {
    pub fn bind(tape: &mut Tape<T>, params: &'p ModelParams<T>, policy: GradPolicy) -> Self {
        let vars = params
            .params()
            .iter()
            .map(|p| {
                let rg = match policy {
                    GradPolicy::None => false,
                    GradPolicy::Trainable => p.trainable,
                    GradPolicy::All => true,
                };
                tape.leaf(p.value.clone(), rg)
            })
            .collect();
        Self { params, vars }
    }

    /// Binds every weight as a constant except `index`, which is `var`.
    pub fn bind_replacing(tape: &mut Tape<T>, params: &'p ModelParams<T>, index: usize, var: Var) -> Self {
        let mut b = Self::bind(tape, params, GradPolicy::None);
        b.vars[index] = var;
        b
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.opt(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.params.position(name).map(|i| self.vars[i])
    }

    /// Leaf variables in parameter declaration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }
}

/// Overrides the layer-input hidden states of selected rows, used to replay
/// the dialogue with compression states held fixed.
#[derive(Clone, Debug)]
pub struct Injection<T> {
    pub rows: Vec<usize>,
    /// `per_layer[l]` holds the block-`l` input for `rows`, shape
    /// `rows.len() × d_model`.
    pub per_layer: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<'a, T> {
    pub positions: Option<&'a [usize]>,
    pub injection: Option<&'a Injection<T>>,
    /// Seed for dropout masks; dropout is off when `None`.
    pub dropout_seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `seq_len × vocab_text`
    pub logits: Var,
    /// Input of every block plus the output of the last one.
    pub hidden: Vec<Var>,
    /// Last hidden state after the final norm.
    pub final_hidden: Var,
    /// Attention probabilities, `[layer][head]`, each `seq_len × seq_len`.
    pub attention: Vec<Vec<Var>>,
}

fn linear<T: Real>(tape: &mut Tape<T>, b: &BoundParams<T>, x: Var, name: &str, lora_scale: f64) -> Result<Var> {
    let w = b.var(name)?;
    let y = tape.matmul(x, w)?;
    let (Some(a), Some(bb)) = (b.opt(&format!("{name}.lora_a")), b.opt(&format!("{name}.lora_b"))) else {
        return Ok(y);
    };
    let xa = tape.matmul(x, a)?;
    let xab = tape.matmul(xa, bb)?;
    let xab = tape.scale(xab, T::lit(lora_scale));
    tape.add(y, xab)
}

fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut Option<ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng.as_mut() else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let m = (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, m)?);
    tape.mul(x, m)
}

/// Runs the transformer over `tokens` under `mask`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    b: &BoundParams<T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    mask: &AttentionMask,
    opts: &ForwardOptions<T>,
) -> Result<ForwardOutput> {
    let len = tokens.len();
    if len > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: cfg.max_seq_len,
        });
    }
    if mask.size() != len {
        return Err(Error::Shape {
            op: "forward",
            lhs: vec![len],
            rhs: vec![mask.size(), mask.size()],
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.input_vocab()) {
        return Err(Error::VocabRange {
            id,
            size: cfg.input_vocab(),
        });
    }
    let default_pos: Vec<usize>;
    let positions = match opts.positions {
        Some(p) if p.len() == len => p,
        Some(p) => {
            return Err(Error::Shape {
                op: "forward",
                lhs: vec![len],
                rhs: vec![p.len()],
            })
        }
        None => {
            default_pos = (0..len).collect();
            &default_pos
        }
    };
    let mut rng = opts
        .dropout_seed
        .filter(|_| cfg.dropout > 0.0)
        .map(ChaCha8Rng::seed_from_u64);

    let table = b.var("embed.tokens")?;
    let comp = b.var("embed.comp")?;
    let full_table = tape.concat_rows(&[table, comp])?;
    let mut x = tape.embedding(full_table, tokens)?;

    let mask_add = tape.constant(mask.additive());
    let dh = cfg.head_dim();
    let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
    let lora = cfg.lora_scale();
    let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
    let mut attention = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        if let Some(inj) = opts.injection {
            x = inject_rows(tape, x, inj, l)?;
        }
        hidden.push(x);
        let p = format!("layers.{l}");
        let h = tape.layer_norm(
            x,
            b.var(&format!("{p}.attn_norm.gain"))?,
            b.var(&format!("{p}.attn_norm.bias"))?,
            T::lit(LN_EPS),
        )?;
        let q = linear(tape, b, h, &format!("{p}.attn.q"), lora)?;
        let k = linear(tape, b, h, &format!("{p}.attn.k"), lora)?;
        let v = linear(tape, b, h, &format!("{p}.attn.v"), lora)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let qh = tape.rope(qh, positions, cfg.rope_base)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let kh = tape.rope(kh, positions, cfg.rope_base)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let scores = tape.add(scores, mask_add)?;
            let pr = tape.softmax(scores);
            probs.push(pr);
            heads.push(tape.matmul(pr, vh)?);
        }
        attention.push(probs);
        let o = tape.concat_cols(&heads)?;
        let o = linear(tape, b, o, &format!("{p}.attn.o"), lora)?;
        let o = dropout(tape, o, cfg.dropout, &mut rng)?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(
            x,
            b.var(&format!("{p}.mlp_norm.gain"))?,
            b.var(&format!("{p}.mlp_norm.bias"))?,
            T::lit(LN_EPS),
        )?;
        let u = linear(tape, b, h, &format!("{p}.mlp.up"), lora)?;
        let u = tape.gelu(u);
        let dn = linear(tape, b, u, &format!("{p}.mlp.down"), lora)?;
        let dn = dropout(tape, dn, cfg.dropout, &mut rng)?;
        x = tape.add(x, dn)?;
    }
    hidden.push(x);
    let final_hidden = tape.layer_norm(
        x,
        b.var("final_norm.gain")?,
        b.var("final_norm.bias")?,
        T::lit(LN_EPS),
    )?;
    let logits = tape.matmul(final_hidden, b.var("head")?)?;
    Ok(ForwardOutput {
        logits,
        hidden,
        final_hidden,
        attention,
    })
}

fn inject_rows<T: Real>(tape: &mut Tape<T>, x: Var, inj: &Injection<T>, layer: usize) -> Result<Var> {
    let states = inj.per_layer.get(layer).ok_or_else(|| {
        Error::invalid("forward", format!("injection has no states for layer {layer}"))
    })?;
    let len = tape.value(x).rows();
    let fixed = tape.constant(states.clone());
    let stacked = tape.concat_rows(&[x, fixed])?;
    let mut index: Vec<usize> = (0..len).collect();
    for (j, &r) in inj.rows.iter().enumerate() {
        index[r] = len + j;
    }
    tape.gather_rows(stacked, &index)
}

/// Unit-norm embedding of an input payload: the payload followed by the
/// compression tokens, mean-pooled over the compression positions of the
/// final (normalized) hidden state. Returns a `1 × d_model` variable.
pub fn embed<T: Real>(
    tape: &mut Tape<T>,
    b: &BoundParams<T>,
    cfg: &ModelConfig,
    payload: &[usize],
) -> Result<Var> {
    let states = compression_states(tape, b, cfg, payload)?;
    let pooled = tape.mean_pool(states, 0)?;
    tape.l2_normalize(pooled)
}

/// Final-layer states at the compression positions, `K × d_model`.
pub fn compression_states<T: Real>(
    tape: &mut Tape<T>,
    b: &BoundParams<T>,
    cfg: &ModelConfig,
    payload: &[usize],
) -> Result<Var> {
    if payload.is_empty() {
        return Err(Error::invalid("embed", "empty payload"));
    }
    let mut tokens = payload.to_vec();
    tokens.extend(cfg.comp_ids());
    let layout = SegmentLayout::new(payload.len(), cfg.n_comp_tokens, 0)?;
    let mask = build_compression_mask(&layout);
    let out = forward(tape, b, cfg, &tokens, &mask, &ForwardOptions::default())?;
    tape.slice_rows(out.final_hidden, payload.len(), cfg.n_comp_tokens)
}

/// Embeddings of many payloads without gradient tracking, one row each.
pub fn embed_batch_values<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    payloads: &[Vec<usize>],
) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(payloads.len() * cfg.d_model);
    for p in payloads {
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, params, GradPolicy::None);
        let e = embed(&mut tape, &b, cfg, p)?;
        data.extend_from_slice(tape.value(e).data());
    }
    Tensor::new(vec![payloads.len(), cfg.d_model], data)
}
