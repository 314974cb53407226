//! Pre-norm self-attention encoder/decoder whose layer stacks feed the aggregators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{Aggregator, AggregatorConfig, LayerStack};
use crate::data::{Batch, EOS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear};
use crate::param::{normal, ParamId, ParamStore};
use crate::routing::RoutingState;
use crate::tensor::Tensor;

const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Layers per side.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest token sequence either side accepts, BOS/EOS included.
    pub max_len: usize,
    pub aggregate_encoder: bool,
    pub aggregate_decoder: bool,
    pub aggregator: AggregatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            vocab_size: 16,
            max_len: 16,
            aggregate_encoder: true,
            aggregate_decoder: true,
            aggregator: AggregatorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                out.push(format!("model.{name}: must be at least 1"));
            }
        }
        if self.heads > 0 && !self.d_model.is_multiple_of(self.heads) {
            out.push(format!(
                "model.heads: d_model = {} is not divisible by heads = {}",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size <= crate::data::FIRST_TOKEN {
            out.push(format!(
                "model.vocab_size: must exceed the {} reserved ids",
                crate::data::FIRST_TOKEN
            ));
        }
        out.extend(self.aggregator.problems(self.d_model, "model.aggregator"));
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// `table[p][2i] = sin(p / 10000^(2i/d))`, `table[p][2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    Tensor::from_fn([len, d], |idx| {
        let (p, k) = (idx / d, idx % d);
        let rate = 10000f64.powf((k - k % 2) as f64 / d as f64);
        let angle = p as f64 / rate;
        if k % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B·J_tgt, vocab]`
    pub logits: Var,
    pub encoder_routing: Option<RoutingState>,
    pub decoder_routing: Option<RoutingState>,
}

/// Structure of the model. Parameter values live in a separate [`ParamStore`],
/// so a built model is immutable and can be shared across threads.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    config: ModelConfig,
    src_embed: ParamId,
    tgt_embed: ParamId,
    positions: Tensor,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: LayerNorm,
    dec_norm: LayerNorm,
    out: Linear,
    enc_agg: Option<Aggregator>,
    dec_agg: Option<Aggregator>,
}

impl Seq2Seq {
    /// Builds the model and initialises its parameters from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Seq2Seq, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v) = (config.d_model, config.vocab_size);
        let s = &mut store;
        let attention =
            |s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| -> Result<Attention> {
                Ok(Attention {
                    q: Linear::new(s, rng, &format!("{name}.q"), d, d, true)?,
                    k: Linear::new(s, rng, &format!("{name}.k"), d, d, true)?,
                    v: Linear::new(s, rng, &format!("{name}.v"), d, d, true)?,
                    o: Linear::new(s, rng, &format!("{name}.o"), d, d, true)?,
                })
            };
        let feed_forward =
            |s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| -> Result<FeedForward> {
                Ok(FeedForward {
                    inner: Linear::new(s, rng, &format!("{name}.inner"), d, config.d_ff, true)?,
                    outer: Linear::new(s, rng, &format!("{name}.outer"), config.d_ff, d, true)?,
                })
            };
        let src_embed = s.add("enc.embed", normal(&mut rng, &[v, d], 1.0))?;
        let tgt_embed = s.add("dec.embed", normal(&mut rng, &[v, d], 1.0))?;
        let mut encoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                ln_attn: LayerNorm::new(s, &format!("{p}.ln_attn"), d)?,
                attn: attention(s, &mut rng, &format!("{p}.attn"))?,
                ln_ffn: LayerNorm::new(s, &format!("{p}.ln_ffn"), d)?,
                ffn: feed_forward(s, &mut rng, &format!("{p}.ffn"))?,
            });
        }
        let mut decoder = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderLayer {
                ln_self: LayerNorm::new(s, &format!("{p}.ln_self"), d)?,
                self_attn: attention(s, &mut rng, &format!("{p}.self"))?,
                ln_cross: LayerNorm::new(s, &format!("{p}.ln_cross"), d)?,
                cross_attn: attention(s, &mut rng, &format!("{p}.cross"))?,
                ln_ffn: LayerNorm::new(s, &format!("{p}.ln_ffn"), d)?,
                ffn: feed_forward(s, &mut rng, &format!("{p}.ffn"))?,
            });
        }
        let enc_norm = LayerNorm::new(s, "enc.ln_final", d)?;
        let dec_norm = LayerNorm::new(s, "dec.ln_final", d)?;
        let out = Linear::new(s, &mut rng, "out", d, v, true)?;
        // Aggregator parameters draw from their own stream so that toggling
        // placement leaves every other parameter unchanged.
        let mut agg_rng = ChaCha8Rng::seed_from_u64(seed);
        agg_rng.set_stream(1);
        let enc_agg = if config.aggregate_encoder {
            Some(Aggregator::new(
                s,
                &mut agg_rng,
                "agg.enc",
                config.layers,
                d,
                &config.aggregator,
            )?)
        } else {
            None
        };
        let dec_agg = if config.aggregate_decoder {
            Some(Aggregator::new(
                s,
                &mut agg_rng,
                "agg.dec",
                config.layers,
                d,
                &config.aggregator,
            )?)
        } else {
            None
        };
        let model = Seq2Seq {
            config: config.clone(),
            src_embed,
            tgt_embed,
            positions: sinusoidal_positions(config.max_len, d),
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            out,
            enc_agg,
            dec_agg,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        table: ParamId,
        tokens: &[usize],
        len: usize,
    ) -> Result<Var> {
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let t = g.param(store, table);
        let e = g.gather_rows(t, tokens)?;
        let d = self.config.d_model;
        let rows = tokens.len() / len.max(1);
        let pos = Tensor::from_fn([rows * len, d], |i| {
            self.positions.data()[(i / d % len) * d + i % d]
        });
        let pos = g.constant(pos);
        g.add(e, pos)
    }

    /// Multi-head attention of `x[B·Jq, d]` over `mem[B·Jk, d]`; `mask[B, Jq, Jk]`
    /// is additive.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        a: &Attention,
        x: Var,
        mem: Var,
        mask: &Tensor,
        b: usize,
        jq: usize,
        jk: usize,
    ) -> Result<Var> {
        let (d, h) = (self.config.d_model, self.config.heads);
        let dh = d / h;
        let split = |g: &mut Graph, t: Var, j: usize| -> Result<Var> {
            let t = g.reshape(t, [b, j, h, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, [b * h, j, dh])
        };
        let q = a.q.forward(g, store, x)?;
        let k = a.k.forward(g, store, mem)?;
        let v = a.v.forward(g, store, mem)?;
        let (q, k, v) = (split(g, q, jq)?, split(g, k, jk)?, split(g, v, jk)?);
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = g.reshape(scores, [b, h, jq, jk])?;
        let m = g.constant(mask.reshaped([b, 1, jq, jk])?);
        let scores = g.add(scores, m)?;
        let probs = g.softmax(scores, 3)?;
        let probs = g.reshape(probs, [b * h, jq, jk])?;
        let ctx = g.bmm(probs, v, false)?;
        let ctx = g.reshape(ctx, [b, h, jq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, [b * jq, d])?;
        a.o.forward(g, store, ctx)
    }

    fn feed_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: &FeedForward,
        x: Var,
    ) -> Result<Var> {
        let h = f.inner.forward(g, store, x)?;
        let h = g.relu(h);
        f.outer.forward(g, store, h)
    }

    /// Encoder hidden states `H¹..H^L`, each `[B·J_src, d]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<LayerStack> {
        let (b, j) = (batch.size, batch.src_len);
        let mask = Tensor::from_fn([b, j, j], |i| {
            let (bi, k) = (i / (j * j), i % j);
            if batch.src_mask[bi * j + k] {
                0.0
            } else {
                MASKED
            }
        });
        let mut x = self.embed(g, store, self.src_embed, &batch.src, j)?;
        let mut layers = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let n = layer.ln_attn.forward(g, store, x)?;
            let a = self.attend(g, store, &layer.attn, n, n, &mask, b, j, j)?;
            x = g.add(x, a)?;
            let n = layer.ln_ffn.forward(g, store, x)?;
            let f = self.feed_forward(g, store, &layer.ffn, n)?;
            x = g.add(x, f)?;
            layers.push(x);
        }
        LayerStack::new(g, layers)
    }

    /// Decoder hidden states given the encoder memory `[B·J_src, d]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        memory: Var,
    ) -> Result<LayerStack> {
        let (b, js, jt) = (batch.size, batch.src_len, batch.tgt_len);
        let self_mask = Tensor::from_fn([b, jt, jt], |i| {
            let (bi, q, k) = (i / (jt * jt), i / jt % jt, i % jt);
            if k <= q && batch.tgt_mask[bi * jt + k] {
                0.0
            } else {
                MASKED
            }
        });
        let cross_mask = Tensor::from_fn([b, jt, js], |i| {
            let (bi, k) = (i / (jt * js), i % js);
            if batch.src_mask[bi * js + k] {
                0.0
            } else {
                MASKED
            }
        });
        let mut x = self.embed(g, store, self.tgt_embed, &batch.tgt_in, jt)?;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let n = layer.ln_self.forward(g, store, x)?;
            let a = self.attend(g, store, &layer.self_attn, n, n, &self_mask, b, jt, jt)?;
            x = g.add(x, a)?;
            let n = layer.ln_cross.forward(g, store, x)?;
            let a = self.attend(
                g,
                store,
                &layer.cross_attn,
                n,
                memory,
                &cross_mask,
                b,
                jt,
                js,
            )?;
            x = g.add(x, a)?;
            let n = layer.ln_ffn.forward(g, store, x)?;
            let f = self.feed_forward(g, store, &layer.ffn, n)?;
            x = g.add(x, f)?;
            layers.push(x);
        }
        LayerStack::new(g, layers)
    }

    fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        agg: Option<&Aggregator>,
        stack: &LayerStack,
    ) -> Result<(Var, Option<RoutingState>)> {
        match agg {
            Some(a) => {
                let out = a.aggregate(g, store, stack)?;
                Ok((out.output, out.routing))
            }
            None => Ok((stack.top(), None)),
        }
    }

    /// Encoder output fed to every decoder layer's cross-attention.
    pub fn memory(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<(Var, Option<RoutingState>)> {
        let stack = self.encode(g, store, batch)?;
        let (fused, routing) = self.fuse(g, store, self.enc_agg.as_ref(), &stack)?;
        Ok((self.enc_norm.forward(g, store, fused)?, routing))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<ForwardOutput> {
        let (memory, encoder_routing) = self.memory(g, store, batch)?;
        let stack = self.decode(g, store, batch, memory)?;
        let (fused, decoder_routing) = self.fuse(g, store, self.dec_agg.as_ref(), &stack)?;
        let top = self.dec_norm.forward(g, store, fused)?;
        Ok(ForwardOutput {
            logits: self.out.forward(g, store, top)?,
            encoder_routing,
            decoder_routing,
        })
    }

    /// Forward pass that never consults the aggregators and reads the top
    /// layer of each stack directly.
    pub fn forward_plain(&self, g: &mut Graph, store: &ParamStore, batch: &Batch) -> Result<Var> {
        let enc = self.encode(g, store, batch)?;
        let memory = self.enc_norm.forward(g, store, enc.top())?;
        let dec = self.decode(g, store, batch, memory)?;
        let top = self.dec_norm.forward(g, store, dec.top())?;
        self.out.forward(g, store, top)
    }

    /// Mean cross-entropy over the non-padding target tokens.
    pub fn loss(&self, g: &mut Graph, logits: Var, batch: &Batch) -> Result<Var> {
        let lp = g.log_softmax(logits, 1)?;
        let picked = g.pick(lp, &batch.tgt_out)?;
        let count = batch.target_tokens().max(1) as f64;
        let weights = Tensor::from_fn([batch.tgt_mask.len()], |i| {
            if batch.tgt_mask[i] {
                -1.0 / count
            } else {
                0.0
            }
        });
        let w = g.constant(weights);
        let nll = g.mul(picked, w)?;
        Ok(g.sum(nll))
    }

    /// Returns `(loss, correct target tokens, total target tokens)` without
    /// keeping any gradient record.
    pub fn evaluate(&self, store: &ParamStore, batch: &Batch) -> Result<(f64, usize, usize)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, batch)?;
        let loss = self.loss(&mut g, out.logits, batch)?;
        let (correct, total) = token_matches(g.value(out.logits), batch);
        Ok((g.value(loss).item(), correct, total))
    }

    /// Greedy decoding of one source sequence, stopping at EOS or once the
    /// decoder input is `max_len` long.
    pub fn greedy_decode(&self, store: &ParamStore, src: &[usize]) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = Vec::new();
        let mut g = Graph::new();
        let probe = Batch::from_pairs(&[(src.to_vec(), vec![])]);
        let (memory, _) = self.memory(&mut g, store, &probe)?;
        while out.len() < self.config.max_len {
            let batch = Batch::from_pairs(&[(src.to_vec(), out.clone())]);
            let stack = self.decode(&mut g, store, &batch, memory)?;
            let (fused, _) = self.fuse(&mut g, store, self.dec_agg.as_ref(), &stack)?;
            let top = self.dec_norm.forward(&mut g, store, fused)?;
            let last = g.slice(top, 0, batch.tgt_len - 1, 1)?;
            let logits = self.out.forward(&mut g, store, last)?;
            let next = argmax(g.value(logits).data());
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced `(correct, total)` over non-padding target positions.
pub fn token_matches(logits: &Tensor, batch: &Batch) -> (usize, usize) {
    let v = logits.shape()[1];
    let mut correct = 0;
    for (i, row) in logits.data().chunks(v).enumerate() {
        if batch.tgt_mask[i] && argmax(row) == batch.tgt_out[i] {
            correct += 1;
        }
    }
    (correct, batch.target_tokens())
}
