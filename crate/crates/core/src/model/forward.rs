use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BoundParams, ModelConfig, ModelError, Variant};
use crate::encode::{EncodedSample, TokenType};
use crate::tensor::{Graph, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Source of the reparameterization noise for the VAE latent.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum LatentNoise {
    /// `z = mu`.
    #[default]
    Mean,
    /// Standard normal draws from a seeded generator.
    Seeded(u64),
    /// Explicit epsilon, one value per latent dimension.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOptions {
    pub noise: LatentNoise,
    /// Enables dropout (at the configured rate) with this seed.
    pub dropout_seed: Option<u64>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Every decoder output row, `[rows, V]`.
    pub logits: Var,
    /// Rows of `logits` aligned with [`Forward::targets`].
    pub predictions: Var,
    pub targets: Vec<u32>,
    pub mask: Vec<u8>,
    /// `(mu, logvar)` of the VAE posterior, each `[1, latent_dim]`.
    pub latent: Option<(Var, Var)>,
}

/// Next-token targets and loss weights, one per prediction row.
///
/// Decoder-only variants predict token `i` from row `i - 1`. The VAE decoder
/// has the latent in slot 0, so row `j` predicts conversation token `j`.
pub fn prediction_targets(sample: &EncodedSample, variant: Variant) -> (Vec<u32>, Vec<u8>) {
    let r = sample.ref_len;
    let start = match variant {
        Variant::Dec => 1.min(sample.len()),
        Variant::Nrc | Variant::S2s => (r + 1).min(sample.len()),
        Variant::Vae => r,
    };
    (sample.token_ids[start..].to_vec(), sample.loss_mask[start..].to_vec())
}

struct Ctx<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    p: &'a BoundParams,
    cfg: &'a ModelConfig,
    dropout: Option<ChaCha8Rng>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = self.p.var(&format!("{prefix}.w"))?;
        let b = self.p.var(&format!("{prefix}.b"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add_row(y, b)?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let gain = self.p.var(&format!("{prefix}.g"))?;
        let bias = self.p.var(&format!("{prefix}.b"))?;
        Ok(self.g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    fn drop(&mut self, x: Var) -> Result<Var, ModelError> {
        let rate = self.cfg.dropout;
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        Ok(self.g.mul(x, m)?)
    }

    fn embed(&mut self, ids: &[u32], types: &[TokenType], positions: &[u32]) -> Result<Var, ModelError> {
        let wte = self.p.var("wte")?;
        let wtt = self.p.var("wtt")?;
        let wpe = self.p.var("wpe")?;
        let type_ids: Vec<u32> = types.iter().map(|t| t.id()).collect();
        let tok = self.g.embedding(wte, ids)?;
        let ty = self.g.embedding(wtt, &type_ids)?;
        let pos = self.g.embedding(wpe, positions)?;
        let x = self.g.add(tok, ty)?;
        Ok(self.g.add(x, pos)?)
    }

    /// Multi-head attention of `q [T, h]` over `k, v [S, h]`.
    fn attend(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var, ModelError> {
        let d = self.cfg.head_dim();
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let qh = self.g.slice_cols(q, h * d, d)?;
            let kh = self.g.slice_cols(k, h * d, d)?;
            let vh = self.g.slice_cols(v, h * d, d)?;
            let s = self.g.matmul_bt(qh, kh)?;
            let s = self.g.scale(s, scale)?;
            let a = if causal {
                self.g.causal_softmax(s)?
            } else {
                self.g.softmax(s, 1)?
            };
            heads.push(self.g.matmul(a, vh)?);
        }
        Ok(self.g.concat_cols(&heads)?)
    }

    fn block(&mut self, x: Var, prefix: &str, causal: bool, memory: Option<Var>) -> Result<Var, ModelError> {
        let h = self.cfg.hidden_size;
        let a = self.norm(x, &format!("{prefix}.ln1"))?;
        let qkv = self.linear(a, &format!("{prefix}.attn.qkv"))?;
        let q = self.g.slice_cols(qkv, 0, h)?;
        let k = self.g.slice_cols(qkv, h, h)?;
        let v = self.g.slice_cols(qkv, 2 * h, h)?;
        let att = self.attend(q, k, v, causal)?;
        let att = self.linear(att, &format!("{prefix}.attn.proj"))?;
        let att = self.drop(att)?;
        let mut x = self.g.add(x, att)?;

        if let Some(mem) = memory {
            let a = self.norm(x, &format!("{prefix}.lnx"))?;
            let q = self.linear(a, &format!("{prefix}.xattn.q"))?;
            let kv = self.linear(mem, &format!("{prefix}.xattn.kv"))?;
            let k = self.g.slice_cols(kv, 0, h)?;
            let v = self.g.slice_cols(kv, h, h)?;
            let att = self.attend(q, k, v, false)?;
            let att = self.linear(att, &format!("{prefix}.xattn.proj"))?;
            let att = self.drop(att)?;
            x = self.g.add(x, att)?;
        }

        let a = self.norm(x, &format!("{prefix}.ln2"))?;
        let m = self.linear(a, &format!("{prefix}.mlp.fc"))?;
        let m = self.g.gelu(m)?;
        let m = self.linear(m, &format!("{prefix}.mlp.proj"))?;
        let m = self.drop(m)?;
        Ok(self.g.add(x, m)?)
    }

    fn stack(&mut self, mut x: Var, side: &str, causal: bool, memory: Option<Var>) -> Result<Var, ModelError> {
        for i in 0..self.cfg.num_layers {
            x = self.block(x, &format!("{side}.{i}"), causal, memory)?;
        }
        Ok(x)
    }

    fn head(&mut self, x: Var, final_norm: &str) -> Result<Var, ModelError> {
        let x = self.norm(x, final_norm)?;
        let wte = self.p.var("wte")?;
        Ok(self.g.matmul_bt(x, wte)?)
    }
}

fn positions(start: usize, len: usize) -> Vec<u32> {
    (start as u32..(start + len) as u32).collect()
}

fn check_len(len: usize, cfg: &ModelConfig) -> Result<(), ModelError> {
    if len > cfg.max_positions {
        return Err(ModelError::TooLong {
            len,
            max: cfg.max_positions,
        });
    }
    Ok(())
}

/// Runs the configured variant over `sample`. NRC ignores the reference
/// segment, so every variant accepts the same samples.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    sample: &EncodedSample,
    opts: &ForwardOptions,
) -> Result<Forward, ModelError> {
    if sample.conv_len == 0 {
        return Err(ModelError::Input("sample has an empty conversation segment".into()));
    }
    let r = sample.ref_len;
    let (ref_ids, conv_ids) = sample.token_ids.split_at(r);
    let (ref_types, conv_types) = sample.type_ids.split_at(r);
    let dropout = opts
        .dropout_seed
        .filter(|_| cfg.dropout > 0.0)
        .map(ChaCha8Rng::seed_from_u64);
    let mut cx = Ctx {
        g,
        p: params,
        cfg,
        dropout,
    };

    let mut latent = None;
    let logits = match cfg.variant {
        Variant::Dec => {
            check_len(sample.len(), cfg)?;
            let x = cx.embed(&sample.token_ids, &sample.type_ids, &positions(0, sample.len()))?;
            let x = cx.drop(x)?;
            let x = cx.stack(x, "dec", true, None)?;
            cx.head(x, "ln_f")?
        }
        Variant::Nrc => {
            check_len(conv_ids.len(), cfg)?;
            let x = cx.embed(conv_ids, conv_types, &positions(0, conv_ids.len()))?;
            let x = cx.drop(x)?;
            let x = cx.stack(x, "dec", true, None)?;
            cx.head(x, "ln_f")?
        }
        Variant::S2s => {
            check_len(r, cfg)?;
            check_len(conv_ids.len(), cfg)?;
            let m = cx.embed(ref_ids, ref_types, &positions(0, r))?;
            let m = cx.drop(m)?;
            let m = cx.stack(m, "enc", false, None)?;
            let memory = cx.norm(m, "enc.ln_f")?;
            let x = cx.embed(conv_ids, conv_types, &positions(0, conv_ids.len()))?;
            let x = cx.drop(x)?;
            let x = cx.stack(x, "dec", true, Some(memory))?;
            cx.head(x, "ln_f")?
        }
        Variant::Vae => {
            check_len(r + 1, cfg)?;
            check_len(conv_ids.len() + 1, cfg)?;
            let wpe = cx.p.var("wpe")?;
            let cls = cx.p.var("vae.cls")?;
            let p0 = cx.g.embedding(wpe, &[0])?;
            let cls = cx.g.add(cls, p0)?;
            let refs = cx.embed(ref_ids, ref_types, &positions(1, r))?;
            let m = cx.g.concat_rows(&[cls, refs])?;
            let m = cx.drop(m)?;
            let m = cx.stack(m, "enc", false, None)?;
            let m = cx.norm(m, "enc.ln_f")?;
            let h_cls = cx.g.slice_rows(m, 0, 1)?;
            let stats = cx.linear(h_cls, "vae.stats")?;
            let z_dim = cfg.latent_dim;
            let mu = cx.g.slice_cols(stats, 0, z_dim)?;
            let logvar = cx.g.slice_cols(stats, z_dim, z_dim)?;
            let z = match &opts.noise {
                LatentNoise::Mean => mu,
                noise => {
                    let eps: Vec<f64> = match noise {
                        LatentNoise::Fixed(v) if v.len() == z_dim => v.clone(),
                        LatentNoise::Fixed(v) => {
                            return Err(ModelError::Input(format!(
                                "latent noise has {} values, expected {z_dim}",
                                v.len()
                            )))
                        }
                        LatentNoise::Seeded(seed) => {
                            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                            (0..z_dim).map(|_| rng.sample(StandardNormal)).collect()
                        }
                        LatentNoise::Mean => unreachable!(),
                    };
                    let eps = cx.g.constant(Tensor::from_f64_slice(&[1, z_dim], &eps)?);
                    let half = cx.g.scale(logvar, T::from_f64(0.5))?;
                    let std = cx.g.exp(half)?;
                    let noise = cx.g.mul(std, eps)?;
                    cx.g.add(mu, noise)?
                }
            };
            latent = Some((mu, logvar));
            let zh = cx.linear(z, "vae.latent")?;
            let zh = cx.g.add(zh, p0)?;
            let conv = cx.embed(conv_ids, conv_types, &positions(1, conv_ids.len()))?;
            let x = cx.g.concat_rows(&[zh, conv])?;
            let x = cx.drop(x)?;
            let x = cx.stack(x, "dec", true, None)?;
            cx.head(x, "ln_f")?
        }
    };

    let (targets, mask) = prediction_targets(sample, cfg.variant);
    let predictions = cx.g.slice_rows(logits, 0, targets.len())?;
    Ok(Forward {
        logits,
        predictions,
        targets,
        mask,
        latent,
    })
}

/// Distribution logits for the token after the last input position.
pub fn next_token_logits<T: Scalar>(g: &mut Graph<T>, fwd: &Forward) -> Result<Tensor<T>, ModelError> {
    let rows = g.value(fwd.logits).rows();
    let last = g.slice_rows(fwd.logits, rows - 1, 1)?;
    let t = g.value(last).clone();
    let v = t.cols();
    Ok(t.reshape(&[v])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerParams;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            max_positions: 32,
            ..ModelConfig::new(variant, 8, 1, 2, 16)
        }
    }

    fn sample() -> EncodedSample {
        use TokenType::*;
        EncodedSample {
            conversation_id: "c".into(),
            target_speaker: "a".into(),
            token_ids: vec![14, 3, 4, 12, 5, 13, 6, 7, 13],
            type_ids: vec![RefReply, RefReply, RefReply, Other, Other, Other, Target, Target, Target],
            position_ids: (0..9).collect(),
            loss_mask: vec![0, 0, 0, 0, 0, 0, 1, 1, 1],
            ref_len: 3,
            conv_len: 6,
        }
    }

    fn logits_of(variant: Variant, s: &EncodedSample) -> (Vec<usize>, Vec<f64>, usize) {
        let c = cfg(variant);
        let p = TransformerParams::<f64>::init(&c, 3).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let f = forward(&mut g, &b, &c, s, &ForwardOptions::default()).unwrap();
        let pred = g.value(f.predictions);
        assert_eq!(pred.rows(), f.targets.len());
        (g.value(f.logits).shape().to_vec(), g.value(f.logits).to_f64_vec(), f.targets.len())
    }

    #[test]
    fn output_shapes_per_variant() {
        let s = sample();
        assert_eq!(logits_of(Variant::Dec, &s).0, vec![9, 16]);
        assert_eq!(logits_of(Variant::Nrc, &s).0, vec![6, 16]);
        assert_eq!(logits_of(Variant::S2s, &s).0, vec![6, 16]);
        assert_eq!(logits_of(Variant::Vae, &s).0, vec![7, 16]);
        assert_eq!(logits_of(Variant::Dec, &s).2, 8);
        assert_eq!(logits_of(Variant::Vae, &s).2, 6);
    }

    #[test]
    fn targets_cover_every_masked_token() {
        let s = sample();
        for v in [Variant::Dec, Variant::Nrc, Variant::S2s, Variant::Vae] {
            let (t, m) = prediction_targets(&s, v);
            let picked: Vec<u32> = t.iter().zip(&m).filter(|(_, &m)| m == 1).map(|(&t, _)| t).collect();
            assert_eq!(picked, vec![6, 7, 13], "{v:?}");
        }
    }

    #[test]
    fn decoder_is_causal() {
        // Changing a later token must not move earlier logits.
        let s = sample();
        let (_, a, _) = logits_of(Variant::Dec, &s);
        let mut s2 = s.clone();
        s2.token_ids[7] = 2;
        let (_, b, _) = logits_of(Variant::Dec, &s2);
        assert_eq!(a[..7 * 16], b[..7 * 16]);
        assert_ne!(a[7 * 16..], b[7 * 16..]);
    }

    #[test]
    fn nrc_ignores_references() {
        let s = sample();
        let (_, a, _) = logits_of(Variant::Nrc, &s);
        let (_, b, _) = logits_of(Variant::Nrc, &s.without_references());
        assert_eq!(a, b);
    }

    #[test]
    fn too_long_is_rejected() {
        let c = cfg(Variant::Dec);
        let p = TransformerParams::<f32>::init(&c, 0).unwrap();
        let n = 40;
        let s = EncodedSample {
            conversation_id: "c".into(),
            target_speaker: "a".into(),
            token_ids: vec![1; n],
            type_ids: vec![TokenType::Target; n],
            position_ids: (0..n as u32).collect(),
            loss_mask: vec![1; n],
            ref_len: 0,
            conv_len: n,
        };
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let err = forward(&mut g, &b, &c, &s, &ForwardOptions::default()).unwrap_err();
        assert!(matches!(err, ModelError::TooLong { len: 40, max: 32 }));
    }

    #[test]
    fn vae_noise_changes_output_only_when_requested() {
        let c = cfg(Variant::Vae);
        let p = TransformerParams::<f64>::init(&c, 3).unwrap();
        let run = |noise: LatentNoise| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let opts = ForwardOptions {
                noise,
                dropout_seed: None,
            };
            let f = forward(&mut g, &b, &c, &sample(), &opts).unwrap();
            g.value(f.logits).to_f64_vec()
        };
        assert_eq!(run(LatentNoise::Mean), run(LatentNoise::Fixed(vec![0.0; 8])));
        assert_eq!(run(LatentNoise::Seeded(1)), run(LatentNoise::Seeded(1)));
        assert_ne!(run(LatentNoise::Mean), run(LatentNoise::Seeded(1)));
    }
}
