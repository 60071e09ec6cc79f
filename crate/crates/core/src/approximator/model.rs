use candle_core::{DType, Device, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolants::{Schedule, SingularityPolicy};
use crate::nn::{attention, layer_norm, merge_heads, sinusoidal_features, split_heads, Linear, Mlp, ParamStore, Rotary};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentFlowConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the sinusoidal diffusion-time features.
    pub time_features: usize,
    pub rope_base: f64,
    /// Rotary encoding along the latent-token axis.
    pub rope_latent: bool,
    /// Rotary encoding along the time axis.
    pub rope_time: bool,
    pub schedule: Schedule,
    pub eps_clamp: f64,
    /// Weights of the position and inter-distance losses decoded through the frozen decoder.
    pub aux_pos: f64,
    pub aux_interdist: f64,
}

impl Default for LatentFlowConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            layers: 6,
            heads: 4,
            mlp_ratio: 4,
            time_features: 64,
            rope_base: 10_000.0,
            rope_latent: true,
            rope_time: true,
            schedule: Schedule::Linear,
            eps_clamp: 1e-3,
            aux_pos: 0.0,
            aux_interdist: 0.0,
        }
    }
}

impl LatentFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.hidden, self.layers, self.heads, self.mlp_ratio, self.time_features].contains(&0) {
            return Err(Error::Config(format!("latent flow dimensions must be positive: {self:?}")));
        }
        if self.hidden % self.heads != 0 || (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "hidden {} must split into {} heads of even width",
                self.hidden, self.heads
            )));
        }
        if self.time_features % 2 != 0 {
            return Err(Error::Config("time_features must be even".into()));
        }
        if !(0.0..0.5).contains(&self.eps_clamp) {
            return Err(Error::Config(format!("eps_clamp {} outside [0, 0.5)", self.eps_clamp)));
        }
        if self.aux_pos < 0.0 || self.aux_interdist < 0.0 {
            return Err(Error::Config("auxiliary weights must be >= 0".into()));
        }
        Ok(())
    }

    pub fn policy(&self) -> SingularityPolicy {
        if self.eps_clamp > 0.0 {
            SingularityPolicy::Clamp(self.eps_clamp)
        } else {
            SingularityPolicy::Strict
        }
    }
}

/// Known latents `C` (zero on masked frames) and per-frame known flags `B`
/// for one trajectory.
#[derive(Debug, Clone)]
pub struct ConditioningTensor {
    /// `(T, L, D_z)`
    pub latents: Tensor,
    pub known: Vec<bool>,
}

impl ConditioningTensor {
    pub fn num_frames(&self) -> usize {
        self.known.len()
    }

    pub fn num_known(&self) -> usize {
        self.known.iter().filter(|k| **k).count()
    }

    /// Flags broadcast to `(T, L, D_z)`: 1 on known frames, 0 on masked ones.
    pub fn mask(&self) -> Result<Tensor> {
        let (t, l, d) = self.latents.dims3()?;
        let flags: Vec<f32> = self.known.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect();
        let m = Tensor::from_vec(flags, (t, 1, 1), self.latents.device())?.to_dtype(self.latents.dtype())?;
        Ok(m.broadcast_as((t, l, d))?.contiguous()?)
    }
}

/// Places the observed latents `(T_o, L, D_z)` at the first `T_o` of `total` frames.
pub fn build_conditioning(observed: &Tensor, total: usize) -> Result<ConditioningTensor> {
    let (t_o, l, d) = observed.dims3()?;
    if t_o == 0 || t_o > total {
        return Err(Error::Range {
            what: "observed frames",
            detail: format!("need 1 <= T_o <= T, got T_o={t_o}, T={total}"),
        });
    }
    let latents = if t_o == total {
        observed.clone()
    } else {
        let pad = Tensor::zeros((total - t_o, l, d), observed.dtype(), observed.device())?;
        Tensor::cat(&[observed, &pad], 0)?
    };
    let known = (0..total).map(|i| i < t_o).collect();
    Ok(ConditioningTensor { latents, known })
}

/// A batch of conditionings, stacked along a leading axis.
#[derive(Debug, Clone)]
pub struct ConditioningBatch {
    /// `(B, T, L, D_z)`
    pub latents: Tensor,
    /// `(B * T,)` row indices into the mask embedding (1 = known).
    pub flags: Tensor,
    pub batch: usize,
    pub frames: usize,
}

impl ConditioningBatch {
    pub fn stack(items: &[ConditioningTensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("empty conditioning batch".into()))?;
        let t = first.num_frames();
        if items.iter().any(|c| c.num_frames() != t) {
            return Err(Error::Shape("conditionings in a batch must share T".into()));
        }
        let lat: Vec<Tensor> = items.iter().map(|c| c.latents.clone()).collect();
        let flags: Vec<u32> = items.iter().flat_map(|c| c.known.iter().map(|k| *k as u32)).collect();
        Ok(Self {
            latents: Tensor::stack(&lat, 0)?,
            flags: Tensor::from_vec(flags, items.len() * t, first.latents.device())?,
            batch: items.len(),
            frames: t,
        })
    }

    /// Every row shares the first `observed` frames of `latents` `(B, T, L, D_z)`.
    pub fn from_prefix(latents: &Tensor, observed: usize) -> Result<Self> {
        let (b, t, l, d) = latents.dims4()?;
        if observed == 0 || observed > t {
            return Err(Error::Range {
                what: "observed frames",
                detail: format!("need 1 <= T_o <= T, got T_o={observed}, T={t}"),
            });
        }
        let known = latents.narrow(1, 0, observed)?;
        let lat = if observed == t {
            known
        } else {
            let pad = Tensor::zeros((b, t - observed, l, d), latents.dtype(), latents.device())?;
            Tensor::cat(&[&known, &pad], 1)?
        };
        let flags: Vec<u32> = (0..b).flat_map(|_| (0..t).map(move |i| (i < observed) as u32)).collect();
        Ok(Self {
            latents: lat,
            flags: Tensor::from_vec(flags, b * t, latents.device())?,
            batch: b,
            frames: t,
        })
    }
}

/// Parallel attention + MLP block with adaLN-Zero modulation.
#[derive(Debug, Clone)]
struct ParallelBlock {
    modulation: Linear,
    proj_in: Linear,
    proj_out: Linear,
    heads: usize,
    hidden: usize,
}

impl ParallelBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &LatentFlowConfig) -> Result<Self> {
        let h = cfg.hidden;
        let mlp = cfg.mlp_ratio * h;
        Ok(Self {
            modulation: Linear::zeros(store, &format!("{name}.modulation"), h, 3 * h)?,
            proj_in: Linear::new(store, &format!("{name}.proj_in"), h, 3 * h + mlp)?,
            proj_out: Linear::new(store, &format!("{name}.proj_out"), h + mlp, h)?,
            heads: cfg.heads,
            hidden: h,
        })
    }

    /// `x: (S, seq, H)`; `act: (S, 1, H)` SiLU of the time embedding per row.
    fn forward(&self, x: &Tensor, act: &Tensor, rope: Option<&Rotary>) -> Result<Tensor> {
        let h = self.hidden;
        let m = self.modulation.forward(act)?;
        let shift = m.narrow(D::Minus1, 0, h)?;
        let scale = m.narrow(D::Minus1, h, h)?;
        let gate = m.narrow(D::Minus1, 2 * h, h)?;
        let xm = layer_norm(x, NORM_EPS)?
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?;
        let proj = self.proj_in.forward(&xm)?;
        let mlp_width = proj.dim(D::Minus1)? - 3 * h;
        let mut q = split_heads(&proj.narrow(D::Minus1, 0, h)?, self.heads)?;
        let mut k = split_heads(&proj.narrow(D::Minus1, h, h)?, self.heads)?;
        let v = split_heads(&proj.narrow(D::Minus1, 2 * h, h)?, self.heads)?;
        if let Some(r) = rope {
            q = r.apply(&q)?;
            k = r.apply(&k)?;
        }
        let att = merge_heads(&attention(&q, &k, &v)?)?;
        let mlp = proj.narrow(D::Minus1, 3 * h, mlp_width)?.silu()?;
        let out = self.proj_out.forward(&Tensor::cat(&[att, mlp], D::Minus1)?)?;
        Ok((x + out.broadcast_mul(&gate)?)?)
    }
}

/// One latent layer: a block over the latent axis, then a block over time.
#[derive(Debug, Clone)]
pub struct LatentLayer {
    latent: ParallelBlock,
    temporal: ParallelBlock,
}

impl LatentLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &LatentFlowConfig) -> Result<Self> {
        Ok(Self {
            latent: ParallelBlock::new(store, &format!("{name}.latent"), cfg)?,
            temporal: ParallelBlock::new(store, &format!("{name}.temporal"), cfg)?,
        })
    }

    /// `o: (B, T, L, H)`, `act: (B, H)`.
    pub fn forward(&self, o: &Tensor, act: &Tensor, rope_l: Option<&Rotary>, rope_t: Option<&Rotary>) -> Result<Tensor> {
        let (b, t, l, h) = o.dims4()?;
        let act_l = act.unsqueeze(1)?.broadcast_as((b, t, h))?.reshape((b * t, 1, h))?;
        let x = self.latent.forward(&o.reshape((b * t, l, h))?, &act_l, rope_l)?;
        let x = x.reshape((b, t, l, h))?.transpose(1, 2)?.contiguous()?.reshape((b * l, t, h))?;
        let act_t = act.unsqueeze(1)?.broadcast_as((b, l, h))?.reshape((b * l, 1, h))?;
        let x = self.temporal.forward(&x, &act_t, rope_t)?;
        Ok(x.reshape((b, l, t, h))?.transpose(1, 2)?.contiguous()?)
    }
}

/// The latent flow network: predicts clean latents from interpolated ones.
#[derive(Debug, Clone)]
pub struct LatentFlowModel {
    pub config: LatentFlowConfig,
    pub num_latents: usize,
    pub latent_dim: usize,
    time_mlp: Mlp,
    input: Linear,
    cond: Linear,
    mask_embed: Tensor,
    layers: Vec<LatentLayer>,
    head_modulation: Linear,
    head_mlp: Mlp,
    output: Linear,
}

impl LatentFlowModel {
    pub fn new(store: &mut ParamStore, cfg: &LatentFlowConfig, num_latents: usize, latent_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            layers.push(LatentLayer::new(store, &format!("flow.layer{i}"), cfg)?);
        }
        Ok(Self {
            config: cfg.clone(),
            num_latents,
            latent_dim,
            time_mlp: Mlp::new(store, "flow.time", cfg.time_features, h, h)?,
            input: Linear::new(store, "flow.input", latent_dim, h)?,
            cond: Linear::new(store, "flow.cond", latent_dim, h)?,
            mask_embed: store.normal("flow.mask_embed", &[2, h], 0.02)?,
            layers,
            head_modulation: Linear::zeros(store, "flow.head.modulation", h, 3 * h)?,
            head_mlp: Mlp::new(store, "flow.head.mlp", h, cfg.mlp_ratio * h, h)?,
            output: Linear::new(store, "flow.output", h, latent_dim)?,
        })
    }

    /// Diffusion-time embedding `(B,) -> (B, H)`.
    pub fn time_embedding(&self, tau: &Tensor) -> Result<Tensor> {
        let feats = sinusoidal_features(tau, self.config.time_features, 1000.0)?;
        Ok(self.time_mlp.forward(&feats)?)
    }

    fn ropes(&self, t: usize, l: usize, dtype: DType, device: &Device) -> Result<(Option<Rotary>, Option<Rotary>)> {
        let head_dim = self.config.hidden / self.config.heads;
        let rl = if self.config.rope_latent {
            Some(Rotary::new(l, head_dim, self.config.rope_base, dtype, device)?)
        } else {
            None
        };
        let rt = if self.config.rope_time {
            Some(Rotary::new(t, head_dim, self.config.rope_base, dtype, device)?)
        } else {
            None
        };
        Ok((rl, rt))
    }

    /// Input path `Linear(o) + Linear(C) + Embed(B)`, `(B, T, L, H)`.
    pub fn embed_inputs(&self, o_inter: &Tensor, cond: &ConditioningBatch) -> Result<Tensor> {
        let (b, t, l, _) = o_inter.dims4()?;
        let h = self.config.hidden;
        let flags = self.mask_embed.index_select(&cond.flags, 0)?.reshape((b, t, 1, h))?;
        let x = (self.input.forward(o_inter)? + self.cond.forward(&cond.latents)?)?;
        Ok(x.broadcast_add(&flags)?.reshape((b, t, l, h))?)
    }

    /// Clean-data prediction `o_hat` for `o_inter: (B, T, L, D_z)` at times `tau: (B,)`.
    pub fn forward(&self, o_inter: &Tensor, tau: &Tensor, cond: &ConditioningBatch) -> Result<Tensor> {
        let (b, t, l, d) = o_inter.dims4()?;
        if (l, d) != (self.num_latents, self.latent_dim) {
            return Err(Error::Shape(format!(
                "flow model expects latents {}x{}, got {l}x{d}",
                self.num_latents, self.latent_dim
            )));
        }
        if cond.latents.dims4()? != (b, t, l, d) {
            return Err(Error::Shape(format!(
                "conditioning {:?} does not match input {:?}",
                cond.latents.dims(),
                o_inter.dims()
            )));
        }
        if tau.dims1()? != b {
            return Err(Error::Shape(format!("need {b} diffusion times, got {:?}", tau.dims())));
        }
        let emb = self.time_embedding(tau)?;
        let act = emb.silu()?;
        let (rl, rt) = self.ropes(t, l, o_inter.dtype(), o_inter.device())?;
        let mut x = self.embed_inputs(o_inter, cond)?;
        for layer in &self.layers {
            x = layer.forward(&x, &act, rl.as_ref(), rt.as_ref())?;
        }
        let h = self.config.hidden;
        let m = self.head_modulation.forward(&act)?.reshape((b, 1, 1, 3 * h))?;
        let alpha = m.narrow(D::Minus1, 0, h)?;
        let beta = m.narrow(D::Minus1, h, h)?;
        let gamma = m.narrow(D::Minus1, 2 * h, h)?;
        let xm = layer_norm(&x, NORM_EPS)?
            .broadcast_mul(&(alpha + 1.0)?)?
            .broadcast_add(&beta)?;
        let x = (x + self.head_mlp.forward(&xm)?.broadcast_mul(&gamma)?)?;
        Ok(self.output.forward(&x)?)
    }

    /// The output projection alone; at initialization `forward` equals
    /// `project_out(embed_inputs(..))`.
    pub fn project_out(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.output.forward(x)?)
    }

    pub fn layers(&self) -> &[LatentLayer] {
        &self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(rope: bool) -> (ParamStore, LatentFlowModel) {
        let mut store = ParamStore::new(5, DType::F32, Device::Cpu);
        let cfg = LatentFlowConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            rope_latent: rope,
            rope_time: rope,
            ..LatentFlowConfig::default()
        };
        let m = LatentFlowModel::new(&mut store, &cfg, 4, 8).unwrap();
        (store, m)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn conditioning_layouts() {
        let z = randn(&[10, 16, 32], 1);
        let c = build_conditioning(&z, 30).unwrap();
        assert_eq!(c.num_known(), 10);
        assert_eq!(c.num_frames(), 30);
        let tail = c.latents.narrow(0, 10, 20).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(tail, 0.0);
        let head = (c.latents.narrow(0, 0, 10).unwrap() - &z).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(head, 0.0);
        let full = build_conditioning(&z, 10).unwrap();
        assert_eq!(full.num_known(), 10);
        let one = build_conditioning(&z.narrow(0, 0, 1).unwrap(), 4).unwrap();
        assert_eq!(one.known, vec![true, false, false, false]);
        assert!(build_conditioning(&z, 9).is_err());
        let m = c.mask().unwrap();
        assert_eq!(m.dims(), &[30, 16, 32]);
    }

    #[test]
    fn prefix_batch_matches_stacked() {
        let z = randn(&[2, 5, 4, 8], 2);
        let a = ConditioningBatch::from_prefix(&z, 3).unwrap();
        let items: Vec<_> = (0..2)
            .map(|i| build_conditioning(&z.get(i).unwrap().narrow(0, 0, 3).unwrap(), 5).unwrap())
            .collect();
        let b = ConditioningBatch::stack(&items).unwrap();
        let diff = (a.latents - b.latents).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        assert_eq!(a.flags.to_vec1::<u32>().unwrap(), b.flags.to_vec1::<u32>().unwrap());
    }

    #[test]
    fn shape_preserved_and_deterministic() {
        let (_s, m) = tiny(true);
        for (t, seed) in [(1usize, 3u64), (5, 4)] {
            let o = randn(&[2, t, 4, 8], seed);
            let cond = ConditioningBatch::from_prefix(&o, 1).unwrap();
            let tau = Tensor::new(&[0.3f32, 0.8], &Device::Cpu).unwrap();
            let a = m.forward(&o, &tau, &cond).unwrap();
            let b = m.forward(&o, &tau, &cond).unwrap();
            assert_eq!(a.dims(), o.dims());
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(diff <= 1e-6);
        }
    }

    #[test]
    fn identity_at_init() {
        let (_s, m) = tiny(true);
        let o = randn(&[2, 3, 4, 8], 9);
        let cond = ConditioningBatch::from_prefix(&o, 1).unwrap();
        let tau = Tensor::new(&[0.1f32, 0.6], &Device::Cpu).unwrap();
        let full = m.forward(&o, &tau, &cond).unwrap();
        let direct = m.project_out(&m.embed_inputs(&o, &cond).unwrap()).unwrap();
        let diff = (full - direct).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn mask_flags_change_output() {
        let (_s, m) = tiny(false);
        let o = randn(&[1, 4, 4, 8], 10);
        let tau = Tensor::new(&[0.5f32], &Device::Cpu).unwrap();
        let a = m.forward(&o, &tau, &ConditioningBatch::from_prefix(&o, 1).unwrap()).unwrap();
        let mut c = ConditioningBatch::from_prefix(&o, 1).unwrap();
        c.flags = Tensor::new(&[1u32, 1, 0, 0], &Device::Cpu).unwrap();
        let b = m.forward(&o, &tau, &c).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let (_s, m) = tiny(false);
        let o = randn(&[1, 4, 4, 8], 10);
        let cond = ConditioningBatch::from_prefix(&o, 1).unwrap();
        let tau = Tensor::new(&[0.5f32, 0.1], &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&o, &tau, &cond), Err(Error::Shape(_))));
        let bad = randn(&[1, 4, 3, 8], 1);
        let tau = Tensor::new(&[0.5f32], &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&bad, &tau, &cond), Err(Error::Shape(_))));
        let cfg = LatentFlowConfig { hidden: 10, heads: 4, ..LatentFlowConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
