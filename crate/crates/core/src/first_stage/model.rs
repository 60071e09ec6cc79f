use candle_core::{Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identifiers::{IdentifierEmbeddingTable, IdentifierPool};
use crate::nbody::PropertyKind;
use crate::nn::{attention, layer_norm, merge_heads, split_heads, LayerNorm, Linear, Mlp, ParamStore};

/// Epsilon of the affine-free layer norm on the latent bottleneck.
pub const LATENT_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_latents: usize,
    pub latent_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub id_dim: usize,
    pub pool_size: usize,
    pub ff_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_latents: 16,
            latent_dim: 32,
            heads: 2,
            head_dim: 16,
            layers: 1,
            id_dim: 128,
            pool_size: 10,
            ff_mult: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub ff_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            head_dim: 16,
            layers: 1,
            ff_mult: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_latents,
            self.latent_dim,
            self.heads,
            self.head_dim,
            self.layers,
            self.id_dim,
            self.pool_size,
            self.ff_mult,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Shape of the data the autoencoder was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub spatial_dim: usize,
    pub properties: Vec<PropertyKind>,
}

/// Pre-norm cross-attention block: `x += Attn(LN(x), ctx); x += FF(LN(x))`.
#[derive(Debug, Clone)]
struct CrossBlock {
    q_norm: LayerNorm,
    q: Linear,
    kv: Linear,
    out: Linear,
    ff_norm: LayerNorm,
    ff: Mlp,
    heads: usize,
}

impl CrossBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        ctx_dim: usize,
        heads: usize,
        head_dim: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        let inner = heads * head_dim;
        Ok(Self {
            q_norm: LayerNorm::new(store, &format!("{name}.q_norm"), width)?,
            q: Linear::no_bias(store, &format!("{name}.q"), width, inner)?,
            kv: Linear::no_bias(store, &format!("{name}.kv"), ctx_dim, 2 * inner)?,
            out: Linear::new(store, &format!("{name}.out"), inner, width)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), width)?,
            ff: Mlp::new(store, &format!("{name}.ff"), width, ff_mult * width, width)?,
            heads,
        })
    }

    /// `x: (B, S, width)`, `ctx: (B, C, ctx_dim)`.
    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let q = split_heads(&self.q.forward(&self.q_norm.forward(x)?)?, self.heads)?;
        let kv = self.kv.forward(ctx)?;
        let inner = kv.dim(D::Minus1)? / 2;
        let k = split_heads(&kv.narrow(D::Minus1, 0, inner)?, self.heads)?;
        let v = split_heads(&kv.narrow(D::Minus1, inner, inner)?, self.heads)?;
        let attended = merge_heads(&attention(&q, &k, &v)?)?;
        let x = (x + self.out.forward(&attended)?)?;
        let h = self.ff.forward(&self.ff_norm.forward(&x)?)?;
        Ok((x + h)?)
    }
}

/// Cross-attention from learned latent queries onto the entity tokens.
#[derive(Debug, Clone)]
struct Encoder {
    latents: Tensor,
    blocks: Vec<CrossBlock>,
}

/// What a decoder head reconstructs.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadKind {
    Positions,
    /// Property columns decoded by regression.
    Continuous(Vec<usize>),
    /// One categorical property column, decoded as logits over its classes.
    Categorical { column: usize, classes: Vec<f32> },
}

/// Identifier-queried cross-attention decoder for one feature family.
#[derive(Debug, Clone)]
struct DecoderHead {
    kind: HeadKind,
    query: Linear,
    blocks: Vec<CrossBlock>,
    out_norm: LayerNorm,
    out: Linear,
}

impl DecoderHead {
    fn forward(&self, z_normed: &Tensor, ids: &Tensor) -> Result<Tensor> {
        let mut h = self.query.forward(ids)?;
        for block in &self.blocks {
            h = block.forward(&h, z_normed)?;
        }
        Ok(self.out.forward(&self.out_norm.forward(&h)?)?)
    }
}

/// Per-family decoder outputs in normalized units.
#[derive(Debug, Clone)]
pub struct DecodedFrames {
    /// `(B, N, D_x)`
    pub positions: Tensor,
    /// `(B, N, k)` for the continuous property columns listed in `continuous_columns`.
    pub continuous: Option<Tensor>,
    pub continuous_columns: Vec<usize>,
    /// `(column, (B, N, classes))` per categorical property.
    pub logits: Vec<(usize, Tensor)>,
}

/// Encoder, decoder heads and identifier table of the first stage.
#[derive(Debug, Clone)]
pub struct AutoEncoder {
    pub encoder_cfg: EncoderConfig,
    pub decoder_cfg: DecoderConfig,
    pub data: DataSpec,
    ids: IdentifierEmbeddingTable,
    encoder: Encoder,
    heads: Vec<DecoderHead>,
}

impl AutoEncoder {
    pub fn new(
        store: &mut ParamStore,
        encoder_cfg: &EncoderConfig,
        decoder_cfg: &DecoderConfig,
        data: &DataSpec,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        let pool = IdentifierPool::new(encoder_cfg.pool_size)?;
        let ids = IdentifierEmbeddingTable::new(store, "ids", pool, encoder_cfg.id_dim)?;
        let width = encoder_cfg.latent_dim;
        let token_dim = data.spatial_dim + data.properties.len() + encoder_cfg.id_dim;
        let latents = store.normal("encoder.latents", &[encoder_cfg.num_latents, width], 1.0)?;
        let mut blocks = Vec::with_capacity(encoder_cfg.layers);
        for i in 0..encoder_cfg.layers {
            blocks.push(CrossBlock::new(
                store,
                &format!("encoder.block{i}"),
                width,
                token_dim,
                encoder_cfg.heads,
                encoder_cfg.head_dim,
                encoder_cfg.ff_mult,
            )?);
        }

        let mut kinds = vec![(String::from("pos"), HeadKind::Positions, data.spatial_dim)];
        let continuous: Vec<usize> = data
            .properties
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p, PropertyKind::Continuous { .. }))
            .map(|(i, _)| i)
            .collect();
        if !continuous.is_empty() {
            let k = continuous.len();
            kinds.push(("props".into(), HeadKind::Continuous(continuous), k));
        }
        for (column, p) in data.properties.iter().enumerate() {
            if let PropertyKind::Categorical { classes, .. } = p {
                if classes.len() < 2 {
                    return Err(Error::Config(format!("categorical property {column} needs >= 2 classes")));
                }
                kinds.push((
                    format!("cat{column}"),
                    HeadKind::Categorical {
                        column,
                        classes: classes.clone(),
                    },
                    classes.len(),
                ));
            }
        }
        let mut heads = Vec::with_capacity(kinds.len());
        for (tag, kind, out_dim) in kinds {
            let name = format!("decoder.{tag}");
            let mut dblocks = Vec::with_capacity(decoder_cfg.layers);
            for i in 0..decoder_cfg.layers {
                dblocks.push(CrossBlock::new(
                    store,
                    &format!("{name}.block{i}"),
                    width,
                    width,
                    decoder_cfg.heads,
                    decoder_cfg.head_dim,
                    decoder_cfg.ff_mult,
                )?);
            }
            heads.push(DecoderHead {
                kind,
                query: Linear::new(store, &format!("{name}.query"), encoder_cfg.id_dim, width)?,
                blocks: dblocks,
                out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), width)?,
                out: Linear::new(store, &format!("{name}.out"), width, out_dim)?,
            });
        }
        Ok(Self {
            encoder_cfg: encoder_cfg.clone(),
            decoder_cfg: decoder_cfg.clone(),
            data: data.clone(),
            ids,
            encoder: Encoder { latents, blocks },
            heads,
        })
    }

    pub fn identifier_table(&self) -> &IdentifierEmbeddingTable {
        &self.ids
    }

    pub fn pool(&self) -> IdentifierPool {
        IdentifierPool::new(self.encoder_cfg.pool_size).expect("validated at construction")
    }

    pub fn num_latents(&self) -> usize {
        self.encoder_cfg.num_latents
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder_cfg.latent_dim
    }

    /// Embeds a batch of assignments, `(B, N, D_u)`.
    pub fn embed_ids(&self, assignments: &[&[usize]]) -> Result<Tensor> {
        self.ids.gather(assignments)
    }

    /// `positions: (B, N, D_x)`, `properties: (B, N, D_m)`, `ids: (B, N, D_u)`
    /// to latents `(B, L, D_z)`, each token layer-normalized without affine.
    pub fn encode(&self, positions: &Tensor, properties: &Tensor, ids: &Tensor) -> Result<Tensor> {
        let (b, n, dx) = positions.dims3()?;
        if dx != self.data.spatial_dim {
            return Err(Error::Shape(format!("encoder expects D_x={}, got {dx}", self.data.spatial_dim)));
        }
        if properties.dims3()? != (b, n, self.data.properties.len()) {
            return Err(Error::Shape(format!(
                "properties {:?} do not match positions {:?}",
                properties.dims(),
                positions.dims()
            )));
        }
        if ids.dims3()? != (b, n, self.encoder_cfg.id_dim) {
            return Err(Error::Shape(format!("identifier embeddings {:?} do not match {b}x{n}", ids.dims())));
        }
        if n == 0 {
            return Err(Error::Shape("cannot encode an empty system".into()));
        }
        let tokens = Tensor::cat(&[positions, properties, ids], D::Minus1)?;
        let (l, w) = self.encoder.latents.dims2()?;
        let mut z = self.encoder.latents.unsqueeze(0)?.broadcast_as((b, l, w))?.contiguous()?;
        for block in &self.encoder.blocks {
            z = block.forward(&z, &tokens)?;
        }
        Ok(layer_norm(&z, LATENT_NORM_EPS)?)
    }

    /// Reads every entity back out of `z: (B, L, D_z)` with queries `ids: (B, N, D_u)`.
    pub fn decode(&self, z: &Tensor, ids: &Tensor) -> Result<DecodedFrames> {
        let (b, l, w) = z.dims3()?;
        if (l, w) != (self.encoder_cfg.num_latents, self.encoder_cfg.latent_dim) {
            return Err(Error::Shape(format!(
                "decoder expects latents {}x{}, got {l}x{w}",
                self.encoder_cfg.num_latents, self.encoder_cfg.latent_dim
            )));
        }
        let (ib, _, iw) = ids.dims3()?;
        if ib != b || iw != self.encoder_cfg.id_dim {
            return Err(Error::Shape(format!("identifier embeddings {:?} do not match batch {b}", ids.dims())));
        }
        let z = layer_norm(z, LATENT_NORM_EPS)?;
        let mut out = DecodedFrames {
            positions: Tensor::zeros(1, z.dtype(), z.device())?,
            continuous: None,
            continuous_columns: Vec::new(),
            logits: Vec::new(),
        };
        for head in &self.heads {
            let y = head.forward(&z, ids)?;
            match &head.kind {
                HeadKind::Positions => out.positions = y,
                HeadKind::Continuous(cols) => {
                    out.continuous = Some(y);
                    out.continuous_columns = cols.clone();
                }
                HeadKind::Categorical { column, .. } => out.logits.push((*column, y)),
            }
        }
        Ok(out)
    }

    /// Decodes positions only.
    pub fn decode_positions(&self, z: &Tensor, ids: &Tensor) -> Result<Tensor> {
        let z = layer_norm(z, LATENT_NORM_EPS)?;
        self.heads[0].forward(&z, ids)
    }

    pub fn categorical_classes(&self, column: usize) -> Option<&[f32]> {
        self.heads.iter().find_map(|h| match &h.kind {
            HeadKind::Categorical { column: c, classes } if *c == column => Some(classes.as_slice()),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn model(dtype: DType) -> (ParamStore, AutoEncoder) {
        let mut store = ParamStore::new(1, dtype, Device::Cpu);
        let enc = EncoderConfig {
            id_dim: 16,
            pool_size: 64,
            ..EncoderConfig::default()
        };
        let data = DataSpec {
            spatial_dim: 3,
            properties: vec![
                PropertyKind::Continuous { name: "mass".into() },
                PropertyKind::Categorical { name: "charge".into(), classes: vec![-1.0, 1.0] },
            ],
        };
        let m = AutoEncoder::new(&mut store, &enc, &DecoderConfig::default(), &data).unwrap();
        (store, m)
    }

    fn inputs(m: &AutoEncoder, n: usize, dtype: DType) -> (Tensor, Tensor, Tensor) {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, n, 3), &dev).unwrap().to_dtype(dtype).unwrap();
        let p = Tensor::randn(0f32, 1.0, (2, n, 2), &dev).unwrap().to_dtype(dtype).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        let u = m.embed_ids(&[&ids, &ids]).unwrap();
        (x, p, u)
    }

    #[test]
    fn latent_shape_is_independent_of_entity_count() {
        let (_s, m) = model(DType::F32);
        for n in [1, 3, 10] {
            let (x, p, u) = inputs(&m, n, DType::F32);
            assert_eq!(m.encode(&x, &p, &u).unwrap().dims(), &[2, 16, 32]);
        }
    }

    #[test]
    fn decode_shapes() {
        let (_s, m) = model(DType::F32);
        let (x, p, u) = inputs(&m, 1, DType::F32);
        let z = m.encode(&x, &p, &u).unwrap();
        let out = m.decode(&z, &u).unwrap();
        assert_eq!(out.positions.dims(), &[2, 1, 3]);
        assert_eq!(out.continuous.as_ref().unwrap().dims(), &[2, 1, 1]);
        assert_eq!(out.continuous_columns, vec![0]);
        assert_eq!(out.logits.len(), 1);
        assert_eq!(out.logits[0].1.dims(), &[2, 1, 2]);
        assert_eq!(m.categorical_classes(1), Some(&[-1.0f32, 1.0][..]));
    }

    #[test]
    fn shape_errors() {
        let (_s, m) = model(DType::F32);
        let (x, p, u) = inputs(&m, 4, DType::F32);
        let bad = Tensor::zeros((2, 4, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.encode(&bad, &p, &u), Err(Error::Shape(_))));
        let z = m.encode(&x, &p, &u).unwrap();
        assert!(matches!(m.decode(&z.narrow(2, 0, 16).unwrap(), &u), Err(Error::Shape(_))));
    }
}
