//! The plain detection pipeline: patch stem with a single-scale feature map,
//! two-stage proposals, mixed query selection and the refining decoder.

use std::f64::consts::PI;
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    box_mask_bias, cross_attention, roi_sampling_bias, self_attention, AttentionConfig, MultiHeadAttention,
};
use crate::boxrpb::{center_rpb, decomposed_boxrpb, naive_boxrpb, BiasVar, RpbMlp};
use crate::error::{Error, Result};
use crate::geometry::{diff, BBox, GridSize};
use crate::nn::{FeedForward, LayerNorm, Linear, Mlp};
use crate::numerics::{checkpoint, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Initial class-head bias, a prior probability of about 0.01.
pub const CLASS_PRIOR_BIAS: f64 = -4.6;
/// Width/height deltas are clamped to this magnitude before exponentiation.
pub const MAX_LOG_SCALE: f64 = 4.135;
const SINE_TEMPERATURE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasVariant {
    None,
    Naive,
    Decomposed,
    Center,
    Boxmask,
    Roisample,
}

impl BiasVariant {
    pub const ALL: [BiasVariant; 6] = [
        BiasVariant::None,
        BiasVariant::Naive,
        BiasVariant::Decomposed,
        BiasVariant::Center,
        BiasVariant::Boxmask,
        BiasVariant::Roisample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BiasVariant::None => "none",
            BiasVariant::Naive => "naive",
            BiasVariant::Decomposed => "decomposed",
            BiasVariant::Center => "center",
            BiasVariant::Boxmask => "boxmask",
            BiasVariant::Roisample => "roisample",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyPos {
    Sine,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub queries: usize,
    pub num_classes: usize,
    pub bias: BiasVariant,
    pub reparam: bool,
    pub lft: bool,
    pub mqs: bool,
    /// Adds the auxiliary one-to-many query group during training.
    pub hybrid: bool,
    /// Auxiliary group size as a multiple of `queries`.
    pub hybrid_group: usize,
    pub rpb_hidden: usize,
    pub ffn_hidden: usize,
    pub key_pos: KeyPos,
    /// Lattice samples per axis for the RoI-sampling variant.
    pub roi_samples: usize,
    /// Divide BoxRPB offsets by the grid extent.
    pub normalize_offsets: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl PipelineConfig {
    /// Small preset that trains on a CPU in minutes.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            d_model: 32,
            heads: 4,
            encoder_depth: 2,
            decoder_depth: 2,
            queries: 16,
            num_classes: 3,
            bias: BiasVariant::Decomposed,
            reparam: true,
            lft: true,
            mqs: true,
            hybrid: true,
            hybrid_group: 2,
            rpb_hidden: 64,
            ffn_hidden: 64,
            key_pos: KeyPos::Sine,
            roi_samples: 3,
            normalize_offsets: true,
        }
    }

    /// Full-size reference values: 300 queries, 6 layers, 8 heads, hidden 256.
    pub fn reference_scale() -> Self {
        Self {
            image_size: 800,
            patch_size: 16,
            d_model: 256,
            heads: 8,
            encoder_depth: 0,
            decoder_depth: 6,
            queries: 300,
            num_classes: 80,
            rpb_hidden: 256,
            ffn_hidden: 2048,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.queries == 0 || self.decoder_depth == 0 || self.num_classes == 0 {
            return bad("queries, decoder depth and class count must be at least 1".into());
        }
        AttentionConfig::new(self.d_model, self.heads)?;
        if !self.d_model.is_multiple_of(8) {
            return bad(format!("model width {} must be a multiple of 8", self.d_model));
        }
        let cells = self.grid().cells();
        if self.queries > cells {
            return bad(format!("{} queries exceed {} feature positions", self.queries, cells));
        }
        if self.hybrid && (self.hybrid_group == 0 || self.aux_queries() > cells) {
            return bad(format!(
                "auxiliary group of {} queries does not fit {} positions",
                self.aux_queries(),
                cells
            ));
        }
        if self.roi_samples == 0 || self.rpb_hidden == 0 || self.ffn_hidden == 0 {
            return bad("roi samples and hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> GridSize {
        let n = self.image_size / self.patch_size.max(1);
        GridSize::new(n, n)
    }

    pub fn aux_queries(&self) -> usize {
        if self.hybrid {
            self.queries * self.hybrid_group
        } else {
            0
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
        }
    }
}

/// `[h*w, d]` fixed sine encoding of cell centers: the first half of the
/// channels encode `y`, the second half `x`.
pub fn grid_sine_embedding<T: Scalar>(grid: GridSize, d: usize) -> Vec<T> {
    let per_axis = d / 2;
    let mut out = Vec::with_capacity(grid.cells() * d);
    for i in 0..grid.h {
        for j in 0..grid.w {
            let y = (i as f64 + 0.5) / grid.h as f64;
            let x = (j as f64 + 0.5) / grid.w as f64;
            for c in [y, x] {
                push_sine(&mut out, c, per_axis);
            }
            out.extend(std::iter::repeat_n(T::zero(), d - 2 * per_axis));
        }
    }
    out
}

fn push_sine<T: Scalar>(out: &mut Vec<T>, c: f64, width: usize) {
    let freqs = width / 2;
    for f in 0..freqs {
        let angle = 2.0 * PI * c / SINE_TEMPERATURE.powf(f as f64 / freqs as f64);
        out.push(T::lit(angle.sin()));
        out.push(T::lit(angle.cos()));
    }
}

/// `[n, d]` sine embedding of boxes normalized to `[0, 1]`: `d / 8`
/// frequencies per coordinate, each as a `(sin, cos)` pair.
pub fn box_sine_embedding<T: Scalar>(boxes: &[BBox<T>], grid: GridSize, d: usize) -> Result<Vec<T>> {
    if !d.is_multiple_of(8) || d == 0 {
        return Err(Error::Config(format!("sine box embedding needs width divisible by 8, got {d}")));
    }
    let (gw, gh) = (grid.w as f64, grid.h as f64);
    let mut out = Vec::with_capacity(boxes.len() * d);
    for b in boxes {
        let [cx, cy, w, h] = b.to_array().map(|v| v.to_f64_lossy());
        for c in [cx / gw, cy / gh, w / gw, h / gh] {
            push_sine(&mut out, c, d / 4);
        }
    }
    Ok(out)
}

/// Indices of the `k` largest scores, ties broken by lower index.
pub fn top_k<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!("cannot select {k} of {} proposals", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Unit boxes centered on every cell, row-major.
pub fn cell_anchors<T: Scalar>(grid: GridSize) -> Vec<BBox<T>> {
    (0..grid.h)
        .flat_map(|i| {
            (0..grid.w).map(move |j| BBox {
                cx: T::from_usize(j).unwrap() + T::lit(0.5),
                cy: T::from_usize(i).unwrap() + T::lit(0.5),
                w: T::one(),
                h: T::one(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
enum RpbParams {
    None,
    Naive(RpbMlp),
    Decomposed(RpbMlp, RpbMlp),
    Center(RpbMlp),
    BoxMask,
    RoiSample,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
    class_head: Linear,
    delta_head: Mlp,
    rpb: RpbParams,
}

/// Parameters of a full pipeline.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    pub cfg: PipelineConfig,
    pub store: ParamStore<T>,
    stem: Linear,
    encoder: Vec<EncoderLayer>,
    proposal_class: Linear,
    proposal_delta: Mlp,
    content: ParamId,
    aux_content: Option<ParamId>,
    memory_content: Option<Linear>,
    pos_proj: Mlp,
    layers: Vec<DecoderLayer>,
}

/// Queries entering the decoder. `content` and `pos` are `[n, d]`.
#[derive(Clone, Debug)]
pub struct QuerySet<T: Scalar = f64> {
    pub content: Var,
    pub pos: Var,
    pub boxes: Vec<BBox<T>>,
}

/// What a layer produced, all `[q, ·]` over the joint query set.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub logits: Var,
    /// Boxes fed to this layer's loss (grid units).
    pub boxes: Var,
    /// Detached reference boxes this layer refined.
    pub reference: Var,
    pub deltas: Var,
    /// Cross-attention weights `[m, q, h*w]`, kept on request.
    pub attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub grid: GridSize,
    pub proposal_logits: Var,
    pub proposal_boxes: Var,
    pub anchors: Var,
    /// Positions selected for the one-to-one group, then the auxiliary group.
    pub selected: Vec<usize>,
    pub aux_selected: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    /// Size of the one-to-one group; rows `queries..` belong to the auxiliary group.
    pub queries: usize,
    pub aux_queries: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<T: Scalar = f64> {
    /// Include the auxiliary one-to-many group (training only).
    pub aux: bool,
    pub keep_attention: bool,
    /// Replaces the reference boxes of layer `l + 1` (index `l`) when present.
    pub reference_override: Vec<Option<Vec<BBox<T>>>>,
}

/// A single scored prediction in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction<T: Scalar = f64> {
    pub class: usize,
    pub score: T,
    pub bbox: BBox<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let att = cfg.attention();
        let patch = cfg.patch_size * cfg.patch_size;
        let stem = Linear::new(&mut store, "stem", patch, d, &mut rng);
        let encoder = (0..cfg.encoder_depth)
            .map(|e| {
                let n = format!("encoder.{e}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(&mut store, &format!("{n}.attn"), att, &mut rng),
                    norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d),
                    ffn: FeedForward::new(&mut store, &format!("{n}.ffn"), d, cfg.ffn_hidden, &mut rng),
                    norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d),
                }
            })
            .collect();
        let proposal_class = class_head(&mut store, "proposal.class", d, cfg.num_classes, &mut rng);
        let proposal_delta = Mlp::zero_output(&mut store, "proposal.delta", [d, d, 4], &mut rng);
        let content = store.add("query.content", random_tensor(&mut rng, cfg.queries, d));
        let aux_content = cfg
            .hybrid
            .then(|| store.add("query.aux_content", random_tensor(&mut rng, cfg.aux_queries(), d)));
        let memory_content = (!cfg.mqs).then(|| Linear::new(&mut store, "query.from_memory", d, d, &mut rng));
        let pos_proj = Mlp::new(&mut store, "query.pos", [d, d, d], &mut rng);
        let mut layers = Vec::with_capacity(cfg.decoder_depth);
        for l in 0..cfg.decoder_depth {
            let n = format!("decoder.{l}");
            let rpb = match cfg.bias {
                BiasVariant::None => RpbParams::None,
                BiasVariant::Naive => RpbParams::Naive(RpbMlp::new(
                    &mut store,
                    &format!("{n}.rpb"),
                    4,
                    cfg.rpb_hidden,
                    cfg.heads,
                    &mut rng,
                )?),
                BiasVariant::Decomposed => RpbParams::Decomposed(
                    RpbMlp::new(&mut store, &format!("{n}.rpb_x"), 2, cfg.rpb_hidden, cfg.heads, &mut rng)?,
                    RpbMlp::new(&mut store, &format!("{n}.rpb_y"), 2, cfg.rpb_hidden, cfg.heads, &mut rng)?,
                ),
                BiasVariant::Center => RpbParams::Center(RpbMlp::new(
                    &mut store,
                    &format!("{n}.rpb"),
                    2,
                    cfg.rpb_hidden,
                    cfg.heads,
                    &mut rng,
                )?),
                BiasVariant::Boxmask => RpbParams::BoxMask,
                BiasVariant::Roisample => RpbParams::RoiSample,
            };
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(&mut store, &format!("{n}.self_attn"), att, &mut rng),
                norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d),
                cross_attn: MultiHeadAttention::new(&mut store, &format!("{n}.cross_attn"), att, &mut rng),
                norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d),
                ffn: FeedForward::new(&mut store, &format!("{n}.ffn"), d, cfg.ffn_hidden, &mut rng),
                norm3: LayerNorm::new(&mut store, &format!("{n}.norm3"), d),
                class_head: class_head(&mut store, &format!("{n}.class"), d, cfg.num_classes, &mut rng),
                delta_head: Mlp::zero_output(&mut store, &format!("{n}.delta"), [d, d, 4], &mut rng),
                rpb,
            });
        }
        Ok(Self {
            cfg,
            store,
            stem,
            encoder,
            proposal_class,
            proposal_delta,
            content,
            aux_content,
            memory_content,
            pos_proj,
            layers,
        })
    }

    /// Writes all parameters plus the config under `meta.config`.
    pub fn save(&self, path: &Path, mut meta: serde_json::Value) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        if !meta.is_object() {
            meta = serde_json::json!({});
        }
        meta["config"] = cfg;
        checkpoint::save(path, self.store.iter(), meta)
    }

    /// Restores a model written by [`Model::save`]; returns it with the metadata.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (entries, meta) = checkpoint::load::<T>(path)?;
        let cfg: PipelineConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Config(format!("{}: bad config in checkpoint: {e}", path.display())))?;
        let mut model = Self::new(cfg, 0)?;
        if entries.len() != model.store.len() {
            return Err(Error::Config(format!(
                "{}: checkpoint holds {} tensors, model has {}",
                path.display(),
                entries.len(),
                model.store.len()
            )));
        }
        for (name, t) in entries {
            model.store.load_values(&name, t.shape(), t.data())?;
        }
        Ok((model, meta))
    }

    pub fn grid(&self) -> GridSize {
        self.cfg.grid()
    }

    /// Patch embedding, sine positions and the encoder blocks: `[h*w, d]`.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, image: &[T]) -> Result<Var> {
        let (s, ps) = (self.cfg.image_size, self.cfg.patch_size);
        if image.len() != s * s {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![image.len()],
                rhs: vec![s, s],
            });
        }
        let grid = self.grid();
        let mut patches = Vec::with_capacity(s * s);
        for gi in 0..grid.h {
            for gj in 0..grid.w {
                for y in 0..ps {
                    let row = (gi * ps + y) * s + gj * ps;
                    patches.extend_from_slice(&image[row..row + ps]);
                }
            }
        }
        let patches = tape.constant(vec![grid.cells(), ps * ps], patches)?;
        let x = self.stem.forward(tape, p, patches)?;
        let pos = tape.constant(vec![grid.cells(), self.cfg.d_model], grid_sine_embedding(grid, self.cfg.d_model))?;
        let mut x = tape.add(x, pos)?;
        for layer in &self.encoder {
            let a = self_attention(tape, p, &layer.attn, x, Some(pos), None)?;
            x = layer.norm1.forward(tape, p, a.output)?;
            let f = layer.ffn.forward(tape, p, x)?;
            x = layer.norm2.forward(tape, p, f)?;
        }
        Ok(x)
    }

    fn refine(&self, tape: &mut Tape<T>, reference: Var, deltas: Var) -> Result<Var> {
        let grid = self.grid();
        if self.cfg.reparam {
            let [tx, ty, tw, th] = diff::columns(tape, deltas)?;
            let tw = tape.clamp(tw, T::lit(-MAX_LOG_SCALE), T::lit(MAX_LOG_SCALE))?;
            let th = tape.clamp(th, T::lit(-MAX_LOG_SCALE), T::lit(MAX_LOG_SCALE))?;
            let t = tape.concat(&[tx, ty, tw, th], 1)?;
            diff::apply_deltas(tape, reference, t, grid)
        } else {
            diff::apply_deltas_squashed(tape, reference, deltas, grid)
        }
    }

    /// Dense per-position logits `[h*w, c]`, boxes `[h*w, 4]` and anchors.
    pub fn generate_proposals(&self, tape: &mut Tape<T>, p: &Bound, memory: Var) -> Result<(Var, Var, Var)> {
        let logits = self.proposal_class.forward(tape, p, memory)?;
        let deltas = self.proposal_delta.forward(tape, p, memory)?;
        let anchors = diff::boxes_constant(tape, &cell_anchors(self.grid()))?;
        let boxes = self.refine(tape, anchors, deltas)?;
        Ok((logits, boxes, anchors))
    }

    /// Per-position confidence: the largest class logit.
    pub fn proposal_scores(tape: &Tape<T>, logits: Var) -> Vec<T> {
        let c = tape.shape(logits)[1];
        tape.value(logits)
            .chunks(c)
            .map(|r| r.iter().fold(T::neg_infinity(), |m, &v| m.max(v)))
            .collect()
    }

    /// Static content (or projected memory features when query selection is
    /// pure two-stage) with sine positions of the detached proposal boxes.
    pub fn mixed_query_init(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        memory: Var,
        proposal_boxes: Var,
        selected: &[usize],
        aux: bool,
    ) -> Result<QuerySet<T>> {
        let d = self.cfg.d_model;
        let all = diff::boxes_value(tape, proposal_boxes)?;
        let boxes: Vec<BBox<T>> = selected.iter().map(|&i| all[i]).collect();
        let content = match &self.memory_content {
            Some(proj) => {
                let rows = tape.index_rows(memory, selected)?;
                let rows = tape.detach(rows)?;
                proj.forward(tape, p, rows)?
            }
            None => {
                let id = if aux {
                    self.aux_content.ok_or_else(|| Error::Config("model has no auxiliary group".into()))?
                } else {
                    self.content
                };
                let v = p.get(id);
                if tape.shape(v)[0] != selected.len() {
                    return Err(Error::Shape {
                        op: "mixed_query_init",
                        lhs: tape.shape(v).to_vec(),
                        rhs: vec![selected.len(), d],
                    });
                }
                v
            }
        };
        let pos = tape.constant(vec![boxes.len(), d], box_sine_embedding(&boxes, self.grid(), d)?)?;
        Ok(QuerySet { content, pos, boxes })
    }

    fn layer_bias(&self, tape: &mut Tape<T>, p: &Bound, layer: &DecoderLayer, reference: Var, boxes: &[BBox<T>]) -> Result<Option<BiasVar>> {
        let grid = self.grid();
        let norm = self.cfg.normalize_offsets;
        let heads = self.cfg.heads;
        Ok(match &layer.rpb {
            RpbParams::None => None,
            RpbParams::Naive(mlp) => {
                let off = diff::corner_offsets(tape, reference, grid, norm)?;
                Some(naive_boxrpb(tape, p, &off, mlp)?)
            }
            RpbParams::Decomposed(mx, my) => {
                let off = diff::corner_offsets(tape, reference, grid, norm)?;
                Some(decomposed_boxrpb(tape, p, &off, mx, my)?)
            }
            RpbParams::Center(mlp) => {
                let (dcx, dcy) = diff::center_offsets(tape, reference, grid, norm)?;
                Some(center_rpb(tape, p, dcx, dcy, mlp)?)
            }
            RpbParams::BoxMask => Some(box_mask_bias(boxes, grid, heads).record(tape)?),
            RpbParams::RoiSample => Some(roi_sampling_bias(boxes, grid, self.cfg.roi_samples, heads)?.record(tape)?),
        })
    }

    /// One decoder layer: self-attention, biased cross-attention, feed-forward,
    /// then the class and delta heads. Returns the new features, logits and deltas.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_layer(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        index: usize,
        x: Var,
        reference: Var,
        memory: Var,
        key_pos: Option<Var>,
        self_mask: Option<Var>,
    ) -> Result<(Var, Var, Var, Option<Var>)> {
        let layer = &self.layers[index];
        let boxes = diff::boxes_value(tape, reference)?;
        let sine = box_sine_embedding(&boxes, self.grid(), self.cfg.d_model)?;
        let sine = tape.constant(vec![boxes.len(), self.cfg.d_model], sine)?;
        let pos = self.pos_proj.forward(tape, p, sine)?;
        let a = self_attention(tape, p, &layer.self_attn, x, Some(pos), self_mask)?;
        let x = layer.norm1.forward(tape, p, a.output)?;
        let bias = self.layer_bias(tape, p, layer, reference, &boxes)?;
        let c = cross_attention(
            tape,
            p,
            &layer.cross_attn,
            x,
            memory,
            self.grid(),
            bias.as_ref(),
            Some(pos),
            key_pos,
        )?;
        let x = layer.norm2.forward(tape, p, c.output)?;
        let f = layer.ffn.forward(tape, p, x)?;
        let x = layer.norm3.forward(tape, p, f)?;
        let logits = layer.class_head.forward(tape, p, x)?;
        let deltas = layer.delta_head.forward(tape, p, x)?;
        Ok((x, logits, deltas, Some(c.weights)))
    }

    /// Runs the decoder stack. Each layer refines the detached output of the
    /// previous one. With look-forward-twice on, the box handed to layer `l`'s
    /// loss is rebuilt from layer `l - 1`'s undetached box, so that loss also
    /// reaches layer `l - 1`'s delta head.
    #[allow(clippy::too_many_arguments)]
    pub fn run_decoder(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        queries: &QuerySet<T>,
        memory: Var,
        self_mask: Option<Var>,
        opts: &ForwardOptions<T>,
    ) -> Result<Vec<LayerTrace>> {
        let grid = self.grid();
        let key_pos = match self.cfg.key_pos {
            KeyPos::Sine => Some(tape.constant(
                vec![grid.cells(), self.cfg.d_model],
                grid_sine_embedding(grid, self.cfg.d_model),
            )?),
            KeyPos::None => None,
        };
        let mut x = queries.content;
        let mut reference = diff::boxes_constant(tape, &queries.boxes)?;
        let mut prev_live = reference;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            if let Some(Some(b)) = opts.reference_override.get(l) {
                reference = diff::boxes_constant(tape, b)?;
            }
            let (nx, logits, deltas, weights) =
                self.decoder_layer(tape, p, l, x, reference, memory, key_pos, self_mask)?;
            x = nx;
            let refined = self.refine(tape, reference, deltas)?;
            let boxes = if self.cfg.lft {
                self.refine(tape, prev_live, deltas)?
            } else {
                refined
            };
            out.push(LayerTrace {
                logits,
                boxes,
                reference,
                deltas,
                attention: if opts.keep_attention { weights } else { None },
            });
            prev_live = refined;
            reference = tape.detach(refined)?;
        }
        Ok(out)
    }

    /// Full forward pass over one image (`image_size²` values in `[0, 1]`).
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, image: &[T], opts: &ForwardOptions<T>) -> Result<DecoderTrace> {
        let memory = self.encode(tape, p, image)?;
        let (proposal_logits, proposal_boxes, anchors) = self.generate_proposals(tape, p, memory)?;
        let scores = Self::proposal_scores(tape, proposal_logits);
        let k = self.cfg.queries;
        let aux = opts.aux && self.cfg.hybrid;
        let aux_k = if aux { self.cfg.aux_queries() } else { 0 };
        let ranked = top_k(&scores, k.max(aux_k))?;
        let selected = ranked[..k].to_vec();
        let aux_selected = ranked[..aux_k].to_vec();
        let mut q = self.mixed_query_init(tape, p, memory, proposal_boxes, &selected, false)?;
        let mut mask = None;
        if aux {
            let qa = self.mixed_query_init(tape, p, memory, proposal_boxes, &aux_selected, true)?;
            q.content = tape.concat(&[q.content, qa.content], 0)?;
            q.pos = tape.concat(&[q.pos, qa.pos], 0)?;
            q.boxes.extend(qa.boxes);
            let n = k + aux_k;
            let mut m = vec![T::mask_value(); n * n];
            for i in 0..n {
                for j in 0..n {
                    if (i < k) == (j < k) {
                        m[i * n + j] = T::zero();
                    }
                }
            }
            mask = Some(tape.constant(vec![n, n], m)?);
        }
        let layers = self.run_decoder(tape, p, &q, memory, mask, opts)?;
        Ok(DecoderTrace {
            grid: self.grid(),
            proposal_logits,
            proposal_boxes,
            anchors,
            selected,
            aux_selected,
            layers,
            queries: k,
            aux_queries: aux_k,
        })
    }

    /// One-to-one predictions of the last layer, boxes in pixels.
    pub fn predict(&self, image: &[T]) -> Result<Vec<Prediction<T>>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape)?;
        let trace = self.forward(&mut tape, &p, image, &ForwardOptions::default())?;
        Ok(self.predictions(&tape, &trace))
    }

    pub fn predictions(&self, tape: &Tape<T>, trace: &DecoderTrace) -> Vec<Prediction<T>> {
        let last = trace.layers.last().expect("at least one decoder layer");
        let c = self.cfg.num_classes;
        let scale = T::from_usize(self.cfg.patch_size).unwrap();
        let logits = tape.value(last.logits);
        let boxes = tape.value(last.boxes);
        (0..trace.queries)
            .map(|q| {
                let row = &logits[q * c..(q + 1) * c];
                let (class, &best) = row
                    .iter()
                    .enumerate()
                    .fold((0, &row[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
                let b = &boxes[q * 4..q * 4 + 4];
                Prediction {
                    class,
                    score: T::one() / (T::one() + (-best).exp()),
                    bbox: BBox {
                        cx: b[0] * scale,
                        cy: b[1] * scale,
                        w: b[2] * scale,
                        h: b[3] * scale,
                    },
                }
            })
            .collect()
    }
}

fn class_head<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, classes: usize, rng: &mut StdRng) -> Linear {
    let head = Linear::new(store, name, d, classes, rng);
    store
        .get_mut(head.bias)
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = T::lit(CLASS_PRIOR_BIAS));
    head
}

fn random_tensor<T: Scalar>(rng: &mut StdRng, n: usize, d: usize) -> Tensor<T> {
    use rand::Rng;
    let data = (0..n * d).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
    Tensor::new(vec![n, d], data).expect("shape matches data")
}
