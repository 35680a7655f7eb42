//! PointNet-style encoder–decoder producing per-point features.
//!
//! Every stage maps its per-point input `x` to
//! `relu(normalize(x W_lᵀ) + broadcast(mean_rows(x) W_gᵀ + b))`: a shared
//! per-point map plus the mean-pooled global context broadcast back to every
//! point. The context is added after normalization so that it survives it.
//! Encoder stages chain; decoder layers see the previous layer plus a skip
//! from the mirrored encoder stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Linear, ParameterStore, Var};
use crate::error::{Error, Result};
use crate::fusion::ObjectFusion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPlacement {
    None,
    DecoderLast,
    DecoderMid,
    DecoderAll,
    EncoderFirst,
}

impl FusionPlacement {
    pub const ALL: [FusionPlacement; 5] = [
        FusionPlacement::None,
        FusionPlacement::DecoderLast,
        FusionPlacement::DecoderMid,
        FusionPlacement::DecoderAll,
        FusionPlacement::EncoderFirst,
    ];

    /// Whether decoder layer `j` of `depth` layers fuses 2D features.
    pub fn fuses_decoder_layer(self, j: usize, depth: usize) -> bool {
        match self {
            FusionPlacement::DecoderLast => j + 1 == depth,
            FusionPlacement::DecoderMid => j + 2 >= depth,
            FusionPlacement::DecoderAll => true,
            FusionPlacement::None | FusionPlacement::EncoderFirst => false,
        }
    }

    pub fn uses_decoder_fusion(self) -> bool {
        matches!(
            self,
            FusionPlacement::DecoderLast | FusionPlacement::DecoderMid | FusionPlacement::DecoderAll
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    /// Output feature width; must equal the last decoder width.
    pub feature_width: usize,
    pub placement: FusionPlacement,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![64, 128, 256],
            decoder_widths: vec![256, 128, 64],
            feature_width: 64,
            placement: FusionPlacement::DecoderLast,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.len() < 2 || self.decoder_widths.len() < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 encoder and 2 decoder stages, got {} and {}",
                self.encoder_widths.len(),
                self.decoder_widths.len()
            )));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return Err(Error::Config("backbone stage widths must be positive".into()));
        }
        if self.decoder_widths.last() != Some(&self.feature_width) {
            return Err(Error::Config(format!(
                "feature_width {} must equal the last decoder width {:?}",
                self.feature_width,
                self.decoder_widths.last()
            )));
        }
        Ok(())
    }
}

/// Per-stage encoder outputs, first to last.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub stages: Vec<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stage {
    local: Linear,
    global: Linear,
}

impl Stage {
    fn new(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            local: Linear::without_bias(store, &format!("{name}.local"), fan_in, fan_out, rng)?,
            global: Linear::new(store, &format!("{name}.global"), fan_in, fan_out, false, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let n = g.shape(x).0;
        let local = self.local.forward(g, store, x)?;
        let local = g.normalize_rows(local)?;
        let pooled = g.mean_pool_rows(x)?;
        let global = self.global.forward(g, store, pooled)?;
        let global = g.broadcast_rows(global, n)?;
        let y = g.add(local, global)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    fusions: Vec<Option<ObjectFusion>>,
}

impl Backbone {
    /// `stage1_width` overrides the width of the stage-1 output seen by later
    /// stages (the adapted width when fused points replace it);
    /// `width_2d` is the width of gathered 2D features for decoder fusion.
    pub fn new(
        store: &mut ParameterStore,
        config: BackboneConfig,
        stage1_width: Option<usize>,
        width_2d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let enc_w = &config.encoder_widths;
        let dec_w = &config.decoder_widths;
        let mut encoder = vec![Stage::new(store, "backbone.enc.0", 3, enc_w[0], rng)?];
        let mut prev = stage1_width.unwrap_or(enc_w[0]);
        for (i, &w) in enc_w.iter().enumerate().skip(1) {
            encoder.push(Stage::new(store, &format!("backbone.enc.{i}"), prev, w, rng)?);
            prev = w;
        }
        let mut decoder = Vec::new();
        let mut fusions = Vec::new();
        let e = enc_w.len();
        let mut width = prev;
        for (j, &w) in dec_w.iter().enumerate() {
            if j > 0 {
                width += skip_index(e, j).map_or(0, |s| stage_width(&config, stage1_width, s));
            }
            decoder.push(Stage::new(store, &format!("backbone.dec.{j}"), width, w, rng)?);
            fusions.push(if config.placement.fuses_decoder_layer(j, dec_w.len()) {
                Some(ObjectFusion::new(store, &format!("backbone.fuse.{j}"), w, width_2d, w, rng)?)
            } else {
                None
            });
            width = w;
        }
        Ok(Self {
            config,
            encoder,
            decoder,
            fusions,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.config.feature_width
    }

    /// First encoder stage on `N×3` positions. Pointwise in the rows.
    pub fn encode_stage1(&self, g: &mut Graph, store: &ParameterStore, positions: Var) -> Result<Var> {
        let (n, c) = g.shape(positions);
        if n == 0 {
            return Err(Error::RejectedInput("backbone input has no points".into()));
        }
        if c != 3 {
            return Err(Error::dim("encode", (n, 3), (n, c)));
        }
        self.encoder[0].forward(g, store, positions)
    }

    /// Remaining encoder stages from a (possibly replaced) stage-1 output.
    pub fn encode_from(&self, g: &mut Graph, store: &ParameterStore, stage1: Var) -> Result<Latents> {
        if g.shape(stage1).0 == 0 {
            return Err(Error::RejectedInput("backbone input has no points".into()));
        }
        let mut stages = vec![stage1];
        for stage in &self.encoder[1..] {
            let x = *stages.last().expect("non-empty");
            stages.push(stage.forward(g, store, x)?);
        }
        Ok(Latents { stages })
    }

    pub fn encode(&self, g: &mut Graph, store: &ParameterStore, positions: Var) -> Result<Latents> {
        let h = self.encode_stage1(g, store, positions)?;
        self.encode_from(g, store, h)
    }

    /// Decoder with optional 2D features `N×C_2D` for the fused layers.
    pub fn decode(&self, g: &mut Graph, store: &ParameterStore, latents: &Latents, f2d: Option<Var>) -> Result<Var> {
        let e = latents.stages.len();
        if e != self.encoder.len() {
            return Err(Error::dim("decode latents", self.encoder.len(), e));
        }
        if self.config.placement.uses_decoder_fusion() && f2d.is_none() {
            return Err(Error::Config(format!(
                "fusion placement {:?} needs 2D features",
                self.config.placement
            )));
        }
        let mut h = latents.stages[e - 1];
        for (j, stage) in self.decoder.iter().enumerate() {
            if j > 0 {
                if let Some(s) = skip_index(e, j) {
                    h = g.concat_channels(&[h, latents.stages[s]])?;
                }
            }
            h = stage.forward(g, store, h)?;
            if let (Some(fusion), Some(f)) = (&self.fusions[j], f2d) {
                h = fusion.forward(g, store, h, f)?;
            }
        }
        Ok(h)
    }
}

/// Encoder stage mirrored by decoder layer `j ≥ 1`.
fn skip_index(encoder_len: usize, j: usize) -> Option<usize> {
    encoder_len.checked_sub(1 + j)
}

fn stage_width(config: &BackboneConfig, stage1_width: Option<usize>, s: usize) -> usize {
    if s == 0 {
        stage1_width.unwrap_or(config.encoder_widths[0])
    } else {
        config.encoder_widths[s]
    }
}
