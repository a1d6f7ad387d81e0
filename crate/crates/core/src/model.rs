//! Full counting network: backbone, dense enhancer stack, density head and
//! the multi-level auxiliator that predicts a crowd-confidence map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scale_tree::{
    dense_forward, resample_gates, stack_dense_enhancers, Block, BlockKind, ConvUnit,
    CrossScaleGates, EnhancerSpec, GateMode, LeafAssignment,
};
use crate::tensor::{ParamId, ParamStore, Shape, Tape, Tensor, Var};

/// Initial bias of the density output conv, whose weights start at zero.
pub const DENSITY_BIAS_INIT: f64 = 1e-3;

/// One 3x3 backbone conv (followed by ReLU), optionally followed by a 2x2 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneLayer {
    pub out_channels: usize,
    pub pool_after: bool,
}

impl BackboneLayer {
    pub const fn new(out_channels: usize, pool_after: bool) -> Self {
        Self {
            out_channels,
            pool_after,
        }
    }
}

/// Feature levels fused by the auxiliator. All false means no auxiliator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AuxLevels {
    pub low: bool,
    pub middle: bool,
    pub high: bool,
}

impl AuxLevels {
    pub const ALL: Self = Self {
        low: true,
        middle: true,
        high: true,
    };
    pub const NONE: Self = Self {
        low: false,
        middle: false,
        high: false,
    };

    pub fn any(&self) -> bool {
        self.low || self.middle || self.high
    }

    /// Compact form such as `low+middle+high` or `none`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.low, "low"), (self.middle, "middle"), (self.high, "high")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl std::str::FromStr for AuxLevels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut levels = Self::NONE;
        if s == "none" {
            return Ok(levels);
        }
        for part in s.split('+') {
            match part.trim() {
                "low" => levels.low = true,
                "middle" => levels.middle = true,
                "high" => levels.high = true,
                other => {
                    return Err(Error::Spec(format!(
                        "unknown auxiliator level '{other}' (expected low, middle, high or none)"
                    )))
                }
            }
        }
        Ok(levels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub backbone: Vec<BackboneLayer>,
    /// Backbone layer (0-based) whose ReLU output is the low-level feature.
    pub low_tap: usize,
    /// Backbone layer (0-based) whose ReLU output is the middle-level feature.
    pub middle_tap: usize,
    pub enhancer_count: usize,
    pub block_kind: BlockKind,
    pub enhancer: EnhancerSpec,
    /// Width of the 3x3 conv in both heads and of the auxiliator alignment convs.
    pub head_channels: usize,
    pub aux_levels: AuxLevels,
}

impl ModelSpec {
    /// Six-layer backbone at 1/4 resolution, six tree enhancers with D=18.
    pub fn desk_default() -> Self {
        Self {
            in_channels: 3,
            backbone: vec![
                BackboneLayer::new(16, false),
                BackboneLayer::new(16, true),
                BackboneLayer::new(32, false),
                BackboneLayer::new(32, true),
                BackboneLayer::new(64, false),
                BackboneLayer::new(64, false),
            ],
            low_tap: 2,
            middle_tap: 5,
            enhancer_count: 6,
            block_kind: BlockKind::Tree,
            enhancer: EnhancerSpec::new(18, LeafAssignment::Reverse).expect("valid default"),
            head_channels: 32,
            aux_levels: AuxLevels::ALL,
        }
    }

    /// Layout of the first ten VGG-16 conv layers (1/8 resolution), for shape tests.
    pub fn vgg10_shape() -> Self {
        let widths = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512];
        let pools = [1, 3, 6];
        Self {
            backbone: widths
                .iter()
                .enumerate()
                .map(|(i, &c)| BackboneLayer::new(c, pools.contains(&i)))
                .collect(),
            low_tap: 4,
            middle_tap: 9,
            enhancer: EnhancerSpec::new(72, LeafAssignment::Reverse).expect("valid"),
            head_channels: 64,
            ..Self::desk_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Spec("input channel count must be positive".into()));
        }
        if self.backbone.is_empty() {
            return Err(Error::Spec("backbone needs at least one layer".into()));
        }
        if self.backbone.iter().any(|l| l.out_channels == 0) || self.head_channels == 0 {
            return Err(Error::Spec("layer widths must be positive".into()));
        }
        let last = self.backbone.len() - 1;
        if self.low_tap >= self.middle_tap || self.middle_tap > last {
            return Err(Error::Spec(format!(
                "taps must satisfy low < middle <= {last}, got low={} middle={}",
                self.low_tap, self.middle_tap
            )));
        }
        if self.block_kind == BlockKind::Tree {
            self.enhancer.validate()?;
        } else if self.enhancer.d_channels == 0 {
            return Err(Error::Spec("block width must be positive".into()));
        }
        Ok(())
    }

    /// Downsampling of the network output relative to the input.
    pub fn output_stride(&self) -> usize {
        1 << self.backbone.iter().filter(|l| l.pool_after).count()
    }

    /// Max-pool factor bringing the ReLU output of `layer` to output resolution.
    pub fn pool_factor_from(&self, layer: usize) -> usize {
        1 << self.backbone[layer..].iter().filter(|l| l.pool_after).count()
    }

    pub fn backbone_out_channels(&self) -> usize {
        self.backbone.last().map_or(0, |l| l.out_channels)
    }

    pub fn high_channels(&self) -> usize {
        if self.enhancer_count == 0 {
            self.backbone_out_channels()
        } else {
            self.enhancer.d_channels
        }
    }
}

#[derive(Clone, Debug)]
struct Auxiliator {
    levels: AuxLevels,
    align_low: Option<ConvUnit>,
    align_middle: Option<ConvUnit>,
    align_high: Option<ConvUnit>,
    conv3: ConvUnit,
    conv1: ConvUnit,
    first_param: ParamId,
}

/// Differentiable outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub density: Var,
    pub confidence: Option<Var>,
    /// Channel-aligned auxiliator inputs, in low/middle/high order.
    pub aligned_taps: Vec<Var>,
}

/// Materialized predictions.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub density: Tensor,
    pub confidence: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct STNetModel {
    spec: ModelSpec,
    params: ParamStore,
    backbone: Vec<ConvUnit>,
    blocks: Vec<Block>,
    density_head: [ConvUnit; 2],
    aux: Option<Auxiliator>,
    mode: GateMode,
}

impl STNetModel {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        let mut c = spec.in_channels;
        let backbone = spec
            .backbone
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let unit = ConvUnit::init(
                    &mut params,
                    &format!("backbone.{i}"),
                    c,
                    layer.out_channels,
                    3,
                    1,
                    &mut rng,
                );
                c = layer.out_channels;
                unit
            })
            .collect();

        let blocks = stack_dense_enhancers(
            spec.enhancer_count,
            spec.block_kind,
            &spec.enhancer,
            spec.backbone_out_channels(),
            &mut params,
            "enhancer",
            &mut rng,
        )?;

        let high = spec.high_channels();
        let hc = spec.head_channels;
        let density_head = [
            ConvUnit::init(&mut params, "density.conv3", high, hc, 3, 1, &mut rng),
            ConvUnit::init(&mut params, "density.conv1", hc, 1, 1, 1, &mut rng),
        ];
        // A He-initialized output layer leaves the final ReLU either dead or
        // grossly overcounting depending on the seed; start it flat and active.
        params.value_mut(density_head[1].weight).data_mut().fill(0.0);
        params.value_mut(density_head[1].bias).data_mut().fill(DENSITY_BIAS_INIT);

        // auxiliator parameters come last so stripping is a truncation
        let aux = spec.aux_levels.any().then(|| {
            let first_param = ParamId(params.len());
            let levels = spec.aux_levels;
            let mut align = |on: bool, name: &str, c_in: usize, rng: &mut ChaCha8Rng| {
                on.then(|| ConvUnit::init(&mut params, name, c_in, hc, 1, 1, rng))
            };
            let align_low = align(
                levels.low,
                "aux.align_low",
                spec.backbone[spec.low_tap].out_channels,
                &mut rng,
            );
            let align_middle = align(
                levels.middle,
                "aux.align_middle",
                spec.backbone[spec.middle_tap].out_channels,
                &mut rng,
            );
            let align_high = align(levels.high, "aux.align_high", high, &mut rng);
            let conv3 = ConvUnit::init(&mut params, "aux.conv3", hc, hc, 3, 1, &mut rng);
            let conv1 = ConvUnit::init(&mut params, "aux.conv1", hc, 1, 1, 1, &mut rng);
            Auxiliator {
                levels,
                align_low,
                align_middle,
                align_high,
                conv3,
                conv1,
                first_param,
            }
        });

        Ok(Self {
            spec: spec.clone(),
            params,
            backbone,
            blocks,
            density_head,
            aux,
            mode: GateMode::Train,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn has_auxiliator(&self) -> bool {
        self.aux.is_some()
    }

    /// Switch mode; eval fixes every gate at its expected value.
    pub fn set_mode(&mut self, mode: GateMode) {
        self.mode = mode;
        if mode == GateMode::Eval {
            for b in &mut self.blocks {
                b.set_gates(CrossScaleGates::eval());
            }
        }
    }

    /// Draw fresh gates (train mode) or reset them to 0.5 (eval mode).
    pub fn resample_gates<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        resample_gates(&mut self.blocks, self.mode, rng);
    }

    pub fn gates(&self) -> Vec<CrossScaleGates> {
        self.blocks.iter().filter_map(Block::gates).collect()
    }

    pub fn set_gates(&mut self, gates: CrossScaleGates) {
        for b in &mut self.blocks {
            b.set_gates(gates);
        }
    }

    /// Whether `id` belongs to the auxiliator branch.
    pub fn is_aux_param(&self, id: ParamId) -> bool {
        self.aux.as_ref().is_some_and(|a| id >= a.first_param)
    }

    /// Density-head parameter ids.
    pub fn density_head_params(&self) -> Vec<ParamId> {
        self.density_head.iter().flat_map(|u| u.params()).collect()
    }

    /// Component label of a parameter: backbone, enhancer, density or aux.
    pub fn component_of(&self, id: ParamId) -> &str {
        let name = &self.params.get(id).name;
        name.split('.').next().unwrap_or("")
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.spec.in_channels {
            return Err(Error::Input(format!(
                "model expects {} image channels, got {}",
                self.spec.in_channels, shape.c
            )));
        }
        let stride = self.spec.output_stride();
        if shape.h == 0 || shape.w == 0 || !shape.h.is_multiple_of(stride) || !shape.w.is_multiple_of(stride) {
            return Err(Error::Input(format!(
                "image size {}x{} is not divisible by the output stride {stride}",
                shape.h, shape.w
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<ModelOutput> {
        self.check_input(tape.shape(images))?;
        let p = &self.params;
        let mut x = images;
        let mut low = None;
        let mut middle = None;
        for (i, (unit, layer)) in self.backbone.iter().zip(&self.spec.backbone).enumerate() {
            x = unit.apply_relu(tape, p, x)?;
            if i == self.spec.low_tap {
                low = Some(x);
            }
            if i == self.spec.middle_tap {
                middle = Some(x);
            }
            if layer.pool_after {
                x = tape.maxpool2d(x, 2, 2)?;
            }
        }
        let high = dense_forward(&self.blocks, tape, p, x)?;

        let h = self.density_head[0].apply_relu(tape, p, high)?;
        let density = self.density_head[1].apply_relu(tape, p, h)?;

        let (confidence, aligned_taps) = match &self.aux {
            None => (None, Vec::new()),
            Some(aux) => {
                let mut aligned = Vec::with_capacity(3);
                let taps = [
                    (aux.align_low, low, self.spec.low_tap),
                    (aux.align_middle, middle, self.spec.middle_tap),
                ];
                for (unit, feature, layer) in taps {
                    if let (Some(unit), Some(feature)) = (unit, feature) {
                        let factor = self.spec.pool_factor_from(layer);
                        let pooled = if factor > 1 {
                            tape.maxpool2d(feature, factor, factor)?
                        } else {
                            feature
                        };
                        aligned.push(unit.apply(tape, p, pooled)?);
                    }
                }
                if let Some(unit) = aux.align_high {
                    aligned.push(unit.apply(tape, p, high)?);
                }
                let mut fused = aligned[0];
                for &a in &aligned[1..] {
                    fused = tape.add(fused, a)?;
                }
                let c = aux.conv3.apply_relu(tape, p, fused)?;
                let logits = aux.conv1.apply(tape, p, c)?;
                (Some(tape.sigmoid(logits)), aligned)
            }
        };
        debug_assert!(self.aux.as_ref().is_none_or(|a| a.levels.any()));
        Ok(ModelOutput {
            density,
            confidence,
            aligned_taps,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(Prediction {
            density: tape.value(out.density).clone(),
            confidence: out.confidence.map(|c| tape.value(c).clone()),
        })
    }

    /// Restore parameter values captured from a model with the same spec.
    pub fn load_values(&mut self, values: &ParamStore) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Spec(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (id, p) in values.iter() {
            let dst = self.params.get_mut(id);
            if dst.name != p.name || dst.value.shape() != p.value.shape() {
                return Err(Error::Spec(format!(
                    "parameter {} ({}) does not match {} ({})",
                    p.name,
                    p.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }

    /// Density-only model for inference: auxiliator removed, gates at 0.5.
    pub fn strip_auxiliator(&self) -> InferenceModel {
        let mut model = self.clone();
        if let Some(aux) = model.aux.take() {
            model.params.truncate(aux.first_param);
        }
        model.spec.aux_levels = AuxLevels::NONE;
        model.set_mode(GateMode::Eval);
        InferenceModel { model }
    }
}

/// Density estimator without the auxiliator branch.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    model: STNetModel,
}

impl InferenceModel {
    pub fn params(&self) -> &ParamStore {
        self.model.params()
    }

    pub fn predict_density(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.model.predict(images)?.density)
    }

    /// Always fails: the confidence branch was removed.
    pub fn predict_confidence(&self, _images: &Tensor) -> Result<Tensor> {
        Err(Error::NoAuxiliator)
    }
}
