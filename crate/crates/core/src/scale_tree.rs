//! Scale-tree diversity enhancer and its dense-connected stack.
//!
//! A block compresses its input to `D` channels with a 1x1 conv (the root),
//! splits the root into three children convolved at dilations 1, 2 and 3,
//! lets the children exchange information through stochastic convex gates,
//! then splits each child into three leaves with their own dilations. The
//! nine leaves are concatenated back into `D` channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Padding, ParamId, ParamStore, Shape, Tape, Tensor, Var};

pub const CHILD_DILATIONS: [usize; 3] = [1, 2, 3];

/// Leaf dilation lists, lowest first. Together they form {1,2,3,3,4,5,5,6,7}.
pub const LEAF_DILATION_LISTS: [[usize; 3]; 3] = [[1, 2, 3], [3, 4, 5], [5, 6, 7]];

/// Which child receives which leaf dilation list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LeafAssignment {
    /// Child at dilation 1 owns {1,2,3}, 2 owns {3,4,5}, 3 owns {5,6,7}.
    Forward,
    /// Child at dilation 3 owns {1,2,3}, 2 owns {3,4,5}, 1 owns {5,6,7};
    /// caps the composed receptive field at 17.
    #[default]
    Reverse,
}

impl LeafAssignment {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Forward => "forward",
            Self::Reverse => "reverse",
        }
    }
}

impl std::str::FromStr for LeafAssignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "reverse" => Ok(Self::Reverse),
            other => Err(Error::Spec(format!(
                "unknown leaf assignment '{other}' (expected forward or reverse)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnhancerSpec {
    pub d_channels: usize,
    pub child_dilations: [usize; 3],
    /// `leaf_dilations_by_child[i]` belongs to the child at `child_dilations[i]`.
    pub leaf_dilations_by_child: [[usize; 3]; 3],
    pub leaf_assignment: LeafAssignment,
}

impl EnhancerSpec {
    pub fn new(d_channels: usize, leaf_assignment: LeafAssignment) -> Result<Self> {
        let leaf_dilations_by_child = match leaf_assignment {
            LeafAssignment::Forward => LEAF_DILATION_LISTS,
            LeafAssignment::Reverse => {
                let [a, b, c] = LEAF_DILATION_LISTS;
                [c, b, a]
            }
        };
        let spec = Self {
            d_channels,
            child_dilations: CHILD_DILATIONS,
            leaf_dilations_by_child,
            leaf_assignment,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_channels == 0 || !self.d_channels.is_multiple_of(9) {
            return Err(Error::Spec(format!(
                "enhancer width D={} must be a positive multiple of 9",
                self.d_channels
            )));
        }
        let mut leaves: Vec<usize> = self.leaf_dilations_by_child.iter().flatten().copied().collect();
        leaves.sort_unstable();
        if leaves != [1, 2, 3, 3, 4, 5, 5, 6, 7] {
            return Err(Error::Spec(format!(
                "leaf dilations {leaves:?} are not the multiset {{1,2,3,3,4,5,5,6,7}}"
            )));
        }
        if self.child_dilations.contains(&0) {
            return Err(Error::Spec("child dilations must be positive".into()));
        }
        Ok(())
    }

    /// `(child dilation, leaf dilation)` for the nine root-to-leaf paths.
    pub fn paths(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.child_dilations
            .iter()
            .zip(&self.leaf_dilations_by_child)
            .flat_map(|(&c, leaves)| leaves.iter().map(move |&l| (c, l)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Train,
    Eval,
}

/// Per-block mixing weights for the three child scales.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossScaleGates {
    pub alpha: f64,
    pub beta: f64,
    pub mode: GateMode,
}

impl CrossScaleGates {
    pub const EXPECTED: f64 = 0.5;

    pub fn eval() -> Self {
        Self {
            alpha: Self::EXPECTED,
            beta: Self::EXPECTED,
            mode: GateMode::Eval,
        }
    }

    pub fn fixed(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            mode: GateMode::Train,
        }
    }
}

impl Default for CrossScaleGates {
    fn default() -> Self {
        Self::eval()
    }
}

/// Weight and bias of one convolution plus how it is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl ConvUnit {
    /// He-initialized weight (fan-in scaling), zero bias.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = Tensor::randn(
            Shape::new(c_out, c_in, kernel, kernel),
            (2.0 / fan_in).sqrt(),
            rng,
        );
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
        Self {
            weight,
            bias,
            dilation,
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(tape.conv2d(x, w, Some(b), self.dilation, 1, Padding::Same)?)
    }

    pub fn apply_relu(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.apply(tape, store, x)?;
        Ok(tape.relu(y))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `ŝ1 = s1, ŝ2 = α ŝ1 + (1 − α) s2, ŝ3 = β ŝ2 + (1 − β) s3`.
pub fn cross_scale_mix(
    tape: &mut Tape,
    s1: Var,
    s2: Var,
    s3: Var,
    gates: &CrossScaleGates,
) -> Result<[Var; 3]> {
    let m2 = tape.affine_mix(s1, s2, gates.alpha)?;
    let m3 = tape.affine_mix(m2, s3, gates.beta)?;
    Ok([s1, m2, m3])
}

/// Overwrite every block's gates: fresh `U[0, 1)` draws in train mode, the
/// expected value 0.5 in eval mode.
pub fn resample_gates<R: Rng + ?Sized>(blocks: &mut [Block], mode: GateMode, rng: &mut R) {
    for block in blocks {
        if let Block::Tree(tree) = block {
            tree.gates = match mode {
                GateMode::Train => CrossScaleGates {
                    alpha: rng.random::<f64>(),
                    beta: rng.random::<f64>(),
                    mode,
                },
                GateMode::Eval => CrossScaleGates::eval(),
            };
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnhancerBlock {
    pub spec: EnhancerSpec,
    pub c_in: usize,
    pub root: ConvUnit,
    pub children: [ConvUnit; 3],
    /// `leaves[child][k]`.
    pub leaves: [[ConvUnit; 3]; 3],
    pub gates: CrossScaleGates,
    /// When false the children skip cross-scale mixing entirely.
    pub cross_scale: bool,
}

impl EnhancerBlock {
    pub fn build<R: Rng + ?Sized>(
        spec: &EnhancerSpec,
        c_in: usize,
        store: &mut ParamStore,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if c_in == 0 {
            return Err(Error::Spec("enhancer input width must be positive".into()));
        }
        let d = spec.d_channels;
        let root = ConvUnit::init(store, &format!("{name}.root"), c_in, d, 1, 1, rng);
        let children: [ConvUnit; 3] = std::array::from_fn(|i| {
            ConvUnit::init(
                store,
                &format!("{name}.child{i}"),
                d / 3,
                d / 3,
                3,
                spec.child_dilations[i],
                rng,
            )
        });
        let leaves: [[ConvUnit; 3]; 3] = std::array::from_fn(|i| {
            std::array::from_fn(|k| {
                ConvUnit::init(
                    store,
                    &format!("{name}.leaf{i}{k}"),
                    d / 9,
                    d / 9,
                    3,
                    spec.leaf_dilations_by_child[i][k],
                    rng,
                )
            })
        });
        Ok(Self {
            spec: spec.clone(),
            c_in,
            root,
            children,
            leaves,
            gates: CrossScaleGates::eval(),
            cross_scale: true,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.c_in {
            return Err(Error::Input(format!(
                "enhancer expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let d = self.spec.d_channels;
        let root = self.root.apply_relu(tape, store, x)?;
        let groups = tape.split(root, &[d / 3; 3])?;
        let mut scales = [groups[0]; 3];
        for (i, (unit, &g)) in self.children.iter().zip(&groups).enumerate() {
            scales[i] = unit.apply_relu(tape, store, g)?;
        }
        if self.cross_scale {
            scales = cross_scale_mix(tape, scales[0], scales[1], scales[2], &self.gates)?;
        }
        let mut leaves = Vec::with_capacity(9);
        for (units, &child) in self.leaves.iter().zip(&scales) {
            let parts = tape.split(child, &[d / 9; 3])?;
            for (unit, &p) in units.iter().zip(&parts) {
                leaves.push(unit.apply_relu(tape, store, p)?);
            }
        }
        Ok(tape.concat(&leaves)?)
    }

    pub fn conv_units(&self) -> Vec<ConvUnit> {
        let mut out = vec![self.root];
        out.extend(self.children);
        out.extend(self.leaves.iter().flatten());
        out
    }
}

/// Conventional block: 1x1 compression followed by two dense 3x3 convs.
#[derive(Clone, Debug)]
pub struct StandardBlock {
    pub d_channels: usize,
    pub c_in: usize,
    pub root: ConvUnit,
    pub convs: [ConvUnit; 2],
}

impl StandardBlock {
    pub const DILATION: usize = 2;

    pub fn build<R: Rng + ?Sized>(
        d_channels: usize,
        c_in: usize,
        store: &mut ParamStore,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if d_channels == 0 || c_in == 0 {
            return Err(Error::Spec("standard block widths must be positive".into()));
        }
        let root = ConvUnit::init(store, &format!("{name}.root"), c_in, d_channels, 1, 1, rng);
        let convs = std::array::from_fn(|i| {
            ConvUnit::init(
                store,
                &format!("{name}.conv{i}"),
                d_channels,
                d_channels,
                3,
                Self::DILATION,
                rng,
            )
        });
        Ok(Self {
            d_channels,
            c_in,
            root,
            convs,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.c_in {
            return Err(Error::Input(format!(
                "block expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let mut y = self.root.apply_relu(tape, store, x)?;
        for unit in &self.convs {
            y = unit.apply_relu(tape, store, y)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BlockKind {
    #[default]
    Tree,
    Standard,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tree => "tree",
            Self::Standard => "standard",
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(Self::Tree),
            "standard" => Ok(Self::Standard),
            other => Err(Error::Spec(format!(
                "unknown block kind '{other}' (expected tree or standard)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Tree(EnhancerBlock),
    Standard(StandardBlock),
}

impl Block {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Self::Tree(b) => b.forward(tape, store, x),
            Self::Standard(b) => b.forward(tape, store, x),
        }
    }

    pub fn c_in(&self) -> usize {
        match self {
            Self::Tree(b) => b.c_in,
            Self::Standard(b) => b.c_in,
        }
    }

    pub fn c_out(&self) -> usize {
        match self {
            Self::Tree(b) => b.spec.d_channels,
            Self::Standard(b) => b.d_channels,
        }
    }

    pub fn conv_units(&self) -> Vec<ConvUnit> {
        match self {
            Self::Tree(b) => b.conv_units(),
            Self::Standard(b) => {
                let mut v = vec![b.root];
                v.extend(b.convs);
                v
            }
        }
    }

    /// `(weights only, weights and biases)` scalar counts.
    pub fn param_counts(&self, store: &ParamStore) -> (usize, usize) {
        self.conv_units().iter().fold((0, 0), |(w, all), u| {
            let nw = store.value(u.weight).numel();
            let nb = store.value(u.bias).numel();
            (w + nw, all + nw + nb)
        })
    }

    pub fn gates(&self) -> Option<CrossScaleGates> {
        match self {
            Self::Tree(b) => Some(b.gates),
            Self::Standard(_) => None,
        }
    }

    pub fn set_gates(&mut self, gates: CrossScaleGates) {
        if let Self::Tree(b) = self {
            b.gates = gates;
        }
    }
}

/// Build one tree block with its own parameter store, seeded deterministically.
pub fn build_enhancer(
    spec: &EnhancerSpec,
    c_in: usize,
    seed: u64,
) -> Result<(EnhancerBlock, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = EnhancerBlock::build(spec, c_in, &mut store, "enhancer", &mut rng)?;
    Ok((block, store))
}

/// Blocks wired with dense connections: block `k` (from 0) consumes the
/// backbone output concatenated with the outputs of blocks `0..k`, so its
/// input width is `backbone_out + k * D`.
#[allow(clippy::too_many_arguments)]
pub fn stack_dense_enhancers<R: Rng + ?Sized>(
    count: usize,
    kind: BlockKind,
    spec: &EnhancerSpec,
    backbone_out_channels: usize,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut R,
) -> Result<Vec<Block>> {
    let d = spec.d_channels;
    (0..count)
        .map(|k| {
            let c_in = backbone_out_channels + k * d;
            let name = format!("{prefix}.{k}");
            Ok(match kind {
                BlockKind::Tree => Block::Tree(EnhancerBlock::build(spec, c_in, store, &name, rng)?),
                BlockKind::Standard => {
                    Block::Standard(StandardBlock::build(d, c_in, store, &name, rng)?)
                }
            })
        })
        .collect()
}

/// Run a dense stack; returns the last block's output, or `x` for an empty stack.
pub fn dense_forward(blocks: &[Block], tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    let mut features = vec![x];
    let mut last = x;
    for block in blocks {
        let input = tape.concat(&features)?;
        last = block.forward(tape, store, input)?;
        features.push(last);
    }
    Ok(last)
}
