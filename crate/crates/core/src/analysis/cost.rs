//! Analytic and measured cost of one enhancer block, and receptive fields of
//! the nine scale paths.
//!
//! FLOPs follow the multiply-accumulate convention: one kernel MAC is one
//! unit, bias additions and activations are not counted.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scale_tree::{Block, BlockKind, EnhancerBlock, EnhancerSpec, LeafAssignment, StandardBlock};
use crate::tensor::{ParamStore, Shape, Tape, Tensor};
use crate::Result;

/// Receptive field of one root-to-leaf path: a 1x1 conv followed by two
/// stride-1 3x3 convs at the child and leaf dilations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfPath {
    pub child_dilation: usize,
    pub leaf_dilation: usize,
    pub rf: usize,
}

pub fn path_rf(child_dilation: usize, leaf_dilation: usize) -> usize {
    1 + 2 * (child_dilation + leaf_dilation)
}

/// The nine path receptive fields, in child-then-leaf order.
pub fn receptive_fields(spec: &EnhancerSpec) -> Vec<RfPath> {
    spec.paths()
        .map(|(c, l)| RfPath {
            child_dilation: c,
            leaf_dilation: l,
            rf: path_rf(c, l),
        })
        .collect()
}

pub fn max_rf(paths: &[RfPath]) -> usize {
    paths.iter().map(|p| p.rf).max().unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub kind: BlockKind,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    /// `5 D²`.
    pub analytic_params_tree: u64,
    /// `19 D²`.
    pub analytic_params_standard: u64,
    /// `5 D² W H`.
    pub analytic_flops_tree: u64,
    /// `19 D² W H`.
    pub analytic_flops_standard: u64,
    /// Weights of the constructed block (`c_in = D`), biases excluded.
    pub measured_params: u64,
    pub measured_params_with_bias: u64,
    /// Kernel MACs recorded during a forward pass on `1 x D x h x w`.
    pub measured_macs: u64,
    pub leaf_assignment: LeafAssignment,
    pub rf_paths: Vec<RfPath>,
    /// Paths under the other leaf assignment, for comparison.
    pub rf_paths_alternative: Vec<RfPath>,
}

impl CostReport {
    pub fn analytic_params(&self) -> u64 {
        match self.kind {
            BlockKind::Tree => self.analytic_params_tree,
            BlockKind::Standard => self.analytic_params_standard,
        }
    }

    pub fn analytic_flops(&self) -> u64 {
        match self.kind {
            BlockKind::Tree => self.analytic_flops_tree,
            BlockKind::Standard => self.analytic_flops_standard,
        }
    }

    /// `5 / 19`.
    pub fn tree_to_standard_ratio(&self) -> f64 {
        self.analytic_params_tree as f64 / self.analytic_params_standard as f64
    }

    pub fn max_rf(&self) -> usize {
        max_rf(&self.rf_paths)
    }

    /// Single-line `key=value` record.
    pub fn record(&self) -> String {
        let rfs: Vec<String> = self.rf_paths.iter().map(|p| p.rf.to_string()).collect();
        format!(
            "kind={} d={} h={} w={} params_analytic={} params_measured={} params_measured_with_bias={} \
             flops_analytic={} macs_measured={} params_tree={} params_standard={} ratio={:.6} \
             leaf_assignment={} rf=[{}] rf_max={} rf_max_alternative={}",
            self.kind.as_str(),
            self.d,
            self.h,
            self.w,
            self.analytic_params(),
            self.measured_params,
            self.measured_params_with_bias,
            self.analytic_flops(),
            self.measured_macs,
            self.analytic_params_tree,
            self.analytic_params_standard,
            self.tree_to_standard_ratio(),
            self.leaf_assignment.as_str(),
            rfs.join(","),
            self.max_rf(),
            max_rf(&self.rf_paths_alternative),
        )
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let check = |ok: bool| if ok { "ok" } else { "MISMATCH" };
        writeln!(f, "{} block, D={}, input {}x{}", self.kind.as_str(), self.d, self.h, self.w)?;
        writeln!(
            f,
            "  params   analytic {:>12}  measured {:>12}  ({})   with bias {}",
            self.analytic_params(),
            self.measured_params,
            check(self.analytic_params() == self.measured_params),
            self.measured_params_with_bias
        )?;
        writeln!(
            f,
            "  flops    analytic {:>12}  measured {:>12}  ({})",
            self.analytic_flops(),
            self.measured_macs,
            check(self.analytic_flops() == self.measured_macs)
        )?;
        writeln!(
            f,
            "  tree 5D^2 = {}, standard 19D^2 = {}, ratio {:.4}",
            self.analytic_params_tree,
            self.analytic_params_standard,
            self.tree_to_standard_ratio()
        )?;
        writeln!(f, "  receptive fields ({} leaf assignment):", self.leaf_assignment.as_str())?;
        let top = self.max_rf();
        for p in &self.rf_paths {
            let mark = if p.rf == top { "  <- max" } else { "" };
            writeln!(
                f,
                "    child d={} leaf d={} -> {}x{}{mark}",
                p.child_dilation, p.leaf_dilation, p.rf, p.rf
            )?;
        }
        let alt = match self.leaf_assignment {
            LeafAssignment::Forward => LeafAssignment::Reverse,
            LeafAssignment::Reverse => LeafAssignment::Forward,
        };
        write!(
            f,
            "  max {top}x{top}; the {} assignment would give {}x{}",
            alt.as_str(),
            max_rf(&self.rf_paths_alternative),
            max_rf(&self.rf_paths_alternative)
        )
    }
}

fn d_squared(d: usize) -> u64 {
    (d as u64) * (d as u64)
}

/// Analytic closed forms next to counts taken from a constructed block.
pub fn count_params_flops(kind: BlockKind, d: usize, h: usize, w: usize) -> Result<CostReport> {
    count_params_flops_with(kind, d, h, w, LeafAssignment::Reverse)
}

pub fn count_params_flops_with(
    kind: BlockKind,
    d: usize,
    h: usize,
    w: usize,
    leaf_assignment: LeafAssignment,
) -> Result<CostReport> {
    if h == 0 || w == 0 {
        return Err(crate::Error::Input("measurement input must be non-empty".into()));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = match kind {
        BlockKind::Tree => {
            let spec = EnhancerSpec::new(d, leaf_assignment)?;
            Block::Tree(EnhancerBlock::build(&spec, d, &mut store, "block", &mut rng)?)
        }
        BlockKind::Standard => Block::Standard(StandardBlock::build(d, d, &mut store, "block", &mut rng)?),
    };
    let (weights, with_bias) = block.param_counts(&store);

    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::uniform(Shape::new(1, d, h, w), -1.0, 1.0, &mut rng));
    block.forward(&mut tape, &store, x)?;

    let alternative = match leaf_assignment {
        LeafAssignment::Forward => LeafAssignment::Reverse,
        LeafAssignment::Reverse => LeafAssignment::Forward,
    };
    // path receptive fields do not depend on D
    let rf_of = |a| EnhancerSpec::new(9, a).map(|s| receptive_fields(&s));
    let hw = (h * w) as u64;
    Ok(CostReport {
        kind,
        d,
        h,
        w,
        analytic_params_tree: 5 * d_squared(d),
        analytic_params_standard: 19 * d_squared(d),
        analytic_flops_tree: 5 * d_squared(d) * hw,
        analytic_flops_standard: 19 * d_squared(d) * hw,
        measured_params: weights as u64,
        measured_params_with_bias: with_bias as u64,
        measured_macs: tape.stats().conv_macs,
        leaf_assignment,
        rf_paths: rf_of(leaf_assignment)?,
        rf_paths_alternative: rf_of(alternative)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_d18() {
        let r = count_params_flops(BlockKind::Tree, 18, 8, 8).unwrap();
        assert_eq!(r.analytic_params_tree, 1620);
        assert_eq!(r.analytic_params_standard, 6156);
        assert_eq!(r.analytic_flops_tree, 103_680);
        assert_eq!(r.measured_params, 1620);
        assert_eq!(r.measured_macs, 103_680);
        assert_eq!(r.measured_params_with_bias, 1620 + 18 + 3 * 6 + 9 * 2);
        assert_eq!(r.max_rf(), 17);
        assert_eq!(max_rf(&r.rf_paths_alternative), 21);
    }

    #[test]
    fn standard_block_counts() {
        let r = count_params_flops(BlockKind::Standard, 9, 4, 5).unwrap();
        assert_eq!(r.measured_params, 19 * 81);
        assert_eq!(r.measured_macs, 19 * 81 * 20);
    }

    #[test]
    fn rf_formula() {
        assert_eq!(path_rf(1, 1), 5);
        let spec = EnhancerSpec::new(9, LeafAssignment::Reverse).unwrap();
        let mut rfs: Vec<usize> = receptive_fields(&spec).iter().map(|p| p.rf).collect();
        rfs.sort_unstable();
        assert_eq!(rfs, [9, 11, 11, 13, 13, 13, 15, 15, 17]);
    }

    #[test]
    fn tree_rejects_bad_width() {
        assert!(count_params_flops(BlockKind::Tree, 10, 8, 8).is_err());
        let r = count_params_flops(BlockKind::Tree, 9, 8, 8).unwrap();
        assert!(r.record().contains("rf_max=17"));
        assert!(r.to_string().contains("17x17"));
    }
}
