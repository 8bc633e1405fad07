//! Seeded random kernels: chains of elementwise statements with at most one
//! row reduction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::frontend::{compile_source, RowShape};
use crate::ir::KernelProgram;

pub const SHAPES: [RowShape; 3] = [
    RowShape { rows: None, cols: 16 },
    RowShape { rows: Some(8), cols: 16 },
    RowShape { rows: Some(127), cols: 513 },
];

/// Elementwise building blocks. Every one maps finite inputs of moderate
/// size to finite outputs of moderate size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaletteOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Tanh,
    Sqrt,
    Rsqrt,
    Max,
}

pub const FULL_PALETTE: [PaletteOp; 10] = [
    PaletteOp::Add,
    PaletteOp::Sub,
    PaletteOp::Mul,
    PaletteOp::Div,
    PaletteOp::Neg,
    PaletteOp::Exp,
    PaletteOp::Tanh,
    PaletteOp::Sqrt,
    PaletteOp::Rsqrt,
    PaletteOp::Max,
];

#[derive(Clone, Debug, PartialEq)]
pub struct RandomProgramSpec {
    pub seed: u64,
    /// Number of statements, 1 to 5.
    pub chain_len: usize,
    pub shape: RowShape,
    pub palette: Vec<PaletteOp>,
    /// Chance that one non-final statement is a row reduction.
    pub reduction_prob: f64,
}

impl RandomProgramSpec {
    pub fn new(seed: u64, chain_len: usize, shape: RowShape) -> Self {
        Self { seed, chain_len, shape, palette: FULL_PALETTE.to_vec(), reduction_prob: 0.6 }
    }

    /// Length and shape drawn from `seed` as well.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let len = rng.gen_range(1..=5);
        let shape = *SHAPES.choose(&mut rng).unwrap();
        Self::new(seed, len, shape)
    }
}

struct Gen {
    rng: ChaCha8Rng,
    /// `(name, is_row)` of everything defined so far.
    values: Vec<(String, bool)>,
    uses_y: bool,
}

impl Gen {
    /// A literal or an earlier value, and whether it is a row value.
    fn operand(&mut self) -> (String, bool) {
        if self.rng.gen_bool(0.25) {
            return (format!("{:.2}", self.rng.gen_range(0.25f32..2.0)), false);
        }
        let v = self.values.choose(&mut self.rng).unwrap().clone();
        self.uses_y |= v.0 == "y";
        v
    }

    fn elementwise(&mut self, op: PaletteOp, a: &str) -> (String, bool) {
        let (b, b_row) = self.operand();
        let binary = matches!(op, PaletteOp::Add | PaletteOp::Sub | PaletteOp::Mul | PaletteOp::Div | PaletteOp::Max);
        let e = match op {
            PaletteOp::Add => format!("{a} + {b}"),
            PaletteOp::Sub => format!("{a} - {b}"),
            PaletteOp::Mul => format!("{a} * {b}"),
            PaletteOp::Div => format!("{a} / (1.0 + {b} * {b})"),
            PaletteOp::Neg => format!("-{a}"),
            PaletteOp::Exp => format!("exp(tanh({a}))"),
            PaletteOp::Tanh => format!("tanh({a})"),
            PaletteOp::Sqrt => format!("sqrt({a} * {a} + 1.0)"),
            PaletteOp::Rsqrt => format!("rsqrt({a} * {a} + 0.5)"),
            PaletteOp::Max => format!("max({a}, {b})"),
        };
        (e, binary && b_row)
    }
}

/// Kernel source for `spec`. The same spec always yields the same text.
pub fn gen_random_source(spec: &RandomProgramSpec) -> String {
    assert!((1..=5).contains(&spec.chain_len), "chain length must be 1 to 5");
    assert!(!spec.palette.is_empty(), "empty palette");
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        values: vec![("x".into(), true)],
        uses_y: false,
    };
    if g.rng.gen_bool(0.5) {
        g.values.push(("y".into(), true));
    }
    let reduce_at = (spec.chain_len > 1 && g.rng.gen_bool(spec.reduction_prob))
        .then(|| g.rng.gen_range(0..spec.chain_len - 1));
    let mut stmts = Vec::new();
    let mut prev = "x".to_string();
    for i in 0..spec.chain_len {
        let last = i + 1 == spec.chain_len;
        let target = if last { "out".to_string() } else { format!("t{i}") };
        let is_row;
        let expr = if reduce_at == Some(i) {
            let src = g.values.iter().rev().find(|v| v.1).unwrap().0.clone();
            g.uses_y |= src == "y";
            let op = if g.rng.gen_bool(0.5) { "sum" } else { "max" };
            is_row = false;
            format!("{op}({src}, axis=0)")
        } else {
            let op = *spec.palette.choose(&mut g.rng).unwrap();
            let (mut e, other_row) = g.elementwise(op, &prev);
            let prev_is_row = g.values.iter().find(|v| v.0 == prev).is_some_and(|v| v.1);
            is_row = prev_is_row || other_row;
            if last && !is_row {
                e = format!("x * ({e})");
            }
            e
        };
        stmts.push(format!("  {target} = {expr};"));
        g.values.push((target.clone(), is_row));
        prev = target;
    }
    let params = if g.uses_y { "x: row<f32>, y: row<f32>" } else { "x: row<f32>" };
    format!("kernel rand{}({params}) -> (out: row<f32>) {{\n{}\n}}\n", spec.seed, stmts.join("\n"))
}

pub fn gen_random_program(spec: &RandomProgramSpec) -> KernelProgram {
    let src = gen_random_source(spec);
    compile_source(&src, spec.shape).unwrap_or_else(|e| panic!("generated kernel does not compile: {e}\n{src}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::verify;

    #[test]
    fn same_seed_same_program() {
        let s = RandomProgramSpec::from_seed(3);
        assert_eq!(gen_random_source(&s), gen_random_source(&s));
        assert_eq!(gen_random_program(&s).body, gen_random_program(&s).body);
    }

    #[test]
    fn length_one_is_single_elementwise() {
        let p = gen_random_program(&RandomProgramSpec::new(0, 1, SHAPES[1]));
        assert_eq!(p.count_ops(|o| o.as_generic().is_some()), 1);
        assert!(p.body.iter().all(|o| o.as_generic().is_none_or(|g| g.reductions.iter().all(Option::is_none))));
    }

    #[test]
    fn hundred_seeds_verify() {
        for seed in 0..100 {
            let p = gen_random_program(&RandomProgramSpec::from_seed(seed));
            assert!(verify(&p, None).is_ok(), "seed {seed}: {}", verify(&p, None));
        }
    }
}
