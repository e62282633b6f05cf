use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tape::{Tape, VarId};
use super::tensor::{Scalar, Tensor2};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: Scalar = 1e-5;

/// Widths of a one-hidden-layer MLP: linear → LayerNorm → GeLU → linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl MlpShape {
    /// The default recipe: hidden twice the input width, output same as input.
    pub fn expansion(width: usize) -> Self {
        MlpShape {
            input: width,
            hidden: 2 * width,
            output: width,
        }
    }
}

/// Map from parameter name to its tape leaf, built once per forward.
#[derive(Debug, Default)]
pub struct ParamMap {
    ids: BTreeMap<String, VarId>,
}

impl ParamMap {
    /// Register every parameter of `store` as a tape leaf.
    pub fn register_all(tape: &mut Tape, store: &ParamStore) -> ParamMap {
        let mut ids = BTreeMap::new();
        for (name, value) in store.iter() {
            ids.insert(name.to_string(), tape.leaf(value.clone()));
        }
        ParamMap { ids }
    }

    pub fn get(&self, name: &str) -> Result<VarId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Insert freshly initialized parameters for one MLP under `prefix`.
pub fn register_mlp_params(store: &mut ParamStore, prefix: &str, shape: MlpShape) -> Result<()> {
    store.insert_uniform(&format!("{prefix}.w1"), shape.input, shape.hidden, shape.input)?;
    store.insert_uniform(&format!("{prefix}.b1"), 1, shape.hidden, shape.input)?;
    store.insert(&format!("{prefix}.ln_scale"), ones(1, shape.hidden))?;
    store.insert(&format!("{prefix}.ln_shift"), Tensor2::zeros(1, shape.hidden))?;
    store.insert_uniform(&format!("{prefix}.w2"), shape.hidden, shape.output, shape.hidden)?;
    store.insert_uniform(&format!("{prefix}.b2"), 1, shape.output, shape.hidden)?;
    Ok(())
}

fn ones(r: usize, c: usize) -> Tensor2 {
    Tensor2::from_vec(r, c, vec![1.0; r * c]).expect("finite")
}

/// x·W + b recorded on the tape.
pub fn linear_on_tape(
    tape: &mut Tape,
    params: &ParamMap,
    prefix: &str,
    x: VarId,
) -> Result<VarId> {
    let w = params.get(&format!("{prefix}.w"))?;
    let b = params.get(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row_vec(y, b)
}

/// One-hidden-layer MLP on the tape:
/// h = x·W1 + b1; y = LayerNorm(h)·scale + shift; out = GeLU(y)·W2 + b2.
pub fn mlp_on_tape(tape: &mut Tape, params: &ParamMap, prefix: &str, x: VarId) -> Result<VarId> {
    let w1 = params.get(&format!("{prefix}.w1"))?;
    let b1 = params.get(&format!("{prefix}.b1"))?;
    let scale = params.get(&format!("{prefix}.ln_scale"))?;
    let shift = params.get(&format!("{prefix}.ln_shift"))?;
    let w2 = params.get(&format!("{prefix}.w2"))?;
    let b2 = params.get(&format!("{prefix}.b2"))?;

    check_mlp_shapes(tape, x, prefix, w1, b1, scale, shift, w2, b2)?;

    let h = tape.matmul(x, w1)?;
    let h = tape.add_row_vec(h, b1)?;
    let normed = tape.layer_norm_rows(h, LAYER_NORM_EPS);
    let scaled = tape.mul_row_vec(normed, scale)?;
    let shifted = tape.add_row_vec(scaled, shift)?;
    let activated = tape.gelu(shifted);
    let out = tape.matmul(activated, w2)?;
    tape.add_row_vec(out, b2)
}

#[allow(clippy::too_many_arguments)]
fn check_mlp_shapes(
    tape: &Tape,
    x: VarId,
    prefix: &str,
    w1: VarId,
    b1: VarId,
    scale: VarId,
    shift: VarId,
    w2: VarId,
    b2: VarId,
) -> Result<()> {
    let d_in = tape.value(x).cols();
    let (w1r, hidden) = tape.value(w1).shape();
    if w1r != d_in {
        return Err(Error::ShapeMismatch(format!(
            "{prefix}.w1: expected {d_in} input rows, got {w1r}"
        )));
    }
    for (name, id, want) in [
        ("b1", b1, (1, hidden)),
        ("ln_scale", scale, (1, hidden)),
        ("ln_shift", shift, (1, hidden)),
    ] {
        if tape.value(id).shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "{prefix}.{name}: expected {want:?}, got {:?}",
                tape.value(id).shape()
            )));
        }
    }
    let (w2r, out) = tape.value(w2).shape();
    if w2r != hidden {
        return Err(Error::ShapeMismatch(format!(
            "{prefix}.w2: expected {hidden} input rows, got {w2r}"
        )));
    }
    if tape.value(b2).shape() != (1, out) {
        return Err(Error::ShapeMismatch(format!(
            "{prefix}.b2: expected (1, {out}), got {:?}",
            tape.value(b2).shape()
        )));
    }
    Ok(())
}

/// Evaluate the MLP under `prefix` on `x` without keeping the tape.
pub fn mlp_forward(store: &ParamStore, prefix: &str, x: &Tensor2) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let params = ParamMap::register_all(&mut tape, store);
    let x_id = tape.leaf(x.clone());
    let out = mlp_on_tape(&mut tape, &params, prefix, x_id)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mlp_maps_to_zero() {
        let mut store = ParamStore::new(0);
        let shape = MlpShape::expansion(3);
        store.insert("m.w1", Tensor2::zeros(3, 6)).unwrap();
        store.insert("m.b1", Tensor2::zeros(1, 6)).unwrap();
        store.insert("m.ln_scale", Tensor2::zeros(1, 6)).unwrap();
        store.insert("m.ln_shift", Tensor2::zeros(1, 6)).unwrap();
        store.insert("m.w2", Tensor2::zeros(6, shape.output)).unwrap();
        store.insert("m.b2", Tensor2::zeros(1, shape.output)).unwrap();
        let x = Tensor2::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let y = mlp_forward(&store, "m", &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let mut store = ParamStore::new(0);
        register_mlp_params(&mut store, "m", MlpShape::expansion(4)).unwrap();
        let x = Tensor2::zeros(2, 3); // wrong width
        let err = mlp_forward(&store, "m", &x).unwrap_err();
        assert!(err.to_string().contains("m.w1"), "{err}");
    }

    #[test]
    fn matches_straight_line_reimplementation() {
        use rand::{Rng, SeedableRng};
        let mut store = ParamStore::new(42);
        let d = 4;
        register_mlp_params(&mut store, "m", MlpShape::expansion(d)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Tensor2::from_vec(3, d, (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let got = mlp_forward(&store, "m", &x).unwrap();

        // Independent straight-line evaluation.
        let w1 = store.get("m.w1").unwrap();
        let b1 = store.get("m.b1").unwrap();
        let sc = store.get("m.ln_scale").unwrap();
        let sh = store.get("m.ln_shift").unwrap();
        let w2 = store.get("m.w2").unwrap();
        let b2 = store.get("m.b2").unwrap();
        let hdim = 2 * d;
        for r in 0..3 {
            let mut h = vec![0.0; hdim];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut acc = b1.get(0, j);
                for c in 0..d {
                    acc += x.get(r, c) * w1.get(c, j);
                }
                *hj = acc;
            }
            let mean = h.iter().sum::<Scalar>() / hdim as Scalar;
            let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / hdim as Scalar;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let a: Vec<Scalar> = h
                .iter()
                .enumerate()
                .map(|(j, v)| super::super::tensor::gelu((v - mean) * inv * sc.get(0, j) + sh.get(0, j)))
                .collect();
            for j in 0..d {
                let mut acc = b2.get(0, j);
                for (k, av) in a.iter().enumerate() {
                    acc += av * w2.get(k, j);
                }
                assert!((got.get(r, j) - acc).abs() < 1e-12);
            }
        }
    }
}
