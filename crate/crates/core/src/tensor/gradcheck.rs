use super::{BoundParams, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Maximum relative error between the tape gradient of scalar `f` at `x`
/// and central differences with step `h`.
///
/// Error per coordinate is `|analytic - fd| / (|analytic| + |fd| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|vars| f(vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_sampled(f, inputs, h, usize::MAX, 1e-12, 0.0)
}

/// Checks a model loss over every tensor of `store`, probing at most
/// `max_coords` evenly spaced coordinates per tensor.
///
/// Models contain exact invariances (a key bias shifts every attention logit
/// of a row equally), so some true gradients are zero while the central
/// difference only sees rounding noise of about `ε·|f| / h`. Here the
/// denominator is therefore floored at `1e-5`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64, max_coords: usize) -> Result<f64>
where
    F: for<'t> Fn(&BoundParams<'t>) -> Result<Var<'t>>,
{
    grad_check_sampled(
        |vars| f(&store.bind_vars(vars)),
        store.tensors(),
        h,
        max_coords,
        0.0,
        PARAM_DENOMINATOR_FLOOR,
    )
}

const PARAM_DENOMINATOR_FLOOR: f64 = 1e-5;

fn grad_check_sampled<F>(f: F, inputs: &[Tensor], h: f64, max_coords: usize, offset: f64, floor: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::Contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.param(t)).collect();
        let out = f(&vars)?;
        if out.numel() != 1 {
            return Err(TensorError::Contract("grad_check needs a scalar function".into()));
        }
        Ok(out.item())
    };

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let stride = input.numel().div_ceil(max_coords.max(1)).max(1);
        for coord in (0..input.numel()).step_by(stride) {
            let orig = input.data()[coord];
            probe[which].data_mut()[coord] = orig + h;
            let plus = eval(&probe)?;
            probe[which].data_mut()[coord] = orig - h;
            let minus = eval(&probe)?;
            probe[which].data_mut()[coord] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[which][coord];
            worst = worst.max((a - fd).abs() / (a.abs() + fd.abs() + offset).max(floor));
        }
    }
    Ok(worst)
}
