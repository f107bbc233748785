//! Central finite-difference gradient verification.

use super::{BinaryKind, Graph, PoolKind, Scalar, Shape, Tensor, UpsampleMode, Var};
use crate::error::{Error, Result};

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error<T: Scalar>(a: T, b: T) -> T {
    let denom = a.abs().max(b.abs()).max(T::lit(1e-8));
    (a - b).abs() / denom
}

/// Worst per-coordinate relative error between `analytic` and central
/// differences `(f(x + h·e) − f(x − h·e)) / 2h`.
pub fn compare_gradient<T, F>(mut f: F, x: &Tensor<T>, analytic: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if step <= T::zero() {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} must be positive")));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::shape(
            "grad_check",
            format!("gradient {} for input {}", analytic.shape(), x.shape()),
        ));
    }
    let two_h = step + step;
    let mut probe = x.clone();
    let mut worst = T::zero();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = finite(f(&probe)?)?;
        probe.data_mut()[i] = orig - step;
        let down = finite(f(&probe)?)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / two_h;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn finite<T: Scalar>(v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("function value {v}")))
    }
}

/// Per-coordinate view of a finite-difference check over several tensors.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradientAudit {
    pub coordinates: usize,
    /// Worst relative error at the primary step.
    pub worst: f64,
    pub tolerance: f64,
    /// Coordinates above `tolerance` at the primary step.
    pub over_tolerance: usize,
    /// Largest analytic magnitude among those coordinates.
    pub max_abs_grad_over: f64,
    /// Worst relative error of those coordinates at the wide step.
    pub worst_over_at_wide_step: f64,
}

impl GradientAudit {
    pub fn strict_pass(&self) -> bool {
        self.worst <= self.tolerance
    }

    /// Every coordinate that misses the tolerance has a gradient below
    /// `small` and meets the tolerance once the step is widened, which is the
    /// signature of rounding in the function value rather than a wrong
    /// derivative.
    pub fn rounding_limited(&self, small: f64) -> bool {
        self.over_tolerance == 0 || (self.max_abs_grad_over < small && self.worst_over_at_wide_step <= self.tolerance)
    }
}

/// Central differences over every coordinate of every tensor in `xs`,
/// compared with `analytic`; coordinates above `tol` are re-checked with
/// `wide_step`.
pub fn audit_gradients<F>(
    f: F,
    xs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    step: f64,
    wide_step: f64,
    tol: f64,
) -> Result<GradientAudit>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if xs.len() != analytic.len() || xs.iter().zip(analytic).any(|(x, a)| x.shape() != a.shape()) {
        return Err(Error::InvalidArgument("analytic gradients do not match the inputs".into()));
    }
    let mut probe = xs.to_vec();
    let mut central = |t: usize, i: usize, h: f64| -> Result<f64> {
        let orig = probe[t].data()[i];
        probe[t].data_mut()[i] = orig + h;
        let up = finite(f(&probe)?)?;
        probe[t].data_mut()[i] = orig - h;
        let down = finite(f(&probe)?)?;
        probe[t].data_mut()[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    let mut audit = GradientAudit {
        coordinates: 0,
        worst: 0.0,
        tolerance: tol,
        over_tolerance: 0,
        max_abs_grad_over: 0.0,
        worst_over_at_wide_step: 0.0,
    };
    for (t, a) in analytic.iter().enumerate() {
        for i in 0..a.numel() {
            let g = a.data()[i];
            let e = relative_error(g, central(t, i, step)?);
            audit.coordinates += 1;
            audit.worst = audit.worst.max(e);
            if e > tol {
                audit.over_tolerance += 1;
                audit.max_abs_grad_over = audit.max_abs_grad_over.max(g.abs());
                let wide = relative_error(g, central(t, i, wide_step)?);
                audit.worst_over_at_wide_step = audit.worst_over_at_wide_step.max(wide);
            }
        }
    }
    Ok(audit)
}

/// Evaluates the scalar built by `f` at `x` without recording gradients.
pub fn eval_scalar<T, F>(f: &F, x: &Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    let s = g.shape(out);
    if s.numel() != 1 {
        return Err(Error::NonScalarLoss(s));
    }
    Ok(g.value(out).data()[0])
}

/// Analytic gradient of the scalar built by `f` at `x`.
pub fn analytic_gradient<T, F>(f: &F, x: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    g.backward(out)?;
    Ok(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Worst relative error between the graph's gradient of `f` and central
/// differences with the given step.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, x)?;
    compare_gradient(|p| eval_scalar(&f, p), x, &analytic, step)
}

/// A scalar-valued graph function that can be instantiated at any precision.
pub trait ScalarFn {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Checks an `f32` analytic gradient against central differences taken on
/// the `f64` promotion of the same function, so the reference is not
/// swamped by single-precision rounding of the function value.
pub fn grad_check_f32<F: ScalarFn>(f: &F, x: &Tensor<f32>, step: f64) -> Result<f64> {
    let analytic = analytic_gradient(&|g: &mut Graph<f32>, v| f.build(g, v), x)?;
    let wide = |g: &mut Graph<f64>, v| f.build(g, v);
    compare_gradient(|p| eval_scalar(&wide, p), &x.cast(), &analytic.cast(), step)
}


/// Smooth deterministic fill `sin(0.37·i + phase)·scale`, available at any
/// precision and free of ties and exact zeros at the sizes used here.
pub fn wave<T: Scalar>(shape: impl Into<Shape>, phase: f64, scale: f64) -> Tensor<T> {
    let shape = shape.into();
    let data = (0..shape.numel())
        .map(|i| T::lit((0.37 * i as f64 + phase).sin() * scale))
        .collect();
    Tensor::from_vec(shape, data).expect("wave shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CaseOp {
    ConvInput { stride: usize },
    ConvWeight,
    ConvBias,
    Add,
    Sub,
    Mul,
    ScalarBroadcast,
    Relu,
    Sigmoid,
    Scale,
    AddScalar,
    ScaleChannelsInput,
    ScaleChannelsGate,
    ScaleSpatialInput,
    ScaleSpatialGate,
    Concat,
    Slice,
    Chunk,
    Pool(PoolKind),
    Upsample(UpsampleMode),
    AvgPool2,
    HaarAnalysis,
    HaarSynthesis,
    Sum,
    Mean,
    BceWithLogits,
    Mse,
}

/// One differentiable graph operation reduced to a scalar by a fixed
/// weighted sum, with the differentiated input of the given shape.
#[derive(Clone, Copy, Debug)]
pub struct OpCase {
    pub name: &'static str,
    pub shape: Shape,
    op: CaseOp,
}

impl OpCase {
    /// Deterministic input at which to check the gradient.
    pub fn input<T: Scalar>(&self) -> Tensor<T> {
        wave(self.shape, 0.3, 1.5)
    }
}

/// Every differentiable graph operation, each with respect to each of its
/// differentiable operands. Inputs hold at most 128 elements, the size of
/// `[1, 2, 8, 8]`.
pub fn op_cases() -> Vec<OpCase> {
    use CaseOp::*;
    let s = Shape::new;
    let case = |name, shape, op| OpCase { name, shape, op };
    vec![
        case("conv2d/input", s(1, 3, 6, 6), ConvInput { stride: 1 }),
        case("conv2d/input-strided", s(1, 2, 7, 7), ConvInput { stride: 2 }),
        case("conv2d/weight", s(4, 3, 3, 3), ConvWeight),
        case("conv2d/bias", s(4, 1, 1, 1), ConvBias),
        case("add", s(2, 4, 4, 4), Add),
        case("sub", s(2, 4, 4, 4), Sub),
        case("mul", s(2, 4, 4, 4), Mul),
        case("mul/scalar-operand", s(1, 1, 1, 1), ScalarBroadcast),
        case("relu", s(2, 4, 4, 4), Relu),
        case("sigmoid", s(2, 4, 4, 4), Sigmoid),
        case("scale", s(2, 4, 4, 4), Scale),
        case("add_scalar", s(2, 4, 4, 4), AddScalar),
        case("scale_channels/input", s(2, 4, 4, 4), ScaleChannelsInput),
        case("scale_channels/gate", s(2, 4, 1, 1), ScaleChannelsGate),
        case("scale_spatial/input", s(2, 4, 4, 4), ScaleSpatialInput),
        case("scale_spatial/gate", s(2, 1, 4, 4), ScaleSpatialGate),
        case("concat_channels", s(2, 2, 4, 4), Concat),
        case("slice_channels", s(2, 4, 4, 4), Slice),
        case("chunk_channels", s(2, 4, 4, 4), Chunk),
        case("pool/global-avg", s(2, 4, 4, 4), Pool(PoolKind::GlobalAvg)),
        case("pool/global-max", s(2, 4, 4, 4), Pool(PoolKind::GlobalMax)),
        case("pool/channel-mean", s(2, 4, 4, 4), Pool(PoolKind::ChannelMean)),
        case("pool/channel-max", s(2, 4, 4, 4), Pool(PoolKind::ChannelMax)),
        case("upsample/nearest", s(2, 2, 4, 4), Upsample(UpsampleMode::Nearest)),
        case("upsample/bilinear", s(2, 2, 4, 4), Upsample(UpsampleMode::Bilinear)),
        case("avg_pool2", s(1, 2, 8, 8), AvgPool2),
        case("haar_analysis", s(1, 2, 8, 8), HaarAnalysis),
        case("haar_synthesis", s(2, 4, 4, 4), HaarSynthesis),
        case("sum", s(2, 4, 4, 4), Sum),
        case("mean", s(2, 4, 4, 4), Mean),
        case("bce_with_logits", s(2, 1, 8, 8), BceWithLogits),
        case("mse", s(2, 1, 8, 8), Mse),
    ]
}

impl ScalarFn for OpCase {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        use CaseOp::*;
        let sh = self.shape;
        let mut konst = |shape: Shape, phase: f64| g.constant(wave(shape, phase, 0.8));
        let y = match self.op {
            ConvInput { stride } => {
                let w = konst(Shape::new(4, sh.c(), 3, 3), 1.1);
                let b = konst(Shape::new(4, 1, 1, 1), 2.0);
                g.conv2d(x, w, Some(b), stride, 1)?
            }
            ConvWeight => {
                let inp = konst(Shape::new(2, 3, 6, 6), 0.9);
                g.conv2d(inp, x, None, 1, 1)?
            }
            ConvBias => {
                let inp = konst(Shape::new(2, 3, 5, 5), 0.9);
                let w = konst(Shape::new(4, 3, 3, 3), 1.1);
                g.conv2d(inp, w, Some(x), 1, 1)?
            }
            Add | Sub | Mul => {
                let other = konst(sh, 1.7);
                let kind = match self.op {
                    Add => BinaryKind::Add,
                    Sub => BinaryKind::Sub,
                    _ => BinaryKind::Mul,
                };
                g.binary(kind, x, other)?
            }
            ScalarBroadcast => {
                let other = konst(Shape::new(2, 3, 4, 4), 1.7);
                g.mul(other, x)?
            }
            Relu => g.relu(x),
            Sigmoid => g.sigmoid(x),
            Scale => g.scale(x, T::lit(-1.75)),
            AddScalar => {
                let y = g.add_scalar(x, T::lit(0.5));
                g.mul(y, x)?
            }
            ScaleChannelsInput => {
                let gate = konst(Shape::new(sh.b(), sh.c(), 1, 1), 0.2);
                g.scale_channels(x, gate)?
            }
            ScaleChannelsGate => {
                let inp = konst(Shape::new(sh.b(), sh.c(), 4, 4), 0.2);
                g.scale_channels(inp, x)?
            }
            ScaleSpatialInput => {
                let gate = konst(Shape::new(sh.b(), 1, sh.h(), sh.w()), 0.2);
                g.scale_spatial(x, gate)?
            }
            ScaleSpatialGate => {
                let inp = konst(Shape::new(sh.b(), 3, sh.h(), sh.w()), 0.2);
                g.scale_spatial(inp, x)?
            }
            Concat => {
                let other = konst(sh.with_c(3), 0.4);
                g.concat_channels(&[other, x])?
            }
            Slice => g.slice_channels(x, 1, 2)?,
            Chunk => {
                let parts = g.chunk_channels(x, 2)?;
                g.mul(parts[0], parts[1])?
            }
            Pool(kind) => g.pool(kind, x)?,
            Upsample(mode) => g.upsample2(x, mode),
            AvgPool2 => g.avg_pool2(x)?,
            HaarAnalysis => g.haar_analysis(x)?,
            HaarSynthesis => g.haar_synthesis(x)?,
            Sum => return Ok(g.sum(x)),
            Mean => return Ok(g.mean(x)),
            BceWithLogits => {
                let t = wave::<T>(sh, 0.6, 0.5).map(|v| v + T::lit(0.5));
                return g.bce_with_logits(x, &t);
            }
            Mse => {
                let t = konst(sh, 2.2);
                return g.mse(x, t);
            }
        };
        let probe = g.constant(wave(g.shape(y), 0.05, 1.0));
        let weighted = g.mul(y, probe)?;
        Ok(g.sum(weighted))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn([1, 2, 3, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([1, 2, 3, 3], 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let p = g.mul(v, wv)?;
                Ok(g.sum(p))
            },
            &x,
            1e-1,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum_is_accurate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn([1, 2, 4, 4], 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let s = g.sigmoid(v);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([1, 1, 3, 3], 1.0, &mut rng);
        // d/dx sum(x²) is 2x; hand it x instead
        let wrong = x.clone();
        let err = compare_gradient(|p| Ok(p.sum_sq()), &x, &wrong, 1e-5).unwrap();
        assert!(err > 0.4, "{err}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::<f64>::ones([1, 1, 1, 2]);
        let r = compare_gradient(|_| Ok(f64::NAN), &x, &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
