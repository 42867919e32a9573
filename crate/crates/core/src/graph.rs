//! Tape-based reverse-mode differentiation over [`Tensor4`] values.

use crate::error::{shape_err, Result};
use crate::ops::{self, BnSaved, ConvGeom};
use crate::tensor::{Real, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded op. Returns one optional gradient buffer per
/// input, in input order.
pub trait Backward<T: Real>: Send + Sync {
    fn backward(&self, inputs: &[&Tensor4<T>], output: &Tensor4<T>, grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor4<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Batch-norm behaviour for one call.
#[derive(Clone, Debug)]
pub enum BnMode<'a, T> {
    /// Normalise with batch statistics.
    Train { eps: f64 },
    /// Normalise with the supplied running statistics.
    Infer { mean: &'a [T], var: &'a [T], eps: f64 },
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Gradients are accumulated only for leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), rule: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor4<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor4::zeros([0, 0, 0, 0]))
    }

    /// Records an op with a custom backward rule.
    pub fn push(&mut self, value: Tensor4<T>, inputs: Vec<Var>, rule: Box<dyn Backward<T>>) -> Var {
        debug_assert!(
            !inputs.iter().all(|i| self.nodes[i.0].value.is_finite()) || value.is_finite(),
            "non-finite output from finite inputs"
        );
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, inputs, rule: Some(rule), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, geom: ConvGeom) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(weight), geom)?;
        Ok(self.push(y, vec![x, weight], Box::new(ConvRule(geom))))
    }

    /// Returns the normalised output and, in training mode, the batch
    /// statistics used (for running-estimate updates).
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnSaved<T>>)> {
        let (xs, gs, bs) = (self.value(x), self.value(scale), self.value(shift));
        match mode {
            BnMode::Train { eps } => {
                let (y, saved) = ops::batch_norm_train(xs, gs.data(), bs.data(), eps)?;
                let v = self.push(y, vec![x, scale, shift], Box::new(BnTrainRule(saved.clone())));
                Ok((v, Some(saved)))
            }
            BnMode::Infer { mean, var, eps } => {
                let y = ops::batch_norm_infer(xs, gs.data(), bs.data(), mean, var, eps)?;
                let rule = BnInferRule { mean: mean.to_vec(), var: var.to_vec(), eps };
                Ok((self.push(y, vec![x, scale, shift], Box::new(rule)), None))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, vec![x], Box::new(ReluRule))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, vec![x], Box::new(SigmoidRule))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, vec![a, b], Box::new(AddRule)))
    }

    /// Sum of any number of same-shaped values.
    pub fn sum(&mut self, vars: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = vars.split_first() else {
            return shape_err("sum of zero values");
        };
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let y = self.value(x).map(|v| v * f);
        self.push(y, vec![x], Box::new(ScaleRule(f)))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = ops::bilinear_upsample2x(self.value(x))?;
        Ok(self.push(y, vec![x], Box::new(UpsampleRule)))
    }

    pub fn avg_downsample2x(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_downsample2x(self.value(x))?;
        Ok(self.push(y, vec![x], Box::new(DownsampleRule)))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = ops::global_avg_pool(self.value(x));
        self.push(y, vec![x], Box::new(GlobalPoolRule))
    }

    /// Scalar `Σ weights·x`, used to reduce a tensor output for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return shape_err(format!("weighted_sum: {} weights for {} values", weights.len(), self.value(x).len()));
        }
        let s = self.value(x).data().iter().zip(&weights).fold(T::zero(), |a, (&v, &w)| a + v * w);
        let y = Tensor4::full([1, 1, 1, 1], s);
        Ok(self.push(y, vec![x], Box::new(WeightedSumRule(weights))))
    }

    /// Flattens same-(batch, channel) tensors of any spatial size into one
    /// `(n, c, 1, Σ h·w)` row so they can share per-channel statistics.
    pub fn pack_spatial(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("pack_spatial of zero values");
        };
        let [n, c, _, _] = self.value(first).dims();
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let [xn, xc, h, w] = self.value(x).dims();
            if (xn, xc) != (n, c) {
                return shape_err(format!("pack_spatial: {:?} vs ({n}, {c}, ..)", self.value(x).dims()));
            }
            sizes.push(h * w);
        }
        let total: usize = sizes.iter().sum();
        let mut out = Tensor4::zeros([n, c, 1, total]);
        for bc in 0..n * c {
            let mut off = 0;
            for (&x, &hw) in xs.iter().zip(&sizes) {
                let src = &self.value(x).data()[bc * hw..(bc + 1) * hw];
                out.data_mut()[bc * total + off..bc * total + off + hw].copy_from_slice(src);
                off += hw;
            }
        }
        Ok(self.push(out, xs.to_vec(), Box::new(PackRule { sizes })))
    }

    /// Inverse of [`Tape::pack_spatial`] for the part starting at `offset`.
    pub fn unpack_spatial(&mut self, packed: Var, offset: usize, h: usize, w: usize) -> Result<Var> {
        let [n, c, one, total] = self.value(packed).dims();
        if one != 1 || offset + h * w > total {
            return shape_err(format!("unpack_spatial: {h}x{w} at {offset} from {:?}", self.value(packed).dims()));
        }
        let hw = h * w;
        let src = self.value(packed).data();
        let mut data = Vec::with_capacity(n * c * hw);
        for bc in 0..n * c {
            data.extend_from_slice(&src[bc * total + offset..bc * total + offset + hw]);
        }
        let y = Tensor4::new([n, c, h, w], data)?;
        Ok(self.push(y, vec![packed], Box::new(UnpackRule { offset })))
    }

    /// Reverse pass from `root`, seeded with ones. Gradients are stored on
    /// every node that requires them and read back with [`Tape::grad`].
    pub fn backward(&mut self, root: Var) {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.len()]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(rule) = &self.nodes[i].rule {
                let node = &self.nodes[i];
                let inputs: Vec<&Tensor4<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let input_grads = rule.backward(&inputs, &node.value, &g);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (v, ig) in node.inputs.clone().into_iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                        slot => *slot = Some(ig),
                    }
                }
            }
            // Lengths match by construction.
            self.nodes[i].value.set_grad(g).expect("gradient shape");
        }
    }
}

struct ConvRule(ConvGeom);
impl<T: Real> Backward<T> for ConvRule {
    fn backward(&self, inputs: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (gx, gw) = ops::conv2d_backward(inputs[0], inputs[1], self.0, g, true, true);
        vec![gx, gw]
    }
}

struct BnTrainRule<T>(BnSaved<T>);
impl<T: Real> Backward<T> for BnTrainRule<T> {
    fn backward(&self, inputs: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (gx, gs, gb) = ops::batch_norm_train_backward(inputs[0], inputs[1].data(), &self.0, g);
        vec![Some(gx), Some(gs), Some(gb)]
    }
}

struct BnInferRule<T> {
    mean: Vec<T>,
    var: Vec<T>,
    eps: f64,
}
impl<T: Real> Backward<T> for BnInferRule<T> {
    fn backward(&self, inputs: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let (gx, gs, gb) =
            ops::batch_norm_infer_backward(inputs[0], inputs[1].data(), &self.mean, &self.var, self.eps, g);
        vec![Some(gx), Some(gs), Some(gb)]
    }
}

struct ReluRule;
impl<T: Real> Backward<T> for ReluRule {
    fn backward(&self, inputs: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let gx = inputs[0].data().iter().zip(g).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() });
        vec![Some(gx.collect())]
    }
}

struct SigmoidRule;
impl<T: Real> Backward<T> for SigmoidRule {
    fn backward(&self, _: &[&Tensor4<T>], out: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(out.data().iter().zip(g).map(|(&s, &g)| g * s * (T::one() - s)).collect())]
    }
}

struct AddRule;
impl<T: Real> Backward<T> for AddRule {
    fn backward(&self, _: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct ScaleRule<T>(T);
impl<T: Real> Backward<T> for ScaleRule<T> {
    fn backward(&self, _: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

struct UpsampleRule;
impl<T: Real> Backward<T> for UpsampleRule {
    fn backward(&self, inputs: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(ops::bilinear_upsample2x_backward(inputs[0].dims(), g))]
    }
}

struct DownsampleRule;
impl<T: Real> Backward<T> for DownsampleRule {
    fn backward(&self, inputs: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(ops::avg_downsample2x_backward(inputs[0].dims(), g))]
    }
}

struct GlobalPoolRule;
impl<T: Real> Backward<T> for GlobalPoolRule {
    fn backward(&self, inputs: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = inputs[0].dims();
        let inv = T::of(1.0 / (h * w) as f64);
        let mut gx = vec![T::zero(); n * c * h * w];
        for (bc, chunk) in gx.chunks_mut(h * w).enumerate() {
            chunk.fill(g[bc] * inv);
        }
        vec![Some(gx)]
    }
}

struct PackRule {
    sizes: Vec<usize>,
}
impl<T: Real> Backward<T> for PackRule {
    fn backward(&self, inputs: &[&Tensor4<T>], out: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, c, _, total] = out.dims();
        let mut grads: Vec<Vec<T>> = inputs.iter().map(|x| Vec::with_capacity(x.len())).collect();
        for bc in 0..n * c {
            let mut off = 0;
            for (gi, &hw) in grads.iter_mut().zip(&self.sizes) {
                gi.extend_from_slice(&g[bc * total + off..bc * total + off + hw]);
                off += hw;
            }
        }
        grads.into_iter().map(Some).collect()
    }
}

struct UnpackRule {
    offset: usize,
}
impl<T: Real> Backward<T> for UnpackRule {
    fn backward(&self, inputs: &[&Tensor4<T>], out: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let [n, c, _, total] = inputs[0].dims();
        let hw = out.height() * out.width();
        let mut gx = vec![T::zero(); inputs[0].len()];
        for bc in 0..n * c {
            gx[bc * total + self.offset..bc * total + self.offset + hw].copy_from_slice(&g[bc * hw..(bc + 1) * hw]);
        }
        vec![Some(gx)]
    }
}

struct WeightedSumRule<T>(Vec<T>);
impl<T: Real> Backward<T> for WeightedSumRule<T> {
    fn backward(&self, _: &[&Tensor4<T>], _: &Tensor4<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.0.iter().map(|&w| w * g[0]).collect())]
    }
}
