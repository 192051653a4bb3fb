//! Reverse-mode tape over whole tensors.
//!
//! Each forward op pushes one node holding the output value, the parent node
//! ids, and a VJP closure mapping the output cotangent to one cotangent per
//! parent. Nodes are appended in evaluation order, so reverse insertion order
//! is a reverse topological order; `backward` visits each node exactly once.
//! A tape lives for one forward/backward pair and is dropped afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub(crate) type Vjp = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    vjp: Option<Vjp>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape::default())
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad`.
    pub fn leaf(self: &Rc<Self>, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.push_node(t, Vec::new(), None, needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(self: &Rc<Self>, t: Tensor) -> Var {
        self.push_node(t, Vec::new(), None, false)
    }

    pub(crate) fn push(
        self: &Rc<Self>,
        value: Tensor,
        parents: Vec<usize>,
        vjp: Vjp,
    ) -> Var {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        self.push_node(value, parents, Some(vjp), needs_grad)
    }

    fn push_node(
        self: &Rc<Self>,
        value: Tensor,
        parents: Vec<usize>,
        vjp: Option<Vjp>,
        needs_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, parents, vjp, needs_grad });
        Var { tape: Rc::clone(self), id }
    }

    /// Accumulates cotangents from `root` back to every gradient-tracked
    /// node. `seed` must match the root value's shape.
    pub fn backward_at(&self, root: usize, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::state("backward on a tape with no recorded forward"));
        }
        if root >= nodes.len() {
            return Err(Error::state(format!(
                "backward root {root} outside tape of {} nodes",
                nodes.len()
            )));
        }
        if seed.shape() != nodes[root].value.shape() {
            return Err(Error::dim(format!(
                "backward seed shape {} does not match output shape {}",
                seed.shape(),
                nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            if let Some(vjp) = &node.vjp {
                let parent_grads = vjp(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if !nodes[p].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                    grads[p] = Some(match grads[p].take() {
                        None => pg,
                        Some(acc) => acc.zip_map(&pg, |a, b| a + b).expect("grad shapes agree"),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradient map produced by one backward pass, keyed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Rc<Tape>,
    id: usize,
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub(crate) fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub(crate) fn same_tape(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(Error::state("operands recorded on different tapes"))
        }
    }

    /// Backward from this node with an explicit cotangent seed.
    pub fn backward_seeded(&self, seed: Tensor) -> Result<Gradients> {
        self.tape.backward_at(self.id, seed)
    }

    /// Backward from a scalar node with seed 1.
    pub fn backward(&self) -> Result<Gradients> {
        let shape = self.shape();
        if shape.numel() != 1 {
            return Err(Error::dim(format!(
                "plain backward needs a scalar output, got {shape}"
            )));
        }
        self.backward_seeded(Tensor::filled(shape, 1.0))
    }

    // ---- elementwise arithmetic ----

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let y = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.tape.push(
            y,
            vec![self.id, other.id],
            Box::new(|g| vec![g.clone(), g.clone()]),
        ))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let y = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape.push(
            y,
            vec![self.id, other.id],
            Box::new(|g| vec![g.clone(), g.map(|v| -v)]),
        ))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |a, b| a * b)?;
        Ok(self.tape.push(
            y,
            vec![self.id, other.id],
            Box::new(move |g| {
                vec![
                    g.zip_map(&b, |g, b| g * b).expect("shape fixed"),
                    g.zip_map(&a, |g, a| g * a).expect("shape fixed"),
                ]
            }),
        ))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |a, b| a / b)?;
        Ok(self.tape.push(
            y,
            vec![self.id, other.id],
            Box::new(move |g| {
                let da = g.zip_map(&b, |g, b| g / b).expect("shape fixed");
                let db_data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data().iter()))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect();
                let db = Tensor::from_vec(b.shape(), db_data).expect("shape fixed");
                vec![da, db]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Var {
        let y = self.value().map(|v| c * v);
        self.tape.push(y, vec![self.id], Box::new(move |g| vec![g.map(|v| c * v)]))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let y = self.value().map(|v| v + c);
        self.tape.push(y, vec![self.id], Box::new(|g| vec![g.clone()]))
    }

    pub fn abs(&self) -> Var {
        let x = self.value();
        let y = x.map(f64::abs);
        self.tape.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                vec![g
                    .zip_map(&x, |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                    .expect("shape fixed")]
            }),
        )
    }

    // ---- activations ----

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let x = self.value();
        let y = x.map(|v| if v > 0.0 { v } else { slope * v });
        self.tape.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                vec![g
                    .zip_map(&x, |g, x| if x > 0.0 { g } else { slope * g })
                    .expect("shape fixed")]
            }),
        )
    }

    pub fn sigmoid(&self) -> Var {
        let y = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        let y_saved = y.clone();
        self.tape.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                vec![g.zip_map(&y_saved, |g, y| g * y * (1.0 - y)).expect("shape fixed")]
            }),
        )
    }

    pub fn tanh(&self) -> Var {
        let y = self.value().map(f64::tanh);
        let y_saved = y.clone();
        self.tape.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                vec![g.zip_map(&y_saved, |g, y| g * (1.0 - y * y)).expect("shape fixed")]
            }),
        )
    }

    /// Softmax over the channel axis, independently per (b, h, w).
    pub fn softmax_channel(&self) -> Var {
        let x = self.value();
        let s = x.shape();
        let mut out = vec![0.0; s.numel()];
        for b in 0..s.b() {
            for h in 0..s.h() {
                for w in 0..s.w() {
                    let mut m = f64::NEG_INFINITY;
                    for c in 0..s.c() {
                        m = m.max(x.at(b, c, h, w));
                    }
                    let mut z = 0.0;
                    for c in 0..s.c() {
                        z += (x.at(b, c, h, w) - m).exp();
                    }
                    for c in 0..s.c() {
                        out[s.idx(b, c, h, w)] = (x.at(b, c, h, w) - m).exp() / z;
                    }
                }
            }
        }
        let y = Tensor::from_vec(s, out).expect("shape fixed");
        let y_saved = y.clone();
        self.tape.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                let s = y_saved.shape();
                let mut dx = vec![0.0; s.numel()];
                for b in 0..s.b() {
                    for h in 0..s.h() {
                        for w in 0..s.w() {
                            let mut dot = 0.0;
                            for c in 0..s.c() {
                                dot += g.at(b, c, h, w) * y_saved.at(b, c, h, w);
                            }
                            for c in 0..s.c() {
                                let i = s.idx(b, c, h, w);
                                dx[i] = y_saved.at(b, c, h, w) * (g.at(b, c, h, w) - dot);
                            }
                        }
                    }
                }
                vec![Tensor::from_vec(s, dx).expect("shape fixed")]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Var {
        let x = self.value();
        let total: f64 = x.data().iter().sum();
        let in_shape = x.shape();
        self.tape.push(
            Tensor::scalar(total),
            vec![self.id],
            Box::new(move |g| vec![Tensor::filled(in_shape, g.item())]),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.shape().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums over batch and spatial axes, keeping channels: (B,C,H,W) -> (1,C,1,1).
    pub fn sum_per_channel(&self) -> Var {
        let x = self.value();
        let s = x.shape();
        let mut out = vec![0.0; s.c()];
        for b in 0..s.b() {
            for c in 0..s.c() {
                for h in 0..s.h() {
                    for w in 0..s.w() {
                        out[c] += x.at(b, c, h, w);
                    }
                }
            }
        }
        let y = Tensor::from_vec(Shape::new(1, s.c(), 1, 1), out).expect("shape fixed");
        self.tape.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                let mut dx = vec![0.0; s.numel()];
                for b in 0..s.b() {
                    for c in 0..s.c() {
                        let gc = g.at(0, c, 0, 0);
                        for h in 0..s.h() {
                            for w in 0..s.w() {
                                dx[s.idx(b, c, h, w)] = gc;
                            }
                        }
                    }
                }
                vec![Tensor::from_vec(s, dx).expect("shape fixed")]
            }),
        )
    }

    /// Multiplies by a per-pixel weight map with a single channel,
    /// broadcasting it across this tensor's channels.
    pub fn broadcast_mul(&self, weight: &Var) -> Result<Var> {
        self.same_tape(weight)?;
        let x = self.value();
        let w = weight.value();
        let (sx, sw) = (x.shape(), w.shape());
        if sw.c() != 1 || sw.b() != sx.b() || sw.h() != sx.h() || sw.w() != sx.w() {
            return Err(Error::dim(format!(
                "broadcast_mul weight {sw} incompatible with input {sx}"
            )));
        }
        let mut out = vec![0.0; sx.numel()];
        for b in 0..sx.b() {
            for c in 0..sx.c() {
                for h in 0..sx.h() {
                    for wi in 0..sx.w() {
                        out[sx.idx(b, c, h, wi)] = x.at(b, c, h, wi) * w.at(b, 0, h, wi);
                    }
                }
            }
        }
        let y = Tensor::from_vec(sx, out).expect("shape fixed");
        Ok(self.tape.push(
            y,
            vec![self.id, weight.id],
            Box::new(move |g| {
                let mut dx = vec![0.0; sx.numel()];
                let mut dw = vec![0.0; sw.numel()];
                for b in 0..sx.b() {
                    for c in 0..sx.c() {
                        for h in 0..sx.h() {
                            for wi in 0..sx.w() {
                                let gi = g.at(b, c, h, wi);
                                dx[sx.idx(b, c, h, wi)] = gi * w.at(b, 0, h, wi);
                                dw[sw.idx(b, 0, h, wi)] += gi * x.at(b, c, h, wi);
                            }
                        }
                    }
                }
                vec![
                    Tensor::from_vec(sx, dx).expect("shape fixed"),
                    Tensor::from_vec(sw, dw).expect("shape fixed"),
                ]
            }),
        ))
    }

    // ---- channel structure ----

    pub fn concat_channel(parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_channel needs at least one input"))?;
        let tape = Rc::clone(&first.tape);
        let s0 = first.shape();
        let mut c_total = 0;
        for p in parts {
            first.same_tape(p)?;
            let s = p.shape();
            if s.b() != s0.b() || s.h() != s0.h() || s.w() != s0.w() {
                return Err(Error::dim(format!(
                    "concat_channel on mismatched shapes {s0} and {s}"
                )));
            }
            c_total += s.c();
        }
        let out_shape = Shape::new(s0.b(), c_total, s0.h(), s0.w());
        let mut out = vec![0.0; out_shape.numel()];
        let mut c_off = 0;
        let mut ranges = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            let s = v.shape();
            for b in 0..s.b() {
                for c in 0..s.c() {
                    for h in 0..s.h() {
                        for w in 0..s.w() {
                            out[out_shape.idx(b, c_off + c, h, w)] = v.at(b, c, h, w);
                        }
                    }
                }
            }
            ranges.push((c_off, s.c()));
            c_off += s.c();
        }
        let y = Tensor::from_vec(out_shape, out).expect("shape fixed");
        let parent_ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(
            y,
            parent_ids,
            Box::new(move |g| {
                let gs = g.shape();
                ranges
                    .iter()
                    .map(|&(off, span)| {
                        let ps = Shape::new(gs.b(), span, gs.h(), gs.w());
                        let mut dp = vec![0.0; ps.numel()];
                        for b in 0..gs.b() {
                            for c in 0..span {
                                for h in 0..gs.h() {
                                    for w in 0..gs.w() {
                                        dp[ps.idx(b, c, h, w)] = g.at(b, off + c, h, w);
                                    }
                                }
                            }
                        }
                        Tensor::from_vec(ps, dp).expect("shape fixed")
                    })
                    .collect()
            }),
        ))
    }

    /// Channel slice `lo..hi`. The VJP scatters into a zero tensor of the
    /// input shape.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Var> {
        let s = self.shape();
        if lo >= hi || hi > s.c() {
            return Err(Error::dim(format!(
                "slice_channels {lo}..{hi} outside 0..{}",
                s.c()
            )));
        }
        let x = self.value();
        let out_shape = Shape::new(s.b(), hi - lo, s.h(), s.w());
        let mut out = vec![0.0; out_shape.numel()];
        for b in 0..s.b() {
            for c in lo..hi {
                for h in 0..s.h() {
                    for w in 0..s.w() {
                        out[out_shape.idx(b, c - lo, h, w)] = x.at(b, c, h, w);
                    }
                }
            }
        }
        let y = Tensor::from_vec(out_shape, out).expect("shape fixed");
        Ok(self.tape.push(
            y,
            vec![self.id],
            Box::new(move |g| {
                let mut dx = vec![0.0; s.numel()];
                for b in 0..s.b() {
                    for c in lo..hi {
                        for h in 0..s.h() {
                            for w in 0..s.w() {
                                dx[s.idx(b, c, h, w)] = g.at(b, c - lo, h, w);
                            }
                        }
                    }
                }
                vec![Tensor::from_vec(s, dx).expect("shape fixed")]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &Rc<Tape>, shape: Shape, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::from_vec(shape, data).unwrap().with_grad())
    }

    #[test]
    fn chain_rule_on_polynomial() {
        // y = sum((2x + 3) * x); dy/dx = 4x + 3
        let tape = Tape::new();
        let x = leaf(&tape, Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 0.5]);
        let y = x.scale(2.0).add_scalar(3.0).mul(&x).unwrap().sum_all();
        let grads = y.backward().unwrap();
        let dx = grads.get(&x).unwrap();
        for (i, &xi) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!((dx.data()[i] - (4.0 * xi + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn fanout_accumulates() {
        let tape = Tape::new();
        let x = leaf(&tape, Shape::new(1, 1, 1, 2), vec![3.0, 4.0]);
        let y = x.add(&x).unwrap().sum_all();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_on_empty_tape_is_state_error() {
        let tape = Tape::new();
        let err = tape.backward_at(0, Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn backward_seed_shape_must_match() {
        let tape = Tape::new();
        let x = leaf(&tape, Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        let err = x.backward_seeded(Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
        assert!(x.backward().is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = leaf(&tape, Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        let c = tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![5.0, 7.0]).unwrap());
        let y = x.mul(&c).unwrap().sum_all();
        let grads = y.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[5.0, 7.0]);
        assert!(grads.get(&c).is_none());
    }

    #[test]
    fn mixed_tapes_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = leaf(&t1, Shape::new(1, 1, 1, 1), vec![1.0]);
        let b = leaf(&t2, Shape::new(1, 1, 1, 1), vec![1.0]);
        assert!(matches!(a.add(&b), Err(Error::State(_))));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let tape = Tape::new();
        let x = leaf(
            &tape,
            Shape::new(1, 3, 1, 2),
            vec![0.1, 100.0, -0.3, -100.0, 0.2, 0.0],
        );
        let y = x.softmax_channel().value();
        for w in 0..2 {
            let sum: f64 = (0..3).map(|c| y.at(0, c, 0, w)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for c in 0..3 {
                assert!(y.at(0, c, 0, w) >= 0.0);
            }
        }
        // Uniform logits give the uniform distribution.
        let u = leaf(&tape, Shape::new(1, 4, 1, 1), vec![2.5; 4]);
        let yu = u.softmax_channel().value();
        for c in 0..4 {
            assert!((yu.at(0, c, 0, 0) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_then_slice_restores_parts() {
        let tape = Tape::new();
        let a = leaf(&tape, Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&tape, Shape::new(1, 1, 1, 2), vec![5.0, 6.0]);
        let cat = Var::concat_channel(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 3, 1, 2));
        let back = cat.slice_channels(2, 3).unwrap();
        assert_eq!(back.value().data(), b.value().data());
        // Gradient of sum(slice) reaches only the sliced part.
        let grads = back.sum_all().backward().unwrap();
        assert_eq!(grads.get(&b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(&a).unwrap().data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn nodes_are_recorded_in_topological_order() {
        let tape = Tape::new();
        let x = leaf(&tape, Shape::new(1, 1, 1, 1), vec![2.0]);
        let y = x.scale(3.0);
        let z = y.mul(&x).unwrap();
        assert_eq!(tape.len(), 3);
        assert!(x.id() < y.id() && y.id() < z.id());
    }
}
