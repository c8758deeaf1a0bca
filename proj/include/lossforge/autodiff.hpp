#pragma once

#include <functional>

#include "lossforge/graph.hpp"

namespace lossforge::ad {

// Builder of a scalar objective from a parameter leaf.
using ScalarFn = std::function<Var(Graph&, Var theta)>;
// Builder of a scalar objective from parameter and hyperparameter leaves.
using BilevelFn = std::function<Var(Graph&, Var theta, Var alpha)>;

inline Tensor gradient(const ScalarFn& f, const Tensor& theta) {
  Graph g;
  Var th = g.value(theta);
  Var loss = f(g, th);
  return g.grad(loss, {th}).at(th);
}

// Hessian-vector product (d^2 L / d theta^2) v via double backward: the first
// backward pass builds gradient nodes on the tape, <v, grad> is then
// differentiated again.
inline Tensor hvp(const ScalarFn& f, const Tensor& theta, const Tensor& v) {
  if (theta.shape != v.shape)
    throw ShapeError("hvp: v must have the shape of theta, got " + shape_str(v.shape));
  Graph g;
  Var th = g.value(theta);
  Var loss = f(g, th);
  Var gth = g.grad_vars(loss, {th})[0];
  Var vv = g.constant(v);
  Var s = g.sum_all(g.mul(vv, gth));
  Var hv = g.grad_vars(s, {th})[0];
  return g.eval(hv);
}

// v^T (d^2 L / d theta d alpha), returned with the shape of alpha.
inline Tensor mixed_vjp(const BilevelFn& f, const Tensor& theta, const Tensor& alpha,
                        const Tensor& v) {
  if (theta.shape != v.shape)
    throw ShapeError("mixed_vjp: v must have the shape of theta, got " + shape_str(v.shape));
  Graph g;
  Var th = g.value(theta);
  Var al = g.value(alpha);
  Var loss = f(g, th, al);
  Var gth = g.grad_vars(loss, {th})[0];
  Var vv = g.constant(v);
  Var s = g.sum_all(g.mul(vv, gth));
  Var mv = g.grad_vars(s, {al})[0];
  return g.eval(mv);
}

}  // namespace lossforge::ad
