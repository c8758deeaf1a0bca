#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "lossforge/autodiff.hpp"
#include "lossforge/graph.hpp"
#include "lossforge/rng.hpp"
#include "support/finite_diff.hpp"

using lossforge::NumericalError;
using lossforge::ShapeError;
using lossforge::Tensor;
using lossforge::UnknownLeaf;
using namespace lossforge::ad;
using lftest::fd_gradient;
using lftest::fd_hvp;
using lftest::fd_mixed_vjp;
using lftest::rel_err;

namespace {

using Builder = std::function<Var(Graph&, Var)>;

double eval_field(const Builder& build, const Tensor& x) {
  Graph g;
  Var xv = g.value(x);
  return g.eval_scalar(build(g, xv));
}

Tensor impl_gradient(const Builder& build, const Tensor& x) {
  Graph g;
  Var xv = g.value(x);
  Var loss = build(g, xv);
  return g.grad(loss, {xv}).at(xv);
}

}  // namespace

TEST_CASE("forward evaluation basics") {
  SECTION("square of a scalar leaf") {
    Graph g;
    Var x = g.value(Tensor::scalar(3.0));
    Var y = g.sum_all(g.mul(x, x));
    CHECK(g.eval_scalar(y) == 9.0);
    // replay: same tape, same result bit for bit
    CHECK(g.eval_scalar(y) == 9.0);
  }
  SECTION("logsumexp of (0,0) is log 2") {
    Graph g;
    Var x = g.constant(Tensor::matrix(1, 2, {0.0, 0.0}));
    Var l = g.logsumexp_rows(x);
    CHECK(g.eval(l).data[0] == Catch::Approx(std::log(2.0)).epsilon(1e-15));
  }
  SECTION("dot product via matvec") {
    Graph g;
    Var c = g.constant(Tensor::matrix(1, 2, {1.0, 2.0}));
    Var x = g.value(Tensor::vec({3.0, 4.0}));
    Var y = g.sum_all(g.matvec(c, x));
    CHECK(g.eval_scalar(y) == 11.0);
  }
}

TEST_CASE("gradient worked examples") {
  SECTION("d(x^2)/dx at 3 is 6") {
    Graph g;
    Var x = g.value(Tensor::scalar(3.0));
    Var y = g.sum_all(g.mul(x, x));
    CHECK(g.grad(y, {x}).at(x).data[0] == Catch::Approx(6.0).epsilon(1e-14));
  }
  SECTION("softmax cross entropy at (0,0), true class 0") {
    Builder ce = [](Graph& g, Var z) {
      Var zm = g.reshape(z, {1, 2});
      Var lse = g.logsumexp_rows(zm);
      Var zy = g.take_per_row(zm, {0});
      return g.sum_all(g.sub(lse, zy));
    };
    Tensor z0 = Tensor::vec({0.0, 0.0});
    Tensor grad = impl_gradient(ce, z0);
    CHECK(grad.data[0] == Catch::Approx(-0.5).epsilon(1e-12));
    CHECK(grad.data[1] == Catch::Approx(0.5).epsilon(1e-12));
    Tensor fd = fd_gradient([&](const Tensor& x) { return eval_field(ce, x); }, z0);
    CHECK(rel_err(grad, fd) <= 1e-5);
  }
  SECTION("gradient of linear map is the coefficient vector") {
    Graph g;
    Tensor c = Tensor::vec({1.5, -2.0, 0.25});
    Var cv = g.constant(c);
    Var x = g.value(Tensor::vec({7.0, 8.0, 9.0}));
    Var y = g.sum_all(g.mul(cv, x));
    Tensor grad = g.grad(y, {x}).at(x);
    for (int i = 0; i < 3; ++i) CHECK(grad.data[i] == c.data[i]);
  }
}

// Composite objectives that together exercise every differentiable primitive.
static const std::vector<std::pair<const char*, Builder>> kBattery = {
    {"pointwise",
     [](Graph& g, Var x) {
       Var a = g.exp_(g.scale(x, 0.3));
       Var b = g.sigmoid(g.add_const(x, 0.1));
       Var c = g.log_(g.add_const(g.mul(x, x), 0.5));
       return g.sum_all(g.add(g.mul(a, b), c));
     }},
    {"kinks",
     [](Graph& g, Var x) {
       Var r = g.relu(g.add_const(x, -0.135));
       Var a = g.abs_(g.add_const(x, 0.377));
       return g.sum_all(g.add(g.mul(r, r), a));
     }},
    {"matrix products",
     [](Graph& g, Var x) {
       Var xm = g.reshape(x, {2, 3});
       Var a = g.constant(Tensor::matrix(3, 2, {0.5, -1.0, 2.0, 0.25, -0.75, 1.5}));
       Var p = g.matmul(xm, a);
       Var q = g.matmul(g.transpose(p), p);
       return g.sum_all(g.mul(q, q));
     }},
    {"row reductions",
     [](Graph& g, Var x) {
       Var xm = g.reshape(x, {2, 3});
       Var lse = g.logsumexp_rows(xm);
       Var mx = g.max_rows(xm);
       Var rs = g.row_sums(xm);
       Var cs = g.col_sums(xm);
       return g.add(g.sum_all(g.mul(lse, mx)),
                    g.add(g.sum_all(g.mul(rs, rs)), g.sum_all(cs)));
     }},
    {"gather scatter 1d",
     [](Graph& g, Var x) {
       Var v = g.gather(x, {0, 2, 4, 4});
       Var s = g.scatter_add(v, {1, 0, 3, 3}, 5);
       return g.sum_all(g.mul(s, s));
     }},
    {"gather scatter rows",
     [](Graph& g, Var x) {
       Var xm = g.reshape(x, {2, 3});
       Var gr = g.gather_rows(xm, {1, 0, 1});
       Var sc = g.scatter_add_rows(gr, {0, 1, 1}, 2);
       Var t = g.take_per_row(sc, {2, 0});
       Var sp = g.scatter_per_row(t, {1, 2}, 3);
       return g.add(g.sum_all(g.mul(sp, sp)), g.sum_all(g.mul(sc, sc)));
     }},
    {"broadcast and row scaling",
     [](Graph& g, Var x) {
       Var v = g.slice(x, 0, 2);
       Var m = g.reshape(g.slice(x, 2, 4), {2, 2});
       Var sr = g.scale_rows(v, m);
       Var br = g.broadcast_row(v, 3);
       Var bc = g.broadcast_col(v, 2);
       Var ou = g.outer(v, v);
       Var mv = g.matvec(m, v);
       return g.add(g.sum_all(g.mul(sr, sr)),
                    g.add(g.sum_all(g.mul(br, br)),
                          g.add(g.sum_all(bc), g.add(g.sum_all(ou), g.sum_all(g.mul(mv, v))))));
     }},
    {"div smul embed",
     [](Graph& g, Var x) {
       Var d = g.div(x, g.add_const(g.mul(x, x), 1.0));
       Var e = g.embed_slice(g.slice(x, 1, 3), 2, 8);
       Var s = g.smul(g.sum_all(d), e);
       return g.add(g.sum_all(g.mul(s, s)), g.sum_all(g.neg(d)));
     }},
};

TEST_CASE("finite difference gradient checks across the primitive set") {
  lossforge::RngStream rng(20240817ull);
  for (const auto& [name, build] : kBattery) {
    INFO("objective: " << name);
    Tensor x = Tensor::vec(rng.normal_vec(6));
    for (double& v : x.data) v = 0.4 + 0.5 * std::tanh(v);  // keep clear of kinks, logs positive
    Tensor g_impl = impl_gradient(build, x);
    Tensor g_fd = fd_gradient([&](const Tensor& t) { return eval_field(build, t); }, x, 1e-5);
    CHECK(rel_err(g_impl, g_fd) <= 1e-5);
  }
}

TEST_CASE("hessian vector products") {
  SECTION("quadratic with diagonal curvature") {
    ScalarFn f = [](Graph& g, Var x) {
      Var d = g.constant(Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 2.0}));
      return g.scale(g.sum_all(g.mul(x, g.matvec(d, x))), 0.5);
    };
    Tensor x = Tensor::vec({0.3, -0.7});
    Tensor v = Tensor::vec({1.0, 1.0});
    Tensor hv = hvp(f, x, v);
    CHECK(hv.data[0] == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(hv.data[1] == Catch::Approx(2.0).epsilon(1e-12));
  }
  SECTION("identity curvature returns v") {
    ScalarFn f = [](Graph& g, Var x) { return g.scale(g.sum_all(g.mul(x, x)), 0.5); };
    Tensor x = Tensor::vec({1.0, 2.0, 3.0});
    Tensor v = Tensor::vec({-1.0, 0.5, 2.0});
    Tensor hv = hvp(f, x, v);
    for (int i = 0; i < 3; ++i) CHECK(hv.data[i] == Catch::Approx(v.data[i]).epsilon(1e-12));
  }
  SECTION("nonlinear objectives match pure finite differences") {
    lossforge::RngStream rng(77ull);
    for (const auto& [name, build] : kBattery) {
      INFO("objective: " << name);
      Tensor x = Tensor::vec(rng.normal_vec(6));
      for (double& v : x.data) v = 0.4 + 0.5 * std::tanh(v);
      Tensor v = Tensor::vec(rng.normal_vec(6));
      Tensor hv = hvp(build, x, v);
      Tensor want = fd_hvp([&](const Tensor& t) { return eval_field(build, t); }, x, v, 1e-4);
      CHECK(rel_err(hv, want) <= 1e-4);
    }
  }
  SECTION("symmetry of the quadratic form") {
    lossforge::RngStream rng(1234ull);
    const Builder& build = kBattery[0].second;
    Tensor x = Tensor::vec(rng.normal_vec(6));
    Tensor u = Tensor::vec(rng.normal_vec(6));
    Tensor v = Tensor::vec(rng.normal_vec(6));
    Tensor hu = hvp(build, x, u);
    Tensor hv = hvp(build, x, v);
    double uhv = lossforge::dot(u, hv);
    double vhu = lossforge::dot(v, hu);
    CHECK(std::fabs(uhv - vhu) <= 1e-10);
  }
}

TEST_CASE("mixed second order vjp") {
  SECTION("identity cross curvature returns v") {
    BilevelFn f = [](Graph& g, Var th, Var al) { return g.sum_all(g.mul(th, al)); };
    Tensor th = Tensor::vec({0.2, -0.4});
    Tensor al = Tensor::vec({5.0, 6.0});
    Tensor v = Tensor::vec({1.5, -2.5});
    Tensor mv = mixed_vjp(f, th, al, v);
    CHECK(mv.data[0] == Catch::Approx(v.data[0]).epsilon(1e-12));
    CHECK(mv.data[1] == Catch::Approx(v.data[1]).epsilon(1e-12));
  }
  SECTION("proximal coupling returns -v") {
    BilevelFn f = [](Graph& g, Var th, Var al) {
      Var d = g.sub(th, al);
      return g.scale(g.sum_all(g.mul(d, d)), 0.5);
    };
    Tensor th = Tensor::vec({0.2, -0.4, 1.0});
    Tensor al = Tensor::vec({1.0, 2.0, 3.0});
    Tensor v = Tensor::vec({1.0, -1.0, 0.5});
    Tensor mv = mixed_vjp(f, th, al, v);
    for (int i = 0; i < 3; ++i) CHECK(mv.data[i] == Catch::Approx(-v.data[i]).epsilon(1e-12));
  }
  SECTION("nonlinear coupling matches finite differences") {
    BilevelFn f = [](Graph& g, Var th, Var al) {
      Var zm = g.reshape(g.mul(th, g.sigmoid(al)), {1, 3});
      Var lse = g.logsumexp_rows(zm);
      Var zy = g.take_per_row(zm, {1});
      return g.add(g.sum_all(g.sub(lse, zy)), g.scale(g.sum_all(g.mul(th, th)), 0.05));
    };
    Tensor th = Tensor::vec({0.6, -0.3, 0.9});
    Tensor al = Tensor::vec({0.2, 0.7, -0.5});
    Tensor v = Tensor::vec({1.0, 0.25, -0.75});
    Tensor mv = mixed_vjp(f, th, al, v);
    auto field = [&](const Tensor& t, const Tensor& a) {
      Graph g;
      Var tv = g.value(t);
      Var av = g.value(a);
      return g.eval_scalar(f(g, tv, av));
    };
    Tensor want = fd_mixed_vjp(field, th, al, v, 1e-4);
    CHECK(rel_err(mv, want) <= 1e-4);
  }
}

TEST_CASE("tape determinism and linearity") {
  SECTION("backward replays bit for bit") {
    const Builder& build = kBattery[3].second;
    Tensor x = Tensor::vec({0.3, 1.1, -0.4, 0.9, 0.2, -1.3});
    Graph g;
    Var xv = g.value(x);
    Var loss = build(g, xv);
    Tensor g1 = g.grad(loss, {xv}).at(xv);
    Tensor g2 = g.grad(loss, {xv}).at(xv);
    REQUIRE(g1.data.size() == g2.data.size());
    for (size_t i = 0; i < g1.data.size(); ++i) CHECK(g1.data[i] == g2.data[i]);
    // fresh tape, same construction
    Tensor g3 = impl_gradient(build, x);
    for (size_t i = 0; i < g1.data.size(); ++i) CHECK(g1.data[i] == g3.data[i]);
  }
  SECTION("gradient is linear in the objective") {
    Tensor x = Tensor::vec({0.5, -0.25, 0.75, 1.25, -0.6, 0.1});
    const Builder& f = kBattery[0].second;
    const Builder& h = kBattery[7].second;
    double a = 1.7, b = -0.6;
    Builder combo = [&](Graph& g, Var xv) {
      return g.add(g.scale(f(g, xv), a), g.scale(h(g, xv), b));
    };
    Tensor gc = impl_gradient(combo, x);
    Tensor gf = impl_gradient(f, x);
    Tensor gh = impl_gradient(h, x);
    for (size_t i = 0; i < gc.data.size(); ++i)
      CHECK(gc.data[i] == Catch::Approx(a * gf.data[i] + b * gh.data[i]).margin(1e-12));
  }
  SECTION("updating a leaf recomputes downstream values") {
    Graph g;
    Var x = g.value(Tensor::scalar(2.0));
    Var y = g.sum_all(g.mul(x, x));
    CHECK(g.eval_scalar(y) == 4.0);
    g.set_value(x, Tensor::scalar(5.0));
    CHECK(g.eval_scalar(y) == 25.0);
  }
}

TEST_CASE("error surfacing") {
  SECTION("non-finite op result names the op") {
    Graph g;
    Var x = g.value(Tensor::vec({-1.0}));
    Var y = g.sum_all(g.log_(x));
    REQUIRE_THROWS_MATCHES(g.eval(y), NumericalError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("log")));
  }
  SECTION("gradient of a non-scalar root") {
    Graph g;
    Var x = g.value(Tensor::vec({1.0, 2.0}));
    Var y = g.mul(x, x);
    CHECK_THROWS_AS(g.grad(y, {x}), ShapeError);
  }
  SECTION("gradient with respect to a constant") {
    Graph g;
    Var x = g.constant(Tensor::vec({1.0, 2.0}));
    Var y = g.sum_all(x);
    CHECK_THROWS_AS(g.grad(y, {x}), UnknownLeaf);
  }
  SECTION("foreign variable") {
    Graph g1, g2;
    Var x = g1.value(Tensor::scalar(1.0));
    CHECK_THROWS_AS(g2.eval(x), UnknownLeaf);
  }
  SECTION("hvp direction must match parameter shape") {
    ScalarFn f = [](Graph& g, Var x) { return g.sum_all(g.mul(x, x)); };
    CHECK_THROWS_AS(hvp(f, Tensor::vec({1.0, 2.0}), Tensor::vec({1.0})), ShapeError);
  }
  SECTION("elementwise shape mismatch") {
    Graph g;
    Var a = g.value(Tensor::vec({1.0, 2.0}));
    Var b = g.value(Tensor::vec({1.0, 2.0, 3.0}));
    CHECK_THROWS_AS(g.add(a, b), ShapeError);
  }
}
