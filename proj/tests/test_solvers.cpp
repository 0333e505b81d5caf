#include <cmath>
#include <vector>

#include <doctest.h>

#include "fixslot/rng.hpp"
#include "fixslot/solvers.hpp"
#include "oracles.hpp"

using namespace fixslot;
using testing::DTensor;
using testing::max_abs_diff;

namespace {

// f(z) = A z + b as a detached tensor map over rank-1 z.
struct AffineMap {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
  DTensor operator()(const DTensor& z) const {
    Eigen::Map<const Eigen::VectorXd> zv(z.data(), z.size());
    Eigen::VectorXd out = A * zv + b;
    typename DTensor::Buffer buf(out.array());
    return DTensor(Shape(z.size()), std::move(buf));
  }
};

}  // namespace

TEST_CASE("rel_residual") {
  CHECK(rel_residual(DTensor::from(Shape(2), {1, 2}), DTensor::from(Shape(2), {1, 2})) == 0.0);
  CHECK(rel_residual(DTensor::from(Shape(2), {0, 0}), DTensor::from(Shape(2), {3, 4})) ==
        doctest::Approx(1.0));
  CHECK(rel_residual(DTensor::from(Shape(2), {1, 0}), DTensor::from(Shape(2), {1, 1})) ==
        doctest::Approx(1.0 / std::sqrt(2.0)));

  bool degenerate = false;
  const double r = rel_residual(DTensor::from(Shape(2), {3, 4}), DTensor::zeros(Shape(2)), &degenerate);
  CHECK(degenerate);
  CHECK(r == doctest::Approx(5.0));
  CHECK_THROWS_AS(rel_residual(DTensor::zeros(Shape(2)), DTensor::zeros(Shape(3))), ShapeError);
}

TEST_CASE("solve_iteration on scalar affine map") {
  auto f = [](const DTensor& z) { return add_scalar(scale(z, 0.5), 1.0); };

  SolverConfig cfg;
  cfg.max_iters = 3;
  cfg.tol = 0.0;
  auto r = solve_iteration(f, DTensor::scalar(0.0), cfg);
  CHECK(r.z_star.value() == doctest::Approx(1.75));  // b (1 + w + w^2)
  CHECK(r.iters_used == 3);
  CHECK(r.residual_trace.size() == 3);
  CHECK(!r.converged);

  cfg.max_iters = 200;
  cfg.tol = 1e-10;
  auto r2 = solve_iteration(f, DTensor::scalar(0.0), cfg);
  CHECK(r2.converged);
  CHECK(r2.z_star.value() == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(r2.iters_used < 40);

  auto r3 = solve_iteration(f, DTensor::scalar(2.0), cfg);
  CHECK(r3.converged);
  CHECK(r3.iters_used == 1);
  CHECK(r3.residual_trace.size() == 1);
  CHECK(r3.residual_trace[0] == 0.0);
}

TEST_CASE("solve_iteration geometric decay on linear contractions") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Index n = 6;
    // Positive-definite diagonal contraction keeps iterates approaching from below.
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
    double smax = 0;
    for (Index i = 0; i < n; ++i) {
      A(i, i) = uniform(rng, 0.2, 0.85);
      smax = std::max(smax, A(i, i));
    }
    Eigen::VectorXd b(n);
    for (Index i = 0; i < n; ++i) b(i) = uniform(rng, 0.5, 1.5);
    AffineMap f{A, b};

    SolverConfig cfg;
    cfg.max_iters = 400;
    cfg.tol = 1e-12;
    auto r = solve_iteration(f, DTensor::zeros(Shape(n)), cfg);
    CHECK(r.converged);

    Eigen::VectorXd zstar = (Eigen::MatrixXd::Identity(n, n) - A).lu().solve(b);
    for (Index i = 0; i < n; ++i) CHECK(r.z_star[i] == doctest::Approx(zstar(i)).epsilon(1e-8));

    for (std::size_t k = 0; k + 1 < r.residual_trace.size(); ++k) {
      // Below ~1e-9 the subtraction inside the residual loses enough digits
      // to perturb the ratio by more than the 1e-6 slack.
      if (r.residual_trace[k] < 1e-9) break;
      CHECK(r.residual_trace[k + 1] / r.residual_trace[k] <= smax + 1e-6);
    }
  }
}

TEST_CASE("solve_broyden on linear maps") {
  {
    Eigen::MatrixXd A(2, 2);
    A << 0.5, 0, 0, 0.3;
    Eigen::VectorXd b(2);
    b << 1, 1;
    AffineMap f{A, b};
    SolverConfig cfg;
    cfg.kind = SolverKind::kBroyden;
    cfg.max_iters = 50;
    cfg.tol = 1e-8;
    auto r = solve_broyden(f, DTensor::zeros(Shape(2)), cfg);
    CHECK(r.converged);
    CHECK(r.iters_used <= 7);  // max(7, dim + 1)
    CHECK(r.z_star[0] == doctest::Approx(2.0).epsilon(1e-7));
    CHECK(r.z_star[1] == doctest::Approx(10.0 / 7.0).epsilon(1e-7));
  }
  {
    auto f = [](const DTensor& z) { return add_scalar(scale(z, 0.5), 1.0); };
    SolverConfig cfg;
    cfg.kind = SolverKind::kBroyden;
    cfg.max_iters = 20;
    cfg.tol = 1e-12;
    auto r = solve_broyden(f, DTensor::scalar(0.0), cfg);
    CHECK(r.converged);
    CHECK(r.iters_used <= 3);  // exact secant on a linear map
    CHECK(r.z_star.value() == doctest::Approx(2.0).epsilon(1e-10));

    auto r2 = solve_broyden(f, DTensor::scalar(2.0), cfg);
    CHECK(r2.converged);
    CHECK(r2.iters_used == 1);
  }
}

TEST_CASE("both solvers agree with the analytic fixed point on random contractions") {
  Rng rng(7);
  for (Index n : {2, 5, 11, 16}) {
    Eigen::MatrixXd A(n, n);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < n; ++j) A(i, j) = uniform(rng, -1, 1);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
    A *= 0.8 / svd.singularValues()(0);  // spectral norm 0.8 < 1
    Eigen::VectorXd b(n);
    for (Index i = 0; i < n; ++i) b(i) = uniform(rng, -1, 1);
    AffineMap f{A, b};
    Eigen::VectorXd zstar = (Eigen::MatrixXd::Identity(n, n) - A).lu().solve(b);

    SolverConfig it_cfg;
    it_cfg.max_iters = 500;
    it_cfg.tol = 1e-12;
    auto ri = solve_iteration(f, DTensor::zeros(Shape(n)), it_cfg);
    SolverConfig br_cfg;
    br_cfg.kind = SolverKind::kBroyden;
    br_cfg.max_iters = 200;
    br_cfg.broyden_memory = 200;
    br_cfg.tol = 1e-12;
    auto rb = solve_broyden(f, DTensor::zeros(Shape(n)), br_cfg);
    CHECK(ri.converged);
    CHECK(rb.converged);
    for (Index i = 0; i < n; ++i) {
      CHECK(std::abs(ri.z_star[i] - zstar(i)) < 1e-8);
      CHECK(std::abs(rb.z_star[i] - zstar(i)) < 1e-8);
    }
  }
}

TEST_CASE("solver results are detached and deterministic") {
  Rng rng(9);
  auto w = rand_uniform<double>(rng, Shape(3, 3), -0.2, 0.2);
  auto f = [&](const DTensor& z) { return tanh(reshape(matmul(reshape(z, Shape(1, 3)), w), Shape(3))); };
  SolverConfig cfg;
  cfg.max_iters = 30;
  cfg.tol = 1e-10;
  auto r1 = solve_iteration(f, DTensor::from(Shape(3), {1, -1, 0.5}), cfg);
  auto r2 = solve_iteration(f, DTensor::from(Shape(3), {1, -1, 0.5}), cfg);
  CHECK(!r1.z_star.attached());
  CHECK(max_abs_diff(r1.z_star, r2.z_star) == 0.0);
  CHECK(r1.residual_trace == r2.residual_trace);

  // A loss computed from z_star alone yields zero parameter gradients.
  Tape<double> tape;
  auto wp = tape.leaf(w, 0);
  (void)wp;
  auto anchor = tape.leaf(DTensor::scalar(0.0));
  auto loss = add(anchor, reduce_sum(mul(r1.z_star, r1.z_star)));
  auto g = tape.backward(loss);
  CHECK(testing::max_abs(g.at(0)) == 0.0);
}

TEST_CASE("divergence raises with trace attached") {
  auto f = [](const DTensor& z) { return scale(z, 3.0); };  // expanding map
  SolverConfig cfg;
  cfg.max_iters = 10000;
  cfg.tol = 0.0;
  try {
    solve_iteration(f, DTensor::scalar(1e300), cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(!std::string(e.what()).empty());
  }

  SolverConfig bc;
  bc.kind = SolverKind::kBroyden;
  bc.max_iters = 50;
  bc.tol = 1e-12;
  // z^2 + 1 has no real fixed point; the relative residual bottoms out at 0.5
  // near z=1 and the line search cannot reduce it further.
  auto g = [](const DTensor& z) { return add_scalar(mul(z, z), 1.0); };
  CHECK_THROWS_AS(solve_broyden(g, DTensor::scalar(0.0), bc), DivergenceError);
}
