#include "nullmoe/checks.hpp"
#include "nullmoe/numerics.hpp"
#include "nullmoe/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace nullmoe;

TEST_SUITE_BEGIN("numerics");

TEST_CASE("matmul identity and hand-computed products") {
  Matrix eye(2, 2), b(2, 2);
  eye << 1, 0, 0, 1;
  b << 3, 4, 5, 6;
  CHECK((matmul(eye, b) - b).cwiseAbs().maxCoeff() == 0.0);

  Matrix a(1, 2), c(2, 1);
  a << 1, 2;
  c << 3, 4;
  Matrix prod = matmul(a, c);
  CHECK(prod.rows() == 1);
  CHECK(prod(0, 0) == 11.0);
}

TEST_CASE("matmul rejects shape mismatches") {
  Matrix a(2, 3), b(2, 3);
  a.setZero();
  b.setZero();
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul backward matches central differences on 5x7 * 7x3") {
  // the independent oracle: central differences with h = 1e-6
  Rng rng(42);
  for (int inst = 0; inst < 20; ++inst) {
    Matrix a = rng.gaussian(5, 7), b = rng.gaussian(7, 3), r = rng.gaussian(5, 3);
    auto f = [&] {
      Matrix c = matmul(a, b);
      double acc = 0;
      for (Index i = 0; i < 5; ++i)
        for (Index j = 0; j < 3; ++j) acc += c(i, j) * r(i, j);
      return acc;
    };
    Matrix da, db;
    matmul_backward(a, b, r, da, db);
    CHECK(fd_relative_error(f, a, da, 1e-6) < 1e-5);
    CHECK(fd_relative_error(f, b, db, 1e-6) < 1e-5);
  }
}

TEST_CASE("softmax_rows anchors") {
  Matrix z(1, 4);
  z << 0, 0, 0, 0;
  Matrix p = softmax_rows(z);
  for (int j = 0; j < 4; ++j) CHECK(p(0, j) == doctest::Approx(0.25).epsilon(1e-14));

  Matrix z2(1, 2);
  z2 << std::log(3.0), 0.0;
  Matrix p2 = softmax_rows(z2);
  CHECK(p2(0, 0) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(p2(0, 1) == doctest::Approx(0.25).epsilon(1e-12));

  Matrix z3(1, 2);
  z3 << 1000.0, 0.0;
  Matrix p3 = softmax_rows(z3);
  CHECK(p3.allFinite());
  CHECK(p3(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p3(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax_rows: rows sum to one and shift invariance") {
  Rng rng(7);
  for (int inst = 0; inst < 30; ++inst) {
    Matrix z = rng.gaussian(5, 9, 3.0);
    Matrix p = softmax_rows(z);
    for (Index r = 0; r < p.rows(); ++r) {
      double s = 0;
      for (Index c = 0; c < p.cols(); ++c) s += p(r, c);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    Matrix shifted = z;
    shifted.array() += 2.0;
    CHECK((softmax_rows(shifted) - p).cwiseAbs().maxCoeff() < 1e-12);
  }
  Matrix bad(1, 2);
  bad << 1.0, std::numeric_limits<Scalar>::quiet_NaN();
  CHECK_THROWS_AS(softmax_rows(bad), NumericError);
}

TEST_CASE("topk_rows anchors and sort oracle") {
  Matrix s(1, 3);
  s << 5, 1, 9;
  IntMatrix idx;
  Matrix vals;
  topk_rows(s, 2, TieBreak::kIndexAscending, idx, vals);
  CHECK(idx(0, 0) == 2);
  CHECK(idx(0, 1) == 0);
  CHECK(vals(0, 0) == 9.0);

  Matrix ties(1, 3);
  ties << 7, 7, 7;
  topk_rows(ties, 2, TieBreak::kIndexAscending, idx, vals);
  CHECK(idx(0, 0) == 0);
  CHECK(idx(0, 1) == 1);

  CHECK_THROWS_AS(topk_rows(s, 4, TieBreak::kIndexAscending, idx, vals), ShapeError);

  // random rows of 128, k = 8 against a full stable descending sort
  Rng rng(11);
  for (int inst = 0; inst < 25; ++inst) {
    Matrix row = rng.gaussian(1, 128);
    topk_rows(row, 8, TieBreak::kIndexAscending, idx, vals);
    std::vector<int> order(128);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return row(0, a) > row(0, b); });
    for (int c = 0; c < 8; ++c) {
      CHECK(idx(0, c) == order[static_cast<size_t>(c)]);
      CHECK(vals(0, c) == row(0, order[static_cast<size_t>(c)]));
    }
  }
}

TEST_CASE("stable_argsort anchors and reference oracle") {
  std::vector<Index> keys{2, 0, 1};
  auto perm = stable_argsort(keys);
  CHECK(perm == std::vector<Index>{1, 2, 0});

  std::vector<Index> keys2{1, 1, 0};
  CHECK(stable_argsort(keys2) == std::vector<Index>{2, 0, 1});

  Rng rng(13);
  std::vector<Index> big(10000);
  for (auto& k : big) k = rng.uniform_int(50);
  auto got = stable_argsort(big);
  std::vector<Index> expect(big.size());
  std::iota(expect.begin(), expect.end(), Index{0});
  std::stable_sort(expect.begin(), expect.end(),
                   [&](Index a, Index b) { return big[static_cast<size_t>(a)] < big[static_cast<size_t>(b)]; });
  CHECK(got == expect);
}

TEST_CASE("scatter_add anchors, loop oracle, gather identity") {
  Matrix dest = Matrix::Zero(2, 1);
  Matrix src(3, 1);
  src << 1, 2, 3;
  std::vector<Index> idx{0, 0, 1};
  Matrix out = scatter_add(dest, idx, src);
  CHECK(out(0, 0) == 3.0);
  CHECK(out(1, 0) == 3.0);

  Matrix unchanged = scatter_add(out, std::span<const Index>{}, Matrix(0, 1));
  CHECK((unchanged - out).cwiseAbs().maxCoeff() == 0.0);

  std::vector<Index> bad{5};
  CHECK_THROWS_AS(scatter_add(Matrix::Zero(2, 1), bad, Matrix::Ones(1, 1)), ShapeError);

  Rng rng(17);
  for (int inst = 0; inst < 20; ++inst) {
    int rows = 6, n = 25;
    Matrix d0 = rng.gaussian(rows, 4);
    Matrix s0 = rng.gaussian(n, 4);
    std::vector<Index> ridx(static_cast<size_t>(n));
    for (auto& r : ridx) r = rng.uniform_int(rows);
    Matrix got = scatter_add(d0, ridx, s0);
    Matrix expect = d0;
    for (int j = 0; j < n; ++j) expect.row(ridx[static_cast<size_t>(j)]) += s0.row(j);
    CHECK((got - expect).cwiseAbs().maxCoeff() == 0.0);
  }

  // scatter then gather is the identity when indices are a permutation
  Rng rng2(19);
  Matrix src2 = rng2.gaussian(8, 3);
  std::vector<Index> perm(8);
  std::iota(perm.begin(), perm.end(), Index{0});
  for (int i = 7; i > 0; --i) std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng2.uniform_int(i + 1))]);
  Matrix scattered = scatter_add(Matrix::Zero(8, 3), perm, src2);
  for (int j = 0; j < 8; ++j)
    CHECK((scattered.row(perm[static_cast<size_t>(j)]) - src2.row(j)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("grad tape replays backward to finite-difference accuracy") {
  CheckList checks = check_gradients(123, false);
  for (const auto& c : checks) {
    if (c.name == "gradients.grad_tape" || c.name == "gradients.matmul" ||
        c.name == "gradients.softmax_rows") {
      INFO(c.name, " max_err=", c.max_err);
      CHECK(c.pass);
    }
  }
}

TEST_CASE("silu forward/backward consistency") {
  Rng rng(23);
  Matrix x = rng.gaussian(4, 5);
  Matrix y = silu(x);
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 5; ++c)
      CHECK(y(r, c) == doctest::Approx(x(r, c) / (1.0 + std::exp(-x(r, c)))).epsilon(1e-12));
}

TEST_SUITE_END();
