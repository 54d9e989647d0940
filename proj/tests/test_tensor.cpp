#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "eks/rng.hpp"
#include "eks/serialize.hpp"
#include "eks/tensor.hpp"

using namespace eks;

namespace {

// independent triple-loop matmul oracle
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  size_t m, size_t k, size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j)
      for (size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// central finite differences (step 1e-5) of a scalar-valued forward pass
// with respect to every element of `param`
double fd_check(Tensor& param, const std::function<Tensor()>& forward) {
  param.zero_grad();  // grads accumulate; isolate this measurement
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(forward());
  }
  std::vector<double> analytic = param.grad();
  param.zero_grad();
  const double h = 1e-5;
  double worst = 0.0;
  for (size_t i = 0; i < param.values().size(); ++i) {
    double keep = param.values()[i];
    param.values()[i] = keep + h;
    double up = forward().item();
    param.values()[i] = keep - h;
    double down = forward().item();
    param.values()[i] = keep;
    double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8));
  }
  return worst;
}

}  // namespace

TEST_CASE("matmul by the identity returns the input") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Rng rng(3);
  Tensor x = Tensor::uniform({2, 5}, rng, -2.0, 2.0);
  Tensor y = matmul(eye, x);
  CHECK(max_abs_diff(y.values(), x.values()) == 0.0);
}

TEST_CASE("matmul of random 3x4 by 4x2 matches the triple-loop oracle") {
  Rng rng(17);
  Tensor a = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
  Tensor b = Tensor::uniform({4, 2}, rng, -1.0, 1.0);
  Tensor c = matmul(a, b);
  std::vector<double> expect = matmul_oracle(a.values(), b.values(), 3, 4, 2);
  CHECK(max_abs_diff(c.values(), expect) < 1e-14);
}

TEST_CASE("matmul rejects mismatched inner dimensions with both shapes named") {
  Tensor a = Tensor::zeros({3, 4});
  Tensor b = Tensor::zeros({5, 2});
  try {
    matmul(a, b);
    FAIL("expected shape error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("(3,4)") != std::string::npos);
    CHECK(msg.find("(5,2)") != std::string::npos);
  }
}

TEST_CASE("concat along axis 0 of (2,3) and (1,3) gives (3,3)") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({1, 3}, {7, 8, 9});
  Tensor c = concat({a, b}, 0);
  CHECK(c.shape() == Shape{3, 3});
  CHECK(c.values() == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
}

TEST_CASE("concat along axis 1 interleaves blocks") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 1}, {5, 6});
  Tensor c = concat({a, b}, 1);
  CHECK(c.shape() == Shape{2, 3});
  CHECK(c.values() == std::vector<double>{1, 2, 5, 3, 4, 6});
}

TEST_CASE("slice extracts a contiguous range and round-trips with concat") {
  Rng rng(5);
  Tensor t = Tensor::uniform({4, 3, 2}, rng, -1.0, 1.0);
  Tensor left = slice(t, 0, 0, 1);
  Tensor right = slice(t, 0, 1, 4);
  Tensor back = concat({left, right}, 0);
  CHECK(max_abs_diff(back.values(), t.values()) == 0.0);
  Tensor mid = slice(t, 1, 1, 2);
  CHECK(mid.shape() == Shape{4, 1, 2});
  CHECK(mid.at({2, 0, 1}) == t.at({2, 1, 1}));
}

TEST_CASE("backward of sum gives a gradient of ones") {
  Tensor x = Tensor::zeros({2, 2}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(x*x) at [1,2] is [2,4]") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("three-layer MLP gradients match central finite differences") {
  // fixed seed chosen so no relu pre-activation sits near its kink
  Rng rng(9217);
  Tensor x = Tensor::uniform({4, 6}, rng, 0.1, 1.0);
  Tensor w1 = Tensor::uniform({6, 8}, rng, -0.7, 0.7, true);
  Tensor w2 = Tensor::uniform({8, 5}, rng, -0.7, 0.7, true);
  Tensor w3 = Tensor::uniform({5, 3}, rng, -0.7, 0.7, true);
  Tensor dir = Tensor::uniform({4, 3}, rng, -1.0, 1.0);
  auto forward = [&] { return sum(mul(matmul(relu(matmul(relu(matmul(x, w1)), w2)), w3), dir)); };
  CHECK(fd_check(w1, forward) < 1e-6);
  CHECK(fd_check(w2, forward) < 1e-6);
  CHECK(fd_check(w3, forward) < 1e-6);
}

TEST_CASE("finite differences hold across the op set") {
  Rng rng(23);
  for (int rep = 0; rep < 10; ++rep) {
    Tensor x = Tensor::uniform({3, 4}, rng, -1.0, 1.0, true);
    Tensor y = Tensor::uniform({3, 4}, rng, -1.0, 1.0, true);
    Tensor bias = Tensor::uniform({4}, rng, -1.0, 1.0, true);
    Tensor dir = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
    Tensor dir6 = Tensor::uniform({6, 4}, rng, -1.0, 1.0);
    Tensor dir_t = Tensor::uniform({4, 3}, rng, -1.0, 1.0);
    std::vector<size_t> rows = {2, 0, 2};
    Tensor dir_rows = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
    std::vector<size_t> cols = {1, 3, 0};
    Tensor dir_cols = Tensor::uniform({3}, rng, -1.0, 1.0);

    CHECK(fd_check(x, [&] { return sum(mul(add(x, y), dir)); }) < 1e-6);
    CHECK(fd_check(y, [&] { return sum(mul(sub(x, y), dir)); }) < 1e-6);
    CHECK(fd_check(x, [&] { return sum(mul(mul(x, y), dir)); }) < 1e-6);
    CHECK(fd_check(x, [&] { return sum(mul(scale(x, -2.5), dir)); }) < 1e-6);
    CHECK(fd_check(x, [&] { return sum(mul(reshape(x, {4, 3}), dir_t)); }) < 1e-6);
    CHECK(fd_check(x, [&] { return sum(mul(transpose(x), dir_t)); }) < 1e-6);
    CHECK(fd_check(x, [&] { return sum(mul(concat({x, y}, 0), dir6)); }) < 1e-6);
    CHECK(fd_check(x, [&] { return sum(mul(slice(x, 1, 1, 3), slice(dir, 1, 0, 2))); }) < 1e-6);
    CHECK(fd_check(x, [&] { return sum(mul(gather_rows(x, rows), dir_rows)); }) < 1e-6);
    CHECK(fd_check(x, [&] { return sum(mul(pick_per_row(x, cols), dir_cols)); }) < 1e-6);
    CHECK(fd_check(bias, [&] { return sum(mul(add_row_bias(x, bias), dir)); }) < 1e-6);
    CHECK(fd_check(x, [&] { return mean(mul(x, dir)); }) < 1e-6);
  }
}

TEST_CASE("global_avg_pool averages over the spatial extent and backpropagates") {
  Rng rng(31);
  Tensor x = Tensor::uniform({2, 3, 4, 4}, rng, -1.0, 1.0, true);
  Tensor pooled = global_avg_pool(x);
  CHECK(pooled.shape() == Shape{2, 3});
  double manual = 0.0;
  for (size_t p = 0; p < 16; ++p) manual += x.values()[1 * 3 * 16 + 2 * 16 + p];
  CHECK(pooled.at({1, 2}) == doctest::Approx(manual / 16.0).epsilon(1e-12));
  Tensor dir = Tensor::uniform({2, 3}, rng, -1.0, 1.0);
  CHECK(fd_check(x, [&] { return sum(mul(global_avg_pool(x), dir)); }) < 1e-6);
}

TEST_CASE("using a tensor twice accumulates both path gradients") {
  Tensor x = Tensor::from_data({2}, {1.5, -0.5}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    // x^2 + 3x has gradient 2x + 3
    tape.backward(sum(add(mul(x, x), scale(x, 3.0))));
  }
  CHECK(x.grad()[0] == 6.0);
  CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("grads accumulate across backward passes until explicitly zeroed") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
  for (int pass = 1; pass <= 2; ++pass) {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  CHECK(x.grad()[0] == 2.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tensor x = Tensor::zeros({2, 2}, true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = add(x, x);
  CHECK_THROWS_AS(tape.backward(y), Error);
}

TEST_CASE("ops outside a tape scope do not record") {
  Tensor x = Tensor::zeros({2}, true);
  Tensor y = add(x, x);
  CHECK_FALSE(y.requires_grad());
  Tape tape;
  CHECK(tape.size() == 0);
}

TEST_CASE("non-finite results are rejected") {
  Tensor huge = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(mul(huge, huge), Error);
  CHECK_THROWS_AS(Tensor::from_data({1}, {std::nan("")}), Error);
}

TEST_CASE("identical seeds give bit-identical outputs and gradients") {
  auto run = [] {
    Rng rng(99);
    Tensor x = Tensor::uniform({4, 4}, rng, -1.0, 1.0, true);
    Tensor w = Tensor::uniform({4, 4}, rng, -1.0, 1.0, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor out = relu(matmul(x, w));
    tape.backward(sum(mul(out, out)));
    return std::make_pair(out.values(), w.grad());
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  CHECK(v1 == v2);
  CHECK(g1 == g2);
}

TEST_CASE("tensor container round-trips losslessly") {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    Shape shape;
    size_t dims = 1 + rng.index(4);
    for (size_t i = 0; i < dims; ++i) shape.push_back(1 + rng.index(5));
    Tensor t = Tensor::uniform(shape, rng, -100.0, 100.0);
    ByteWriter w;
    write_tensor(w, t);
    ByteReader r(w.data());
    Tensor back = read_tensor(r);
    CHECK(back.shape() == t.shape());
    CHECK(back.values() == t.values());
  }
}

TEST_CASE("truncated tensor blobs report the failing offset") {
  Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  ByteWriter w;
  write_tensor(w, t);
  std::string cut = w.data().substr(0, w.size() - 9);
  ByteReader r(cut, "cut.bin");
  try {
    read_tensor(r);
    FAIL("expected truncation error");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("offset") != std::string::npos);
    CHECK(msg.find("cut.bin") != std::string::npos);
  }
}

TEST_CASE("bad tensor magic is rejected") {
  std::string junk = "ABCD????????";
  ByteReader r(junk);
  CHECK_THROWS_AS(read_tensor(r), Error);
}
