#include <doctest.h>

#include <cmath>

#include "rnnkit/diagnostics.hpp"
#include "rnnkit/linalg.hpp"

using namespace rnnkit;

TEST_SUITE_BEGIN("linalg");

TEST_CASE("matmul matches hand-computed product") {
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  Vector x(2);
  x << 5, 6;
  Vector y = matmul(a, x);
  CHECK(y[0] == 17.0);
  CHECK(y[1] == 39.0);

  Matrix b(2, 1);
  b << 5, 6;
  Matrix p = matmul(a, b);
  CHECK(p(0, 0) == 17.0);
  CHECK(p(1, 0) == 39.0);
}

TEST_CASE("matmul rejects mismatched shapes and names both") {
  Matrix a = Matrix::Zero(2, 3);
  Vector x = Vector::Zero(2);
  try {
    matmul(a, x);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("2x1") != std::string::npos);
  }
}

TEST_CASE("hadamard is elementwise") {
  Vector a(3), b(3);
  a << 1, 2, 3;
  b << 4, 5, 6;
  Vector h = hadamard(a, b);
  CHECK(h[0] == 4.0);
  CHECK(h[1] == 10.0);
  CHECK(h[2] == 18.0);
  CHECK_THROWS_AS(hadamard(a, Vector(Vector::Zero(2))), ShapeError);
}

TEST_CASE("sigmoid known values and saturation") {
  CHECK(sigmoid_scalar(0.0) == 0.5);
  CHECK(sigmoid_scalar(1.0) == doctest::Approx(0.7310585786300049).epsilon(1e-15));
  CHECK(sigmoid_scalar(-1.0) == doctest::Approx(1.0 - 0.7310585786300049).epsilon(1e-15));
  // The sign-split form saturates instead of overflowing.
  CHECK(sigmoid_scalar(1000.0) == 1.0);
  CHECK(sigmoid_scalar(-1000.0) == 0.0);
  CHECK(std::isfinite(sigmoid_scalar(-1000.0)));

  Vector x(2);
  x << 0.0, 1.0;
  Vector s = sigmoid(x);
  CHECK(s[0] == 0.5);
  CHECK(s[1] == doctest::Approx(0.7310585786300049).epsilon(1e-15));
}

TEST_CASE("tanh known value") {
  Vector x(1);
  x << 1.0;
  CHECK(tanh_act(x)[0] == doctest::Approx(0.7615941559557649).epsilon(1e-15));
}

TEST_CASE("softmax distribution and shift invariance") {
  Vector z(2);
  z << 0.0, std::log(2.0);
  Vector p = softmax(z);
  CHECK(p[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-15));

  Vector shifted = softmax(Vector(z.array() + 7.5));
  CHECK((shifted - p).cwiseAbs().maxCoeff() < 1e-14);

  // Huge logits stay finite thanks to the max subtraction.
  Vector big(3);
  big << 1e4, 1e4 + 1, 1e4 - 2;
  Vector pb = softmax(big);
  CHECK(pb.allFinite());
  CHECK(pb.sum() == doctest::Approx(1.0).epsilon(1e-12));

  CHECK_THROWS_AS(softmax(Vector()), ShapeError);
}

TEST_CASE("activation derivatives agree with finite differences") {
  const double eps = 1e-6;
  for (double v : {-2.0, -0.3, 0.0, 0.7, 1.9}) {
    const double fd_sig = (sigmoid_scalar(v + eps) - sigmoid_scalar(v - eps)) / (2 * eps);
    const double s = sigmoid_scalar(v);
    CHECK(s * (1 - s) == doctest::Approx(fd_sig).epsilon(1e-8));

    const double fd_tanh = (std::tanh(v + eps) - std::tanh(v - eps)) / (2 * eps);
    const double t = std::tanh(v);
    CHECK(1 - t * t == doctest::Approx(fd_tanh).epsilon(1e-8));
  }

  Vector s(2);
  s << 0.3, 0.8;
  Vector g = sigmoid_grad_from_output(s);
  CHECK(g[0] == doctest::Approx(0.21).epsilon(1e-15));
  CHECK(g[1] == doctest::Approx(0.16).epsilon(1e-12));
}

TEST_CASE("layer_norm normalizes then applies the affine") {
  Vector z(4);
  z << 1.0, 2.0, 3.0, 4.0;
  Vector gain = Vector::Ones(4), bias = Vector::Zero(4);
  Vector out = layer_norm(z, gain, bias);

  CHECK(out.mean() == doctest::Approx(0.0).epsilon(1e-12));
  const double var = (out.array() - out.mean()).square().mean();
  // Population variance lands just under 1 because of the epsilon guard.
  CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(out[0] == -out[3]);
  CHECK(out[1] == -out[2]);

  Vector gain2 = Vector::Constant(4, 2.0), bias2 = Vector::Constant(4, -1.0);
  Vector out2 = layer_norm(z, gain2, bias2);
  CHECK((out2 - (2.0 * out.array() - 1.0).matrix()).cwiseAbs().maxCoeff() < 1e-14);

  // Shift invariance in z.
  Vector out3 = layer_norm(Vector(z.array() + 100.0), gain, bias);
  CHECK((out3 - out).cwiseAbs().maxCoeff() < 1e-9);

  CHECK_THROWS_AS(layer_norm(z, Vector(Vector::Ones(3)), bias), ShapeError);
}

TEST_CASE("layer_norm backward matches finite differences") {
  Rng rng(7);
  Vector z(5), gain(5), bias(5), w(5);
  for (int i = 0; i < 5; ++i) {
    z[i] = rng.uniform(-2.0, 2.0);
    gain[i] = rng.uniform(0.5, 1.5);
    bias[i] = rng.uniform(-0.5, 0.5);
    w[i] = rng.uniform(-1.0, 1.0);
  }

  auto loss = [&]() { return w.dot(layer_norm(z, gain, bias)); };

  Vector d_gain = Vector::Zero(5), d_bias = Vector::Zero(5);
  Vector dz = layer_norm_backward(z, gain, w, d_gain, d_bias);

  std::vector<TensorView<double>> views{{"z", z.data(), 5, 1},
                                        {"gain", gain.data(), 5, 1},
                                        {"bias", bias.data(), 5, 1}};
  auto fd = finite_diff(views, loss);

  for (int i = 0; i < 5; ++i) {
    CHECK(rel_error(dz[i], fd[0][i]) < 1e-6);
    CHECK(rel_error(d_gain[i], fd[1][i]) < 1e-6);
    CHECK(rel_error(d_bias[i], fd[2][i]) < 1e-6);
  }
}

TEST_CASE("kernels instantiate for float") {
  MatrixT<float> a(2, 2);
  a << 1.f, 2.f, 3.f, 4.f;
  VectorT<float> x(2);
  x << 5.f, 6.f;
  VectorT<float> y = matmul(a, x);
  CHECK(y[0] == 17.f);
  CHECK(y[1] == 39.f);
  CHECK(sigmoid_scalar(0.f) == 0.5f);
  VectorT<float> sm = softmax(VectorT<float>(VectorT<float>::Zero(4)));
  CHECK(sm[0] == doctest::Approx(0.25f));
}

#ifdef RNNKIT_CHECKED
TEST_CASE("checked builds flag non-finite products") {
  Matrix a(1, 1);
  a << std::numeric_limits<double>::infinity();
  Matrix b(1, 1);
  b << 0.0;
  CHECK_THROWS_AS(matmul(a, b), NumericError);  // inf * 0 = nan
}
#endif

TEST_SUITE_END();
