#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "oracle.hpp"
#include "vbd/conv.hpp"
#include "vbd/kernel_model.hpp"
#include "vbd/prior.hpp"

using namespace vbd;

namespace {

bool is_diag_symmetric(const Vec& h, int side) {
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c)
      if (h[r * side + c] != h[c * side + r]) return false;
  return true;
}

}  // namespace

TEST_CASE("constraint dimension P") {
  CHECK(build_symmetric_constraint(3).P == 5);
  CHECK(build_symmetric_constraint(9).P == 44);

  // side 1 is fully determined by the sum constraint
  const KernelModel trivial = build_symmetric_constraint(1);
  CHECK(trivial.P == 0);
  CHECK(trivial.t[0] == 1.0);
  CHECK(kernel_from_z(trivial, Vec(0))[0] == 1.0);

  CHECK_THROWS_AS(build_symmetric_constraint(4), std::invalid_argument);
  CHECK_THROWS_AS(build_symmetric_constraint(-3), std::invalid_argument);
}

TEST_CASE("kernel_from_z satisfies both constraints for random z") {
  for (int side : {3, 5, 9}) {
    const KernelModel model = build_symmetric_constraint(side);
    for (int trial = 0; trial < 100; ++trial) {
      const Vec z = oracle::random_vec(model.P, 100 * side + trial);
      const Vec h = kernel_from_z(model, z);
      CHECK(std::abs(h.sum() - 1.0) < 1e-12);
      CHECK(is_diag_symmetric(h, side));
    }
  }
}

TEST_CASE("z = 0 returns the affine offset") {
  const KernelModel model = build_symmetric_constraint(5);
  CHECK((kernel_from_z(model, Vec::Zero(model.P)) - model.t).norm() == 0.0);
}

TEST_CASE("left inverse round trips") {
  const KernelModel model = build_symmetric_constraint(5);

  SUBCASE("z -> h -> z") {
    const Vec z = oracle::random_vec(model.P, 42);
    const Vec z_back = z_from_kernel(model, kernel_from_z(model, z));
    CHECK((z - z_back).norm() < 1e-10);
  }
  SUBCASE("h = t maps to zero") {
    CHECK(z_from_kernel(model, model.t).norm() < 1e-12);
  }
  SUBCASE("uniform kernel is exactly representable") {
    const Vec h = uniform_kernel(5, 5);
    const Vec h_back = kernel_from_z(model, z_from_kernel(model, h));
    CHECK((h - h_back).norm() < 1e-12);
  }
  SUBCASE("asymmetric kernel projects to the dense least-squares solution") {
    Vec h = oracle::random_vec(model.M, 7, 0.3);
    h[3] += 1.0;  // break symmetry
    const Vec z = z_from_kernel(model, h);
    const Vec z_dense =
        (model.T).colPivHouseholderQr().solve(h - model.t);
    CHECK((z - z_dense).norm() < 1e-10);
    // residual orthogonal to the constraint subspace = orthogonal projection
    const Vec residual = h - kernel_from_z(model, z);
    CHECK((model.T.transpose() * residual).norm() < 1e-10);
  }
}

TEST_CASE("apply_blur matches the dense operator and both conv paths agree") {
  const KernelModel model = build_symmetric_constraint(3);
  const ImagePlane x = oracle::random_image(8, 8, 11);
  const Vec z = oracle::random_vec(model.P, 12, 0.2);
  const BlurOperator op(model, z);

  const Mat Hd = oracle::dense_H(model, z, 8, 8);
  const Vec dense = Hd * x.data.matrix();

  const ImagePlane direct = apply_blur(op, x, ConvMethod::Direct);
  const ImagePlane fft = apply_blur(op, x, ConvMethod::Fft);
  CHECK((direct.data.matrix() - dense).norm() < 1e-12);
  CHECK((fft.data.matrix() - dense).norm() < 1e-12);
}

TEST_CASE("delta kernel acts as identity") {
  const KernelModel model = build_symmetric_constraint(3);
  Vec delta = Vec::Zero(9);
  delta[4] = 1.0;  // center; symmetric and sums to one
  const Vec z = z_from_kernel(model, delta);
  CHECK((kernel_from_z(model, z) - delta).norm() < 1e-12);

  const BlurOperator op(model, z);
  const ImagePlane x = oracle::random_image(6, 6, 3);
  CHECK((apply_blur(op, x).data - x.data).abs().maxCoeff() < 1e-12);
  CHECK((apply_blur_adjoint(op, x).data - x.data).abs().maxCoeff() < 1e-12);
}

TEST_CASE("sum-to-one kernel preserves constants under circular boundary") {
  const KernelModel model = build_symmetric_constraint(5);
  const BlurOperator op(model, oracle::random_vec(model.P, 21, 0.3));
  ImagePlane c(7, 9);
  c.data.setConstant(0.37);
  const ImagePlane out = apply_blur(op, c);
  CHECK((out.data - 0.37).abs().maxCoeff() < 1e-12);
}

TEST_CASE("adjoint identity <Hx, r> = <x, H^T r>") {
  const KernelModel model = build_symmetric_constraint(3);
  for (int trial = 0; trial < 10; ++trial) {
    const BlurOperator op(model, oracle::random_vec(model.P, 500 + trial, 0.4));
    const ImagePlane x = oracle::random_image(8, 8, 600 + trial);
    const ImagePlane r = oracle::random_image(8, 8, 700 + trial);
    const double lhs = (apply_blur(op, x).data * r.data).sum();
    const double rhs = (x.data * apply_blur_adjoint(op, r).data).sum();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("adjoint equals dense transpose") {
  const KernelModel model = build_symmetric_constraint(3);
  const Vec z = oracle::random_vec(model.P, 31, 0.4);
  const BlurOperator op(model, z);
  const ImagePlane r = oracle::random_image(6, 6, 32);
  const Mat Hd = oracle::dense_H(model, z, 6, 6);
  const Vec dense = Hd.transpose() * r.data.matrix();
  CHECK((apply_blur_adjoint(op, r).data.matrix() - dense).norm() < 1e-12);
}

TEST_CASE("apply_Kp: decomposition identity and dense oracle") {
  const KernelModel model = build_symmetric_constraint(3);
  const ImagePlane x = oracle::random_image(6, 6, 41);
  const Vec z = oracle::random_vec(model.P, 42, 0.5);

  SUBCASE("sum_p z_p K_p x + K_0 x = H x") {
    const BlurOperator op(model, z);
    Arr sum = apply_Kp(model, 0, x).data;
    for (int p = 1; p <= model.P; ++p) sum += z[p - 1] * apply_Kp(model, p, x).data;
    CHECK((sum - apply_blur(op, x).data).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("dense K_p") {
    for (int p = 0; p <= model.P; ++p) {
      const Mat Kd = oracle::dense_Kp(model, p, 6, 6);
      CHECK((apply_Kp(model, p, x).data.matrix() - Kd * x.data.matrix()).norm() < 1e-12);
      CHECK((apply_Kp_adjoint(model, p, x).data.matrix() -
             Kd.transpose() * x.data.matrix())
                .norm() < 1e-12);
    }
  }
  SUBCASE("index out of range") {
    CHECK_THROWS_AS(apply_Kp(model, model.P + 1, x), std::invalid_argument);
  }
}

TEST_CASE("shift-trace identity") {
  // trace(K_p Diag(d) K_q^T) = (T^T T)_{p,q} sum(d), dense check
  const KernelModel model = build_symmetric_constraint(3);
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const int p = 1 + static_cast<int>(rng() % model.P);
    const int q = 1 + static_cast<int>(rng() % model.P);
    const Arr d = oracle::random_image(6, 6, 800 + trial, 0.0, 2.0).data;
    const Mat Kp = oracle::dense_Kp(model, p, 6, 6);
    const Mat Kq = oracle::dense_Kp(model, q, 6, 6);
    const double dense = (Kp * d.matrix().asDiagonal() * Kq.transpose()).trace();
    const double closed = model.TtT(p - 1, q - 1) * d.sum();
    CHECK(dense == doctest::Approx(closed).epsilon(1e-10));
  }
}

TEST_CASE("apply_D") {
  SUBCASE("constant image has zero differences") {
    ImagePlane c(5, 6);
    c.data.setConstant(2.0);
    const ImageGradients g = apply_D(c);
    CHECK(g.dh.abs().maxCoeff() == 0.0);
    CHECK(g.dv.abs().maxCoeff() == 0.0);
  }
  SUBCASE("horizontal ramp kills vertical differences") {
    ImagePlane ramp(6, 6);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) ramp.at(i, j) = static_cast<double>(j) / 6;
    CHECK(apply_D(ramp).dv.abs().maxCoeff() == 0.0);
  }
  SUBCASE("energy matches dense difference matrix") {
    const ImagePlane x = oracle::random_image(6, 6, 91);
    const ImageGradients g = apply_D(x);
    const Mat D = oracle::dense_D(6, 6);
    const Vec stacked = D * x.data.matrix();
    CHECK(g.dh.square().sum() + g.dv.square().sum() ==
          doctest::Approx(stacked.squaredNorm()).epsilon(1e-12));
  }
}

TEST_CASE("DtWD and its diagonal match dense assembly") {
  const int H = 6, W = 6, N = H * W;
  const ImagePlane x = oracle::random_image(H, W, 93);
  const Arr w = oracle::random_image(H, W, 94, 0.1, 2.0).data;

  const Mat D = oracle::dense_D(H, W);
  Mat Wd = Mat::Zero(2 * N, 2 * N);
  for (int j = 0; j < N; ++j) {
    Wd(2 * j, 2 * j) = w[j];
    Wd(2 * j + 1, 2 * j + 1) = w[j];
  }
  const Mat dense = D.transpose() * Wd * D;
  CHECK((apply_DtWD(x, w).data.matrix() - dense * x.data.matrix()).norm() < 1e-12);
  CHECK((dtwd_diag(w, H, W).matrix() - dense.diagonal()).norm() < 1e-12);
}

TEST_CASE("majorant weights") {
  Arr lambda(3);
  lambda << 4.0, 1.0, 0.25;
  SUBCASE("kappa = 1 gives unit weights") {
    CHECK((majorant_weights(lambda, 1.0) - 1.0).abs().maxCoeff() == 0.0);
  }
  SUBCASE("kappa = 1/2") {
    const Arr w = majorant_weights(lambda, 0.5);
    CHECK(w[0] == doctest::Approx(0.25));
    CHECK(w[1] == doctest::Approx(0.5));
    CHECK(w[2] == doctest::Approx(1.0));
  }
  SUBCASE("majorant touches the bounded function at v = lambda") {
    const double gamma = 1.7, kappa = 0.5, lam = 0.8;
    const double bound = gamma * (kappa * lam + (1.0 - kappa) * lam) / std::pow(lam, 1.0 - kappa);
    CHECK(bound == doctest::Approx(gamma * std::pow(lam, kappa)).epsilon(1e-14));
  }
  SUBCASE("nonpositive lambda rejected") {
    Arr bad(2);
    bad << 1.0, 0.0;
    CHECK_THROWS_AS(majorant_weights(bad, 0.5), numerical_error);
  }
}

TEST_CASE("SAR prior construction") {
  SUBCASE("A has full column rank and L is positive definite") {
    for (int side : {3, 5}) {
      const KernelModel model = build_symmetric_constraint(side);
      const PriorSpec prior = make_default_prior(model);
      REQUIRE(prior.A.rows() == 2 * model.M + 1);
      Eigen::SelfAdjointEigenSolver<Mat> eig(prior.L);
      CHECK(eig.eigenvalues().minCoeff() > 0.0);
      CHECK((prior.L - prior.L.transpose()).norm() < 1e-10);
    }
  }
  SUBCASE("orthonormal T with t = 0 reduces L to (A T)^T (A T)") {
    // synthetic model with a square orthonormal T
    const int M = 9;
    KernelModel model;
    model.side = 3;
    model.M = M;
    model.P = M;
    std::mt19937_64 rng(5);
    Mat G(M, M);
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < M; ++j) G(i, j) = oracle::uniform(rng, -1.0, 1.0);
    model.T = Eigen::HouseholderQR<Mat>(G).householderQ();
    model.t = Vec::Zero(M);
    model.TtT = model.T.transpose() * model.T;
    model.Tt_t = model.T.transpose() * model.t;
    model.TtT_llt.compute(model.TtT);

    PriorSpec spec;
    spec.A = oracle::random_spd(M, 6);  // SPD implies rank M
    spec.m = oracle::random_vec(M, 7);
    const PriorSpec built = build_sar_prior(model, spec);
    const Mat expected = (spec.A * model.T).transpose() * (spec.A * model.T);
    CHECK((built.L - expected).norm() < 1e-10 * expected.norm());
  }
  SUBCASE("representable prior mean recovers z0") {
    const KernelModel model = build_symmetric_constraint(5);
    const Vec z0 = oracle::random_vec(model.P, 8);
    PriorSpec spec;
    spec.A = default_sar_matrix(5);
    spec.m = kernel_from_z(model, z0);
    const PriorSpec built = build_sar_prior(model, spec);
    CHECK((built.mu - z0).norm() < 1e-10);
  }
  SUBCASE("rank-deficient A is rejected") {
    const KernelModel model = build_symmetric_constraint(3);
    PriorSpec spec;
    spec.A = Mat::Zero(5, model.M);  // rank 0
    spec.m = Vec::Zero(model.M);
    CHECK_THROWS_AS(build_sar_prior(model, spec), numerical_error);
  }
}

TEST_CASE("conv input validation") {
  const ImagePlane tiny = oracle::random_image(2, 2, 1);
  const Vec k = uniform_kernel(3, 3);
  CHECK_THROWS_AS(circ_conv(tiny, k, 3), std::invalid_argument);
  const ImagePlane x = oracle::random_image(8, 8, 2);
  CHECK_THROWS_AS(circ_conv(x, k, 4), std::invalid_argument);
}
