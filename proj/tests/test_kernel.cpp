#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "ntk/kernel.hpp"
#include "test_util.hpp"

namespace ntk {
namespace {

using testing::random_inputs;
using testing::random_psd;

constexpr double kPi = std::numbers::pi;

KernelState fc_state(const Matrix& k, const Matrix& theta) {
  InputKernel k0{k, static_cast<std::size_t>(k.rows()), 1, false};
  KernelState s = initial_state(k0);
  s.ntk = theta;
  return s;
}

KernelState spatial_state(const Matrix& k, std::size_t n, std::size_t P) {
  InputKernel k0{k, n, P, true};
  return initial_state(k0);
}

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

// ---- oracles (independent loops over the 4-index form) -------------------

double t4(const Matrix& m, std::size_t P, std::size_t i, std::size_t j, std::size_t p, std::size_t q) {
  return m(static_cast<Eigen::Index>(i * P + p), static_cast<Eigen::Index>(j * P + q));
}

Matrix brute_filter_average(const Matrix& t, std::size_t n, std::size_t P, const std::vector<int>& off) {
  Matrix out(t.rows(), t.cols());
  const int iP = static_cast<int>(P);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t q = 0; q < P; ++q) {
          double acc = 0.0;
          for (int m : off) {
            const int pp = ((static_cast<int>(p) + m) % iP + iP) % iP;
            const int qq = ((static_cast<int>(q) + m) % iP + iP) % iP;
            acc += t4(t, P, i, j, static_cast<std::size_t>(pp), static_cast<std::size_t>(qq));
          }
          out(static_cast<Eigen::Index>(i * P + p), static_cast<Eigen::Index>(j * P + q)) =
              acc / static_cast<double>(off.size());
        }
  return out;
}

// E[f(u) g(v)] for (u, v) ~ N(0, [[a, c], [c, b]]) by plain Monte Carlo.
template <class F, class G>
double gaussian_pair_expectation(double a, double b, double c, F f, G g, std::size_t samples,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  const double l11 = std::sqrt(a);
  const double l21 = c / l11;
  const double l22 = std::sqrt(std::max(b - l21 * l21, 0.0));
  double acc = 0.0;
  for (std::size_t k = 0; k < samples; ++k) {
    const double z1 = z(rng), z2 = z(rng);
    acc += f(l11 * z1) * g(l21 * z1 + l22 * z2);
  }
  return acc / static_cast<double>(samples);
}

const auto relu = [](double x) { return x > 0.0 ? x : 0.0; };
const auto step = [](double x) { return x > 0.0 ? 1.0 : 0.0; };

// ---- input kernel --------------------------------------------------------

TEST(InputKernel, OrthonormalScaledByDim) {
  NetworkSpec spec = make_fc_spec(4, 1, 2, Parameterization::NTK);
  Matrix X = Matrix::Zero(2, 4);
  X(0, 0) = 1.0;
  X(1, 1) = 1.0;
  const auto k = input_kernel(X, spec);
  EXPECT_DOUBLE_EQ(k.gram(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(k.gram(1, 1), 0.25);
  EXPECT_DOUBLE_EQ(k.gram(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(k.gram(1, 0), 0.0);
}

TEST(InputKernel, DuplicateInputsGiveEqualEntries) {
  NetworkSpec spec = make_fc_spec(3, 1, 2, Parameterization::NTK);
  Matrix X(2, 3);
  X << 0.3, -1.2, 2.0, 0.3, -1.2, 2.0;
  const auto k = input_kernel(X, spec).gram;
  EXPECT_EQ(k(0, 0), k(0, 1));
  EXPECT_EQ(k(0, 0), k(1, 1));
  EXPECT_NEAR(min_eigenvalue(k), 0.0, 1e-14);
}

TEST(InputKernel, MatchesDoubleLoop) {
  const Matrix X = random_inputs(5, 16, 1);
  const auto k = input_kernel(X, make_fc_spec(16, 1, 2, Parameterization::NTK)).gram;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      double dot = 0.0;
      for (int c = 0; c < 16; ++c) dot += X(i, c) * X(j, c);
      EXPECT_NEAR(k(i, j), dot / 16.0, 1e-12);
    }
}

TEST(InputKernel, SpatialMatchesDoubleLoop) {
  NetworkSpec spec;
  spec.input_dim = 12;
  spec.spatial_size = 4;  // 3 channels
  spec.layers = {LayerSpec::conv(2, {-1, 0, 1}), LayerSpec::relu(), LayerSpec::gap(), LayerSpec::dense(1)};
  const Matrix X = random_inputs(3, 12, 2);
  const auto k = input_kernel(X, spec);
  ASSERT_TRUE(k.spatial_axes);
  ASSERT_EQ(k.gram.rows(), 12);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t q = 0; q < 4; ++q) {
          double acc = 0.0;
          for (std::size_t c = 0; c < 3; ++c)
            acc += X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c * 4 + p)) *
                   X(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c * 4 + q));
          EXPECT_NEAR(t4(k.gram, 4, i, j, p, q), acc / 3.0, 1e-12);
        }
}

TEST(InputKernel, DimensionMismatch) {
  EXPECT_THROW(input_kernel(Matrix::Zero(2, 3), make_fc_spec(4, 1, 2, Parameterization::NTK)), ShapeError);
}

// ---- dense step ----------------------------------------------------------

TEST(DenseStep, ImprovedStandardRow) {
  const Hyperparams hp{2.0, 0.1};
  const auto s = dense_step(fc_state(scalar(0.5), scalar(1.0)), 4, hp, Parameterization::ImprovedStandard);
  EXPECT_NEAR(s.nngp(0, 0), 1.1, 1e-12);
  EXPECT_NEAR(s.ntk_matrix()(0, 0), 5.0, 1e-12);
}

TEST(DenseStep, NtkRow) {
  const Hyperparams hp{2.0, 0.1};
  const auto s = dense_step(fc_state(scalar(0.5), scalar(1.0)), 4, hp, Parameterization::NTK);
  EXPECT_NEAR(s.nngp(0, 0), 1.1, 1e-12);
  EXPECT_NEAR(s.ntk_matrix()(0, 0), 3.1, 1e-12);
}

TEST(DenseStep, NaiveDivergesStickilyWithFiniteNngp) {
  const Hyperparams hp{2.0, 0.1};
  auto s = dense_step(fc_state(scalar(0.5), scalar(1.0)), 4, hp, Parameterization::NaiveStandard);
  EXPECT_TRUE(s.divergent());
  EXPECT_NEAR(s.nngp(0, 0), 1.1, 1e-12);
  s = dense_step(relu_step(s), 4, hp, Parameterization::NTK);
  EXPECT_TRUE(s.divergent());
  EXPECT_TRUE(std::isfinite(s.nngp(0, 0)));
  EXPECT_THROW(s.ntk_matrix(), DivergentKernelError);
}

TEST(DenseStep, NngpSharedAcrossParameterizations) {
  const Matrix k = random_psd(6, 3), th = random_psd(6, 4);
  const Hyperparams hp{1.7, 0.3};
  const auto a = dense_step(fc_state(k, th), 5, hp, Parameterization::NaiveStandard);
  const auto b = dense_step(fc_state(k, th), 5, hp, Parameterization::NTK);
  const auto c = dense_step(fc_state(k, th), 5, hp, Parameterization::ImprovedStandard);
  EXPECT_TRUE(a.nngp == b.nngp);
  EXPECT_TRUE(b.nngp == c.nngp);
}

TEST(DenseStep, RejectsSpatialState) {
  auto s = spatial_state(Matrix::Identity(4, 4), 2, 2);
  EXPECT_THROW(dense_step(s, 2, {}, Parameterization::NTK), ShapeError);
}

// ---- conv step / filter average ------------------------------------------

TEST(ConvStep, ConstantKernel) {
  const Hyperparams hp{2.0, 0.1};
  const double c = 0.37;
  const auto s = conv_step(spatial_state(Matrix::Constant(8, 8, c), 2, 4), 3,
                           std::vector<int>{-1, 0, 1}, hp, Parameterization::NTK);
  for (Eigen::Index a = 0; a < 8; ++a)
    for (Eigen::Index b = 0; b < 8; ++b) EXPECT_NEAR(s.nngp(a, b), 2.0 * c + 0.1, 1e-12);
}

TEST(FilterAverage, IdentityOverPixelsIsPreserved) {
  const std::vector<int> off{-1, 0, 1};
  const Matrix a = filter_average(Matrix::Identity(4, 4), 1, 4, off);
  EXPECT_TRUE(a == Matrix::Identity(4, 4));
}

TEST(FilterAverage, TwoPixelWrap) {
  const double a = 1.3, b = 0.4, c = 0.7;
  Matrix k(2, 2);
  k << a, b, b, c;
  const Matrix out = filter_average(k, 1, 2, std::vector<int>{-1, 0, 1});
  // offsets -1 and +1 both wrap pixel 0 onto pixel 1
  EXPECT_NEAR(out(0, 0), (a + 2 * c) / 3.0, 1e-15);
  EXPECT_NEAR(out(1, 1), (c + 2 * a) / 3.0, 1e-15);
  EXPECT_NEAR(out(0, 1), b, 1e-15);
}

TEST(FilterAverage, MatchesBruteForce) {
  for (std::size_t P : {1u, 3u, 5u}) {
    const std::size_t n = 3;
    const Matrix t = random_psd(n * P, 10 + P);
    for (const auto& off : {std::vector<int>{0}, std::vector<int>{-1, 0, 1}, std::vector<int>{-2, 0, 2},
                            std::vector<int>{-2, -1, 0, 1, 2}}) {
      const Matrix got = filter_average(t, n, P, off);
      EXPECT_LE((got - brute_filter_average(t, n, P, off)).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(FilterAverage, PreservesConstantsExactlyAndPsd) {
  const std::vector<int> off{-2, -1, 0, 1, 2};
  for (double c : {0.1, 1.0 / 3.0, 7.77, -2.5}) {
    const Matrix out = filter_average(Matrix::Constant(12, 12, c), 3, 4, off);
    EXPECT_TRUE((out.array() == c).all()) << c;
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Matrix t = random_psd(4 * 6, seed);
    EXPECT_TRUE(is_psd(filter_average(t, 4, 6, off))) << seed;
  }
}

TEST(ConvStep, ParameterizationFormulas) {
  const std::size_t n = 2, P = 3;
  const std::vector<int> off{-1, 0, 1};
  const Matrix k = random_psd(n * P, 20), th = random_psd(n * P, 21);
  const Hyperparams hp{1.5, 0.2};
  KernelState s = spatial_state(k, n, P);
  s.ntk = th;
  const Matrix ak = brute_filter_average(k, n, P, off), ath = brute_filter_average(th, n, P, off);
  const auto ntk = conv_step(s, 4, off, hp, Parameterization::NTK);
  const auto imp = conv_step(s, 4, off, hp, Parameterization::ImprovedStandard);
  const auto naive = conv_step(s, 4, off, hp, Parameterization::NaiveStandard);
  const Matrix k_expect = (1.5 * ak).array() + 0.2;
  EXPECT_LE((ntk.nngp - k_expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(ntk.nngp == imp.nngp && imp.nngp == naive.nngp);
  const Matrix ntk_expect = ((1.5 * ak).array() + 0.2).matrix() + 1.5 * ath;
  const Matrix imp_expect = ((12.0 * ak).array() + 1.0).matrix() + 1.5 * ath;
  EXPECT_LE((*ntk.ntk - ntk_expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LE((*imp.ntk - imp_expect).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(naive.divergent());
}

TEST(ConvStep, RejectsFcState) {
  EXPECT_THROW(conv_step(fc_state(scalar(1), scalar(0)), 1, std::vector<int>{0}, {}, Parameterization::NTK),
               ShapeError);
}

// ---- ReLU maps -----------------------------------------------------------

TEST(ReluMaps, PerfectlyCorrelated) {
  const auto m = relu_maps(Matrix::Ones(2, 2));
  EXPECT_LE((m.value.array() - 0.5).abs().maxCoeff(), 1e-12);
  EXPECT_LE((m.derivative.array() - 0.5).abs().maxCoeff(), 1e-12);
}

TEST(ReluMaps, OrthogonalAgainstMonteCarlo) {
  const auto m = relu_maps(Matrix::Identity(2, 2));
  EXPECT_NEAR(m.value(0, 1), 1.0 / (2.0 * kPi), 1e-12);
  EXPECT_NEAR(m.derivative(0, 1), 0.25, 1e-12);
  const std::size_t samples = 10'000'000;
  EXPECT_NEAR(m.value(0, 1), gaussian_pair_expectation(1, 1, 0, relu, relu, samples, 1), 1e-3);
  EXPECT_NEAR(m.derivative(0, 1), gaussian_pair_expectation(1, 1, 0, step, step, samples, 2), 1e-3);
}

TEST(ReluMaps, AntiCorrelated) {
  Matrix k(2, 2);
  k << 1, -1, -1, 1;
  const auto m = relu_maps(k);
  EXPECT_NEAR(m.value(0, 1), 0.0, 1e-12);
  EXPECT_NEAR(m.derivative(0, 1), 0.0, 1e-12);
}

TEST(ReluMaps, GenericCovarianceAgainstMonteCarlo) {
  Matrix k(2, 2);
  k << 1.7, -0.6, -0.6, 0.9;
  const auto m = relu_maps(k);
  const std::size_t samples = 4'000'000;
  EXPECT_NEAR(m.value(0, 1), gaussian_pair_expectation(1.7, 0.9, -0.6, relu, relu, samples, 3), 2e-3);
  EXPECT_NEAR(m.derivative(0, 1), gaussian_pair_expectation(1.7, 0.9, -0.6, step, step, samples, 4), 2e-3);
  EXPECT_NEAR(m.value(0, 0), 1.7 / 2.0, 1e-12);
}

TEST(ReluMaps, HomogeneityProperty) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix k = random_psd(5, 100 + seed);
    const double c = 0.1 + 3.0 * to_unit_interval(counter_hash(seed, 0, 0));
    const auto base = relu_maps(k), scaled = relu_maps(c * k);
    EXPECT_LE((scaled.value - c * base.value).cwiseAbs().maxCoeff(), 1e-12 * c * base.value.cwiseAbs().maxCoeff());
    EXPECT_LE((scaled.derivative - base.derivative).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(ReluMaps, ZeroVarianceUnitsAreOff) {
  Matrix k = Matrix::Zero(2, 2);
  k(0, 0) = 1.0;
  const auto m = relu_maps(k);
  EXPECT_EQ(m.value(0, 1), 0.0);
  EXPECT_EQ(m.derivative(1, 1), 0.0);
}

TEST(ReluMaps, Errors) {
  Matrix neg = Matrix::Identity(2, 2);
  neg(1, 1) = -0.5;
  EXPECT_THROW(relu_maps(neg), NumericalError);
  Matrix bad(2, 2);
  bad << 1, 1.5, 1.5, 1;
  EXPECT_THROW(relu_maps(bad), NumericalError);
  Matrix edge(2, 2);
  edge << 1, 1 + 1e-14, 1 + 1e-14, 1;
  EXPECT_NO_THROW(relu_maps(edge));
  Matrix inf = Matrix::Identity(2, 2);
  inf(0, 0) = INFINITY;
  EXPECT_THROW(relu_maps(inf), NumericalError);
  Matrix nan = Matrix::Identity(2, 2);
  nan(0, 1) = nan(1, 0) = std::nan("");
  EXPECT_THROW(relu_maps(nan), NumericalError);
}

TEST(ReluMaps, NtkMapScalesByDerivative) {
  const Matrix k = Matrix::Ones(2, 2);
  const Matrix th = Matrix::Constant(2, 2, 3.0);
  EXPECT_LE((*relu_ntk_map(k, th) - Matrix::Constant(2, 2, 1.5)).cwiseAbs().maxCoeff(), 1e-12);
  Matrix anti(2, 2);
  anti << 1, -1, -1, 1;
  EXPECT_EQ((*relu_ntk_map(anti, th))(0, 1), 0.0);
  EXPECT_FALSE(relu_ntk_map(k, std::nullopt).has_value());
}

// ---- reductions ----------------------------------------------------------

TEST(Reductions, Constants) {
  const Matrix c = Matrix::Constant(6, 6, 0.3);
  EXPECT_TRUE((gap_reduce(c, 2, 3).array() == 0.3).all());
  EXPECT_TRUE((vec_reduce(c, 2, 3).array() == 0.3).all());
}

TEST(Reductions, GapOfPixelIdentity) {
  EXPECT_DOUBLE_EQ(gap_reduce(Matrix::Identity(2, 2), 1, 2)(0, 0), 0.5);
}

TEST(Reductions, VecExtractsPixelDiagonal) {
  const Vector v = (Vector(4) << 0.5, 1.5, 2.0, 4.0).finished();
  const Matrix t = v.asDiagonal();
  EXPECT_NEAR(vec_reduce(t, 1, 4)(0, 0), v.mean(), 1e-15);
}

TEST(Reductions, MatchBruteForce) {
  const std::size_t n = 3, P = 3;
  const Matrix t = random_psd(n * P, 7);
  const Matrix g = gap_reduce(t, n, P), v = vec_reduce(t, n, P);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double full = 0.0, diag = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        diag += t4(t, P, i, j, p, p);
        for (std::size_t q = 0; q < P; ++q) full += t4(t, P, i, j, p, q);
      }
      EXPECT_NEAR(g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), full / 9.0, 1e-12);
      EXPECT_NEAR(v(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), diag / 3.0, 1e-12);
    }
}

TEST(Reductions, RejectFcState) {
  EXPECT_THROW(gap_reduce(fc_state(scalar(1), scalar(1))), ShapeError);
  EXPECT_THROW(vec_reduce(fc_state(scalar(1), scalar(1))), ShapeError);
}

// ---- propagate -----------------------------------------------------------

TEST(Propagate, LinearReadoutImprovedStandard) {
  const std::size_t d = 6;
  NetworkSpec spec;
  spec.input_dim = d;
  spec.layers = {LayerSpec::dense(1)};
  const Matrix X = random_inputs(5, d, 9);
  const auto st = propagate(spec, X);
  const Matrix expect = (X * X.transpose()).array() + 1.0;
  EXPECT_LE((st.ntk_matrix() - expect).cwiseAbs().maxCoeff(), 1e-12 * expect.cwiseAbs().maxCoeff());
}

TEST(Propagate, NtkParamIndependentOfWidths) {
  const Matrix X = random_inputs(7, 5, 12);
  const auto a = propagate(make_fc_spec(5, 3, 8, Parameterization::NTK), X);
  const auto b = propagate(make_fc_spec(5, 3, 512, Parameterization::NTK), X);
  EXPECT_TRUE(a.nngp == b.nngp);
  EXPECT_TRUE(a.ntk_matrix() == b.ntk_matrix());
}

TEST(Propagate, NngpIdenticalAcrossParameterizations) {
  const Matrix X = random_inputs(7, 5, 13);
  const auto a = propagate(make_fc_spec(5, 3, 8, Parameterization::NaiveStandard), X);
  const auto b = propagate(make_fc_spec(5, 3, 8, Parameterization::NTK), X);
  const auto c = propagate(make_fc_spec(5, 3, 8, Parameterization::ImprovedStandard), X);
  EXPECT_TRUE(a.nngp == b.nngp && b.nngp == c.nngp);
  EXPECT_TRUE(a.divergent());
}

TEST(Propagate, SecondInputSetStacks) {
  const Matrix X = random_inputs(4, 5, 14), X2 = random_inputs(3, 5, 15);
  const auto spec = make_fc_spec(5, 2, 8, Parameterization::ImprovedStandard);
  Matrix all(7, 5);
  all << X, X2;
  const auto a = propagate(spec, X, &X2);
  const auto b = propagate(spec, all);
  EXPECT_TRUE(a.nngp == b.nngp);
  const auto blocks = split_blocks(*a.ntk, 4);
  EXPECT_EQ(blocks.cross.rows(), 3);
  EXPECT_EQ(blocks.cross.cols(), 4);
  EXPECT_TRUE(blocks.train == propagate(spec, X).ntk_matrix());
}

TEST(Propagate, RejectsInvalidSpec) {
  auto spec = make_fc_spec(5, 2, 0, Parameterization::NTK);
  EXPECT_THROW(propagate(spec, random_inputs(2, 5, 1)), SpecError);
}

TEST(Propagate, TraceEndsAtPropagateResult) {
  const Matrix X = random_inputs(4, 5, 16);
  const auto spec = make_fc_spec(5, 2, 8, Parameterization::ImprovedStandard);
  const auto trace = propagate_trace(spec, X);
  ASSERT_EQ(trace.size(), spec.layers.size() + 1);
  EXPECT_TRUE(trace.back().nngp == propagate(spec, X).nngp);
}

TEST(Propagate, ConvMatchesDenseWhenDegenerate) {
  const std::size_t C = 3;
  const Matrix X = random_inputs(6, C, 17);
  for (auto p : {Parameterization::NTK, Parameterization::ImprovedStandard}) {
    NetworkSpec conv;
    conv.input_dim = C;
    conv.spatial_size = 1;
    conv.parameterization = p;
    conv.layers = {LayerSpec::conv(4, {0}), LayerSpec::relu(), LayerSpec::conv(5, {0}),
                   LayerSpec::relu(), LayerSpec::gap(), LayerSpec::dense(1)};
    NetworkSpec dense = conv;
    dense.layers = {LayerSpec::dense(4), LayerSpec::relu(), LayerSpec::dense(5), LayerSpec::relu(),
                    LayerSpec::dense(1)};
    const auto a = propagate(conv, X), b = propagate(dense, X);
    EXPECT_LE((a.nngp - b.nngp).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((a.ntk_matrix() - b.ntk_matrix()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// ---- readout kernel ------------------------------------------------------

TEST(ReadoutKernel, EqualsNngpUnderNtkParam) {
  const Matrix X = random_inputs(6, 4, 18);
  const auto spec = make_fc_spec(4, 3, 8, Parameterization::NTK);
  EXPECT_TRUE(readout_kernel(spec, X) == propagate(spec, X).nngp);
}

TEST(ReadoutKernel, DiffersUnderImprovedStandard) {
  const Matrix X = random_inputs(6, 4, 19);
  const auto spec = make_fc_spec(4, 3, 8, Parameterization::ImprovedStandard);
  const auto trace = propagate_trace(spec, X);
  const Matrix& k_in = trace[trace.size() - 2].nngp;  // post-activation kernel entering the readout
  const Matrix r = readout_kernel(spec, X);
  EXPECT_LE((r - ((8.0 * k_in).array() + 1.0).matrix()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT((r - trace.back().nngp).cwiseAbs().maxCoeff(), 0.1);
}

TEST(ReadoutKernel, ZeroKernelGivesOnes) {
  NetworkSpec spec;
  spec.input_dim = 3;
  spec.layers = {LayerSpec::dense(1)};
  EXPECT_TRUE(readout_kernel(spec, Matrix::Zero(3, 3)) == Matrix::Ones(3, 3));
}

TEST(ReadoutKernel, RejectsNaive) {
  EXPECT_THROW(readout_kernel(make_fc_spec(4, 2, 8, Parameterization::NaiveStandard), random_inputs(2, 4, 1)),
               DivergentKernelError);
}

// ---- decomposition -------------------------------------------------------

TEST(Decompose, DepthOne) {
  NetworkSpec spec;
  spec.input_dim = 5;
  spec.layers = {LayerSpec::dense(1)};
  const Matrix X = random_inputs(4, 5, 20);
  const auto parts = decompose(spec, X);
  ASSERT_EQ(parts.size(), 1u);
  EXPECT_LE((parts[0].weight_part - X * X.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(parts[0].bias_part == Matrix::Ones(4, 4));
}

TEST(Decompose, DoublingWidths) {
  const Matrix X = random_inputs(6, 4, 21);
  const auto base = make_fc_spec(4, 3, 8, Parameterization::ImprovedStandard);
  const auto a = decompose(base, X);
  const auto b = decompose(with_hidden_widths(base, {16}), X);
  ASSERT_EQ(a.size(), b.size());
  // Layer 0 has the data dimension as fan-in; every later layer's fan-in is
  // a hidden baseline width.
  EXPECT_TRUE(a[0].weight_part == b[0].weight_part);
  for (std::size_t l = 1; l < a.size(); ++l) EXPECT_TRUE(b[l].weight_part == 2.0 * a[l].weight_part) << l;
  for (std::size_t l = 0; l < a.size(); ++l) EXPECT_TRUE(b[l].bias_part == a[l].bias_part) << l;
}

TEST(Decompose, SumsToNtk) {
  for (auto p : {Parameterization::NTK, Parameterization::ImprovedStandard}) {
    auto spec = make_fc_spec(5, 4, 8, p, {1.3, 0.2});
    spec = with_hidden_widths(spec, {3, 9, 27, 5});
    const Matrix X = random_inputs(8, 5, 22);
    const auto st = propagate(spec, X);
    Matrix sum = Matrix::Zero(8, 8);
    for (const auto& c : decompose(spec, X)) sum += c.weight_part + c.bias_part;
    EXPECT_LE((sum - st.ntk_matrix()).cwiseAbs().maxCoeff(), 1e-10 * st.ntk_matrix().cwiseAbs().maxCoeff());
  }
}

TEST(Decompose, ConvSumsToNtk) {
  NetworkSpec spec;
  spec.input_dim = 10;
  spec.spatial_size = 5;
  spec.layers = {LayerSpec::conv(3, {-1, 0, 1}), LayerSpec::relu(), LayerSpec::conv(4, {-2, 0, 2}),
                 LayerSpec::relu(), LayerSpec::vectorize(), LayerSpec::dense(1)};
  const Matrix X = random_inputs(4, 10, 23);
  const auto st = propagate(spec, X);
  Matrix sum = Matrix::Zero(4, 4);
  for (const auto& c : decompose(spec, X)) sum += c.weight_part + c.bias_part;
  EXPECT_LE((sum - st.ntk_matrix()).cwiseAbs().maxCoeff(), 1e-10 * st.ntk_matrix().cwiseAbs().maxCoeff());
}

TEST(Decompose, RejectsNaive) {
  EXPECT_THROW(decompose(make_fc_spec(4, 2, 8, Parameterization::NaiveStandard), random_inputs(2, 4, 1)),
               DivergentKernelError);
}

// ---- invariants over random specs ----------------------------------------

TEST(Invariants, RandomSpecsGiveSymmetricPsdKernels) {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 60; ++t) {
    const auto spec = testing::random_valid_spec(rng);
    const std::size_t n = 1 + rng() % 24;
    const Matrix X = random_inputs(n, spec.input_dim, 1000 + static_cast<std::uint64_t>(t));
    const auto st = propagate(spec, X);
    EXPECT_LE(max_abs_asymmetry(st.nngp), 1e-12);
    EXPECT_TRUE(is_psd(st.nngp)) << to_json(spec).dump();
    if (spec.parameterization == Parameterization::NaiveStandard) {
      EXPECT_TRUE(st.divergent());
    } else {
      EXPECT_LE(max_abs_asymmetry(*st.ntk), 1e-12);
      EXPECT_TRUE(is_psd(*st.ntk)) << to_json(spec).dump();
    }
  }
}

}  // namespace
}  // namespace ntk
