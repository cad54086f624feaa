#pragma once

// Minimal deterministic numeric kernel: dense layers, activations, batch
// normalization, binary focal loss, activity L2, Adam and gradient checking.
// All math is double precision and single threaded.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "crpaml/common.hpp"

namespace crpaml::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline std::string shape_str(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// ---- dense -------------------------------------------------------------------

struct DenseParams {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out

  std::size_t in() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t out() const { return static_cast<std::size_t>(weight.cols()); }
};

struct DenseGrads {
  Matrix dx;
  Matrix dweight;
  Matrix dbias;
};

/// Uniform fan-in scaling: U(-sqrt(3/in), sqrt(3/in)), zero bias.
inline DenseParams dense_init(std::size_t in, std::size_t out, Rng& rng) {
  DenseParams p{Matrix(in, out), Matrix::Zero(1, out)};
  const double limit = std::sqrt(3.0 / static_cast<double>(in));
  for (Eigen::Index i = 0; i < p.weight.size(); ++i) p.weight.data()[i] = rng.uniform(-limit, limit);
  return p;
}

inline Matrix dense_forward(const Matrix& x, const DenseParams& p) {
  require_shape(x.cols() == p.weight.rows() && p.bias.rows() == 1 && p.bias.cols() == p.weight.cols(),
                "dense_forward: input " + shape_str(x) + " vs weight " + shape_str(p.weight));
  Matrix y = x * p.weight;
  y.rowwise() += p.bias.row(0);
  return y;
}

inline DenseGrads dense_backward(const Matrix& x, const DenseParams& p, const Matrix& dy) {
  require_shape(dy.rows() == x.rows() && dy.cols() == p.weight.cols(),
                "dense_backward: dy " + shape_str(dy) + " vs output " + std::to_string(x.rows()) + "x" +
                    std::to_string(p.weight.cols()));
  return {dy * p.weight.transpose(), x.transpose() * dy, dy.colwise().sum()};
}

// ---- activations ----------------------------------------------------------------

enum class Activation { Identity, Tanh, Relu, LeakyRelu, Sigmoid };

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Matrix activate(const Matrix& z, Activation a, double leak = 0.3) {
  switch (a) {
    case Activation::Identity: return z;
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Relu: return z.cwiseMax(0.0);
    case Activation::LeakyRelu: return z.unaryExpr([leak](double v) { return v > 0 ? v : leak * v; });
    case Activation::Sigmoid: return z.unaryExpr([](double v) { return sigmoid(v); });
  }
  return z;
}

/// Gradient through the activation given its input z, output y and upstream dy.
inline Matrix activate_backward(const Matrix& z, const Matrix& y, const Matrix& dy, Activation a, double leak = 0.3) {
  switch (a) {
    case Activation::Identity: return dy;
    case Activation::Tanh: return (dy.array() * (1.0 - y.array().square())).matrix();
    case Activation::Relu: return (dy.array() * (z.array() > 0.0).cast<double>()).matrix();
    case Activation::LeakyRelu:
      return (dy.array() * (z.array() > 0.0).select(Eigen::ArrayXXd::Ones(z.rows(), z.cols()), leak)).matrix();
    case Activation::Sigmoid: return (dy.array() * y.array() * (1.0 - y.array())).matrix();
  }
  return dy;
}

// ---- batch normalization -----------------------------------------------------

enum class Mode { Train, Infer };

struct BatchNormState {
  Matrix gamma;         // 1 x features
  Matrix beta;          // 1 x features
  Matrix running_mean;  // 1 x features
  Matrix running_var;   // 1 x features
  double momentum = 0.99;
  double epsilon = 1e-5;

  static BatchNormState make(std::size_t features) {
    return {Matrix::Ones(1, features), Matrix::Zero(1, features), Matrix::Zero(1, features),
            Matrix::Ones(1, features)};
  }
};

struct BatchNormCache {
  Matrix x_hat;
  Matrix inv_std;  // 1 x features
};

struct BatchNormGrads {
  Matrix dx;
  Matrix dgamma;
  Matrix dbeta;
};

/// Training mode normalizes with (biased) batch statistics and folds them into
/// the running statistics; inference mode uses the running statistics only.
inline Matrix batchnorm_forward(const Matrix& x, BatchNormState& s, Mode mode, BatchNormCache* cache = nullptr) {
  require_shape(x.cols() == s.gamma.cols(), "batchnorm: input " + shape_str(x) + " vs gamma " + shape_str(s.gamma));
  Matrix mean, var;
  if (mode == Mode::Train) {
    if (x.rows() < 2) throw ShapeError("batchnorm: training mode needs a batch of at least 2 rows");
    mean = x.colwise().mean();
    var = (x.rowwise() - mean.row(0)).array().square().colwise().mean().matrix();
    s.running_mean = s.momentum * s.running_mean + (1.0 - s.momentum) * mean;
    s.running_var = s.momentum * s.running_var + (1.0 - s.momentum) * var;
  } else {
    mean = s.running_mean;
    var = s.running_var;
  }
  const Matrix inv_std = (var.array() + s.epsilon).rsqrt().matrix();
  Matrix x_hat = (x.rowwise() - mean.row(0)).array().rowwise() * inv_std.row(0).array();
  Matrix y = x_hat.array().rowwise() * s.gamma.row(0).array();
  y.rowwise() += s.beta.row(0);
  if (cache) *cache = {std::move(x_hat), inv_std};
  return y;
}

/// Exact gradient of the training-mode transform.
inline BatchNormGrads batchnorm_backward(const Matrix& dy, const BatchNormState& s, const BatchNormCache& c) {
  require_shape(dy.rows() == c.x_hat.rows() && dy.cols() == c.x_hat.cols(), "batchnorm_backward: dy shape");
  const double n = static_cast<double>(dy.rows());
  BatchNormGrads g;
  g.dbeta = dy.colwise().sum();
  g.dgamma = (dy.array() * c.x_hat.array()).colwise().sum().matrix();
  const Matrix dx_hat = dy.array().rowwise() * s.gamma.row(0).array();
  const Matrix sum_dx_hat = dx_hat.colwise().sum();
  const Matrix sum_dx_hat_xhat = (dx_hat.array() * c.x_hat.array()).colwise().sum().matrix();
  Matrix inner = (n * dx_hat.array()).matrix();
  inner.rowwise() -= sum_dx_hat.row(0);
  inner -= (c.x_hat.array().rowwise() * sum_dx_hat_xhat.row(0).array()).matrix();
  g.dx = (inner.array().rowwise() * (c.inv_std.row(0).array() / n)).matrix();
  return g;
}

// ---- losses ----------------------------------------------------------------------

struct FocalLossConfig {
  double alpha = 0.25;
  double gamma = 3.0;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("focal loss alpha must lie in (0,1)");
    if (!(gamma >= 0.0)) throw ConfigError("focal loss gamma must be >= 0");
  }
};

struct LossValue {
  double loss = 0.0;
  double grad = 0.0;  // d loss / d p_hat
};

inline constexpr double kProbabilityClamp = 1e-12;

/// Binary focal cross-entropy:
///   y = 1: -alpha (1 - p)^gamma ln p
///   y = 0: -(1 - alpha) p^gamma ln(1 - p)
/// with p clamped to [1e-12, 1 - 1e-12].
inline LossValue focal_loss(int y, double p_hat, const FocalLossConfig& cfg) {
  const double p = std::clamp(p_hat, kProbabilityClamp, 1.0 - kProbabilityClamp);
  const double a = cfg.alpha, g = cfg.gamma;
  if (y == 1) {
    const double q = 1.0 - p;
    const double mod = std::pow(q, g);
    const double dmod = g == 0.0 ? 0.0 : g * std::pow(q, g - 1.0);
    const double lp = std::log(p);
    return {-a * mod * lp, a * (dmod * lp - mod / p)};
  }
  const double q = 1.0 - p;
  const double mod = std::pow(p, g);
  const double dmod = g == 0.0 ? 0.0 : g * std::pow(p, g - 1.0);
  const double lq = std::log(q);
  return {-(1.0 - a) * mod * lq, -(1.0 - a) * (dmod * lq - mod / q)};
}

inline double binary_cross_entropy(int y, double p_hat) {
  const double p = std::clamp(p_hat, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return y == 1 ? -std::log(p) : -std::log(1.0 - p);
}

struct PenaltyValue {
  double penalty = 0.0;
  Matrix grad;
};

/// lambda * sum(h^2) and its gradient 2 lambda h.
inline PenaltyValue l2_activity_penalty(const Matrix& h, double lambda) {
  if (lambda < 0) throw ConfigError("activity L2 lambda must be >= 0");
  return {lambda * h.squaredNorm(), 2.0 * lambda * h};
}

// ---- parameters and Adam --------------------------------------------------------

/// Named view of one parameter block and its gradient.
struct ParamView {
  std::string name;
  Matrix* value = nullptr;
  Matrix* grad = nullptr;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update over every block. Moments are created on
/// the first call and must shape-match afterwards.
inline void adam_step(std::vector<ParamView>& params, AdamState& state) {
  for (const auto& p : params) {
    require_shape(p.value && p.grad && p.value->rows() == p.grad->rows() && p.value->cols() == p.grad->cols(),
                  "adam: gradient shape mismatch for block " + p.name);
    if (!p.grad->allFinite()) throw NumericError("adam: non-finite gradient in block " + p.name);
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
      state.second_moment.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
    }
  }
  require_shape(state.first_moment.size() == params.size(), "adam: state does not match parameter list");
  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    const Matrix& g = *params[i].grad;
    require_shape(m.rows() == g.rows() && m.cols() == g.cols(), "adam: moment shape mismatch for " + params[i].name);
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    const auto m_hat = m.array() / correction1;
    const auto v_hat = v.array() / correction2;
    params[i].value->array() -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
  }
}

// ---- gradient checking ----------------------------------------------------------

/// Something with a scalar objective over an input batch and analytic
/// gradients for its parameters and input.
template <class F>
concept GradientFragment = requires(F f, const Matrix& x) {
  { f.loss(x) } -> std::convertible_to<double>;
  { f.backward(x) } -> std::same_as<Matrix>;  // fills parameter grads, returns d loss / d x
  { f.parameters() } -> std::same_as<std::vector<ParamView>>;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Max relative error between analytic gradients and central differences over
/// every parameter coordinate and every input coordinate.
template <GradientFragment F>
double gradient_check(F& fragment, const Matrix& input, double eps = 1e-5) {
  const Matrix dx = fragment.backward(input);
  auto params = fragment.parameters();
  std::vector<Matrix> analytic;
  for (const auto& p : params) analytic.push_back(*p.grad);

  double worst = 0.0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    Matrix& value = *params[b].value;
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double saved = value.data()[i];
      value.data()[i] = saved + eps;
      const double up = fragment.loss(input);
      value.data()[i] = saved - eps;
      const double down = fragment.loss(input);
      value.data()[i] = saved;
      worst = std::max(worst, relative_error(analytic[b].data()[i], (up - down) / (2 * eps)));
    }
  }
  Matrix x = input;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + eps;
    const double up = fragment.loss(x);
    x.data()[i] = saved - eps;
    const double down = fragment.loss(x);
    x.data()[i] = saved;
    worst = std::max(worst, relative_error(dx.data()[i], (up - down) / (2 * eps)));
  }
  return worst;
}

// ---- checkpoints -------------------------------------------------------------

struct NamedBlock {
  std::string name;
  Matrix value;
};

inline constexpr std::string_view kCheckpointMagic = "CRPAMLCK";
inline constexpr std::uint64_t kCheckpointVersion = 1;

// Layout: 8-byte magic, u64 version, u64 schema hash, u64 config hash,
// u64 block count, then per block: length-prefixed name, u64 rows, u64 cols,
// rows*cols little-endian f64 in row-major order.
inline void write_checkpoint(std::ostream& os, std::uint64_t schema_hash, std::uint64_t config_hash,
                             const std::vector<NamedBlock>& blocks) {
  os.write(kCheckpointMagic.data(), 8);
  io::put_u64(os, kCheckpointVersion);
  io::put_u64(os, schema_hash);
  io::put_u64(os, config_hash);
  io::put_u64(os, blocks.size());
  for (const auto& b : blocks) {
    io::put_string(os, b.name);
    io::put_u64(os, static_cast<std::uint64_t>(b.value.rows()));
    io::put_u64(os, static_cast<std::uint64_t>(b.value.cols()));
    for (Eigen::Index i = 0; i < b.value.size(); ++i) io::put_f64(os, b.value.data()[i]);
  }
}

struct Checkpoint {
  std::uint64_t schema_hash = 0;
  std::uint64_t config_hash = 0;
  std::vector<NamedBlock> blocks;
};

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::string_view(magic, 8) != kCheckpointMagic) throw FormatError("not a checkpoint (bad magic)");
  const auto version = io::get_u64(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.schema_hash = io::get_u64(is);
  ck.config_hash = io::get_u64(is);
  const auto n = io::get_u64(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    NamedBlock b;
    b.name = io::get_string(is, 256);
    const auto rows = io::get_u64(is), cols = io::get_u64(is);
    if (rows * cols > (1u << 26)) throw FormatError("checkpoint block too large: " + b.name);
    b.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index k = 0; k < b.value.size(); ++k) b.value.data()[k] = io::get_f64(is);
    ck.blocks.push_back(std::move(b));
  }
  return ck;
}

}  // namespace crpaml::nn
