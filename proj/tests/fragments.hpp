#pragma once

// Test-only gradient fragments: each wraps layers with a fixed random
// projection so the objective is a scalar sum(output * R).

#include "crpaml/neuralcore.hpp"

namespace crpaml::testing {

using nn::Matrix;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

/// Dense layer, identity activation.
struct LinearFragment {
  nn::DenseParams p;
  Matrix projection, dw, db;
  bool flip_sign = false;  // corrupts backward on purpose

  LinearFragment(std::size_t in, std::size_t out, std::size_t batch, Rng& rng)
      : p(nn::dense_init(in, out, rng)), projection(random_matrix(batch, out, rng)) {
    p.bias = random_matrix(1, out, rng);
  }
  double loss(const Matrix& x) { return nn::dense_forward(x, p).cwiseProduct(projection).sum(); }
  Matrix backward(const Matrix& x) {
    auto g = nn::dense_backward(x, p, projection);
    dw = flip_sign ? Matrix(-g.dweight) : g.dweight;
    db = flip_sign ? Matrix(-g.dbias) : g.dbias;
    return flip_sign ? Matrix(-g.dx) : g.dx;
  }
  std::vector<nn::ParamView> parameters() { return {{"w", &p.weight, &dw}, {"b", &p.bias, &db}}; }
};

/// Batch normalization in training mode.
struct BatchNormFragment {
  nn::BatchNormState s;
  Matrix projection, dgamma, dbeta;

  BatchNormFragment(std::size_t features, std::size_t batch, Rng& rng)
      : s(nn::BatchNormState::make(features)), projection(random_matrix(batch, features, rng)) {
    s.gamma = random_matrix(1, features, rng).array() + 1.5;
    s.beta = random_matrix(1, features, rng);
  }
  double loss(const Matrix& x) {
    return nn::batchnorm_forward(x, s, nn::Mode::Train).cwiseProduct(projection).sum();
  }
  Matrix backward(const Matrix& x) {
    nn::BatchNormCache cache;
    nn::batchnorm_forward(x, s, nn::Mode::Train, &cache);
    auto g = nn::batchnorm_backward(projection, s, cache);
    dgamma = g.dgamma;
    dbeta = g.dbeta;
    return g.dx;
  }
  std::vector<nn::ParamView> parameters() { return {{"gamma", &s.gamma, &dgamma}, {"beta", &s.beta, &dbeta}}; }
};

/// Dense with a nonlinearity.
struct ActivatedDenseFragment {
  nn::DenseParams p;
  nn::Activation act;
  Matrix projection, dw, db;

  ActivatedDenseFragment(std::size_t in, std::size_t out, std::size_t batch, nn::Activation a, Rng& rng)
      : p(nn::dense_init(in, out, rng)), act(a), projection(random_matrix(batch, out, rng)) {
    p.bias = random_matrix(1, out, rng, 0.5);
  }
  double loss(const Matrix& x) {
    return nn::activate(nn::dense_forward(x, p), act).cwiseProduct(projection).sum();
  }
  Matrix backward(const Matrix& x) {
    const Matrix z = nn::dense_forward(x, p);
    const Matrix y = nn::activate(z, act);
    auto g = nn::dense_backward(x, p, nn::activate_backward(z, y, projection, act));
    dw = g.dweight;
    db = g.dbias;
    return g.dx;
  }
  std::vector<nn::ParamView> parameters() { return {{"w", &p.weight, &dw}, {"b", &p.bias, &db}}; }
};

/// Encoder block: dense(tanh) -> dense(relu) -> batch norm.
struct EncoderBlockFragment {
  nn::DenseParams first, second;
  nn::BatchNormState bn;
  Matrix projection, dw1, db1, dw2, db2, dgamma, dbeta;

  EncoderBlockFragment(std::size_t in, std::size_t width, std::size_t batch, Rng& rng)
      : first(nn::dense_init(in, width, rng)),
        second(nn::dense_init(width, width, rng)),
        bn(nn::BatchNormState::make(width)),
        projection(random_matrix(batch, width, rng)) {
    first.bias = random_matrix(1, width, rng, 0.3);
    second.bias = random_matrix(1, width, rng, 0.3);
  }
  double loss(const Matrix& x) {
    const Matrix h1 = nn::activate(nn::dense_forward(x, first), nn::Activation::Tanh);
    const Matrix h2 = nn::activate(nn::dense_forward(h1, second), nn::Activation::Relu);
    return nn::batchnorm_forward(h2, bn, nn::Mode::Train).cwiseProduct(projection).sum();
  }
  Matrix backward(const Matrix& x) {
    const Matrix z1 = nn::dense_forward(x, first);
    const Matrix h1 = nn::activate(z1, nn::Activation::Tanh);
    const Matrix z2 = nn::dense_forward(h1, second);
    const Matrix h2 = nn::activate(z2, nn::Activation::Relu);
    nn::BatchNormCache cache;
    nn::batchnorm_forward(h2, bn, nn::Mode::Train, &cache);
    auto gb = nn::batchnorm_backward(projection, bn, cache);
    dgamma = gb.dgamma;
    dbeta = gb.dbeta;
    auto g2 = nn::dense_backward(h1, second, nn::activate_backward(z2, h2, gb.dx, nn::Activation::Relu));
    dw2 = g2.dweight;
    db2 = g2.dbias;
    auto g1 = nn::dense_backward(x, first, nn::activate_backward(z1, h1, g2.dx, nn::Activation::Tanh));
    dw1 = g1.dweight;
    db1 = g1.dbias;
    return g1.dx;
  }
  std::vector<nn::ParamView> parameters() {
    return {{"w1", &first.weight, &dw1}, {"b1", &first.bias, &db1}, {"w2", &second.weight, &dw2},
            {"b2", &second.bias, &db2},  {"gamma", &bn.gamma, &dgamma}, {"beta", &bn.beta, &dbeta}};
  }
};

/// Mean focal loss of sigmoid(x W + b) against fixed labels.
struct FocalHeadFragment {
  nn::DenseParams p;
  std::vector<int> labels;
  nn::FocalLossConfig cfg;
  Matrix dw, db;

  FocalHeadFragment(std::size_t in, std::size_t batch, Rng& rng) : p(nn::dense_init(in, 1, rng)) {
    for (std::size_t i = 0; i < batch; ++i) labels.push_back(rng.bernoulli(0.3) ? 1 : 0);
  }
  double loss(const Matrix& x) {
    const Matrix prob = nn::activate(nn::dense_forward(x, p), nn::Activation::Sigmoid);
    double total = 0;
    for (Eigen::Index i = 0; i < prob.rows(); ++i) total += nn::focal_loss(labels[i], prob(i, 0), cfg).loss;
    return total / static_cast<double>(prob.rows());
  }
  Matrix backward(const Matrix& x) {
    const Matrix z = nn::dense_forward(x, p);
    const Matrix prob = nn::activate(z, nn::Activation::Sigmoid);
    Matrix dp(prob.rows(), 1);
    for (Eigen::Index i = 0; i < prob.rows(); ++i)
      dp(i, 0) = nn::focal_loss(labels[i], prob(i, 0), cfg).grad / static_cast<double>(prob.rows());
    auto g = nn::dense_backward(x, p, nn::activate_backward(z, prob, dp, nn::Activation::Sigmoid));
    dw = g.dweight;
    db = g.dbias;
    return g.dx;
  }
  std::vector<nn::ParamView> parameters() { return {{"w", &p.weight, &dw}, {"b", &p.bias, &db}}; }
};

}  // namespace crpaml::testing
