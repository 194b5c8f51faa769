// Copyright 2026 The prefres Authors
// SPDX-License-Identifier: Apache-2.0

// Dense multilayer perceptrons with hand-written reverse mode and Adam.
//
// Samples are stored column-wise: a batch of n inputs is an (input_dim x n)
// matrix. Parameters live in one flat vector, laid out per layer as the
// row-major weight matrix (out x in) followed by the bias vector, so an
// optimizer can treat the whole network as a single array.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "prefres/common.hpp"

namespace prefres::nn {

enum class Head {
  kIdentity,
  /// Output squashed by tanh into (-1, 1).
  kTanh,
  /// Output split into [mean; log_std]; log_std is mapped smoothly into
  /// [kLogStdMin, kLogStdMax].
  kSquashGaussian,
};

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

std::string to_string(Head head);
Head head_from_string(const std::string& name);

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowMajorMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Activations cached by a forward pass, consumed by `Mlp::backward`.
template <typename Scalar>
struct Tape {
  /// Input to each layer; entry 0 is the network input, later entries are
  /// post-ReLU hidden activations.
  std::vector<Matrix<Scalar>> layer_inputs;
  /// Pre-head output of the last layer.
  Matrix<Scalar> raw_output;
  /// Output after the head.
  Matrix<Scalar> output;

  bool empty() const { return layer_inputs.empty(); }
  void clear() {
    layer_inputs.clear();
    raw_output.resize(0, 0);
    output.resize(0, 0);
  }
};

template <typename Scalar>
struct Gradient {
  Vector<Scalar> params;  // same layout as Mlp::params()
  Matrix<Scalar> input;   // adjoint with respect to the network input
};

template <typename Scalar = double>
class Mlp {
 public:
  using MatrixType = Matrix<Scalar>;
  using VectorType = Vector<Scalar>;
  using WeightMap = Eigen::Map<RowMajorMatrix<Scalar>>;
  using ConstWeightMap = Eigen::Map<const RowMajorMatrix<Scalar>>;
  using BiasMap = Eigen::Map<VectorType>;
  using ConstBiasMap = Eigen::Map<const VectorType>;

  Mlp() = default;

  /// Network with every parameter zero.
  Mlp(std::vector<int> widths, Head head) : widths_(std::move(widths)), head_(head) {
    if (widths_.size() < 2) {
      throw Error("mlp: need at least an input and an output width, got " +
                  std::to_string(widths_.size()));
    }
    for (int w : widths_) {
      if (w < 1) {
        throw Error("mlp: layer widths must be positive");
      }
    }
    if (head_ == Head::kSquashGaussian && widths_.back() % 2 != 0) {
      throw Error("mlp: squash-gaussian head needs an even output width");
    }
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      weight_offsets_.push_back(offset);
      offset += static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l];
      bias_offsets_.push_back(offset);
      offset += widths_[l + 1];
    }
    params_ = VectorType::Zero(offset);
  }

  /// Fan-in scaled uniform initialization: every entry of layer l is drawn
  /// from U(-sqrt(1/fan_in), sqrt(1/fan_in)).
  static Mlp init(std::vector<int> widths, Head head, std::uint64_t seed) {
    Mlp net(std::move(widths), head);
    Rng rng(seed);
    for (int l = 0; l < net.num_layers(); ++l) {
      const double bound = std::sqrt(1.0 / net.widths_[l]);
      auto w = net.weight(l);
      for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) {
          w(i, j) = static_cast<Scalar>(rng.uniform(-bound, bound));
        }
      }
      auto b = net.bias(l);
      for (Eigen::Index i = 0; i < b.size(); ++i) {
        b(i) = static_cast<Scalar>(rng.uniform(-bound, bound));
      }
    }
    return net;
  }

  const std::vector<int>& widths() const { return widths_; }
  Head head() const { return head_; }
  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  /// Number of weight matrices (layers minus one).
  int num_layers() const { return static_cast<int>(widths_.size()) - 1; }
  Eigen::Index num_params() const { return params_.size(); }

  VectorType& params() { return params_; }
  const VectorType& params() const { return params_; }

  WeightMap weight(int l) {
    return WeightMap(params_.data() + weight_offsets_[l], widths_[l + 1], widths_[l]);
  }
  ConstWeightMap weight(int l) const {
    return ConstWeightMap(params_.data() + weight_offsets_[l], widths_[l + 1], widths_[l]);
  }
  BiasMap bias(int l) { return BiasMap(params_.data() + bias_offsets_[l], widths_[l + 1]); }
  ConstBiasMap bias(int l) const {
    return ConstBiasMap(params_.data() + bias_offsets_[l], widths_[l + 1]);
  }

  /// Name of the parameter array ("W<l>" or "b<l>") holding a flat index.
  std::string block_name(Eigen::Index flat_index) const {
    for (int l = num_layers() - 1; l >= 0; --l) {
      if (flat_index >= bias_offsets_[l]) {
        return "b" + std::to_string(l);
      }
      if (flat_index >= weight_offsets_[l]) {
        return "W" + std::to_string(l);
      }
    }
    return "params";
  }

  MatrixType forward(const Eigen::Ref<const MatrixType>& input) const {
    check_input(input.rows());
    MatrixType a = input;
    for (int l = 0; l < num_layers(); ++l) {
      MatrixType z = weight(l) * a;
      z.colwise() += bias(l);
      if (l + 1 < num_layers()) {
        a = z.cwiseMax(Scalar(0));
      } else {
        a = std::move(z);
      }
    }
    apply_head(a);
    return a;
  }

  VectorType forward_one(const Eigen::Ref<const VectorType>& input) const {
    return forward(MatrixType(input));
  }

  /// Forward pass that records activations for `backward`.
  MatrixType forward(const Eigen::Ref<const MatrixType>& input, Tape<Scalar>& tape) const {
    check_input(input.rows());
    tape.clear();
    tape.layer_inputs.reserve(num_layers());
    tape.layer_inputs.emplace_back(input);
    for (int l = 0; l < num_layers(); ++l) {
      MatrixType z = weight(l) * tape.layer_inputs.back();
      z.colwise() += bias(l);
      if (l + 1 < num_layers()) {
        tape.layer_inputs.emplace_back(z.cwiseMax(Scalar(0)));
      } else {
        tape.raw_output = std::move(z);
      }
    }
    tape.output = tape.raw_output;
    apply_head(tape.output);
    return tape.output;
  }

  /// Reverse-mode gradients of a scalar loss given dLoss/dOutput for every
  /// sample of the recorded batch.
  Gradient<Scalar> backward(const Tape<Scalar>& tape,
                            const Eigen::Ref<const MatrixType>& output_adjoint) const {
    if (tape.empty()) {
      throw Error("mlp: backward called without a recorded forward pass");
    }
    if (output_adjoint.rows() != output_dim() ||
        output_adjoint.cols() != tape.output.cols()) {
      throw Error("mlp: adjoint shape does not match the recorded output");
    }
    Gradient<Scalar> grad;
    grad.params = VectorType::Zero(params_.size());
    MatrixType g = output_adjoint;
    head_backward(tape, g);
    for (int l = num_layers() - 1; l >= 0; --l) {
      const MatrixType& a = tape.layer_inputs[l];
      WeightMap(grad.params.data() + weight_offsets_[l], widths_[l + 1], widths_[l]).noalias() =
          g * a.transpose();
      BiasMap(grad.params.data() + bias_offsets_[l], widths_[l + 1]) = g.rowwise().sum();
      MatrixType prev = weight(l).transpose() * g;
      if (l > 0) {
        prev = (a.array() > Scalar(0)).select(prev, Scalar(0));
      }
      g = std::move(prev);
    }
    grad.input = std::move(g);
    return grad;
  }

  /// dLoss/dInput only; skips the parameter gradients.
  MatrixType input_gradient(const Tape<Scalar>& tape,
                            const Eigen::Ref<const MatrixType>& output_adjoint) const {
    if (tape.empty()) {
      throw Error("mlp: backward called without a recorded forward pass");
    }
    if (output_adjoint.rows() != output_dim() ||
        output_adjoint.cols() != tape.output.cols()) {
      throw Error("mlp: adjoint shape does not match the recorded output");
    }
    MatrixType g = output_adjoint;
    head_backward(tape, g);
    for (int l = num_layers() - 1; l >= 0; --l) {
      MatrixType prev = weight(l).transpose() * g;
      if (l > 0) {
        prev = (tape.layer_inputs[l].array() > Scalar(0)).select(prev, Scalar(0));
      }
      g = std::move(prev);
    }
    return g;
  }

  bool all_finite() const { return params_.allFinite(); }

 private:
  void check_input(Eigen::Index rows) const {
    if (widths_.empty()) {
      throw Error("mlp: network is not constructed");
    }
    if (rows != input_dim()) {
      throw Error("mlp: input has " + std::to_string(rows) + " rows, network expects " +
                  std::to_string(input_dim()));
    }
  }

  void apply_head(MatrixType& out) const {
    switch (head_) {
      case Head::kIdentity:
        break;
      case Head::kTanh:
        out = out.array().tanh();
        break;
      case Head::kSquashGaussian: {
        const Eigen::Index d = out.rows() / 2;
        auto ls = out.bottomRows(d);
        ls = (Scalar(kLogStdMin) +
              Scalar(0.5 * (kLogStdMax - kLogStdMin)) * (ls.array().tanh() + Scalar(1)))
                 .matrix();
        break;
      }
    }
  }

  void head_backward(const Tape<Scalar>& tape, MatrixType& g) const {
    switch (head_) {
      case Head::kIdentity:
        break;
      case Head::kTanh:
        g.array() *= Scalar(1) - tape.output.array().square();
        break;
      case Head::kSquashGaussian: {
        const Eigen::Index d = g.rows() / 2;
        const auto t = tape.raw_output.bottomRows(d).array().tanh();
        g.bottomRows(d).array() *=
            Scalar(0.5 * (kLogStdMax - kLogStdMin)) * (Scalar(1) - t.square());
        break;
      }
    }
  }

  std::vector<int> widths_;
  Head head_ = Head::kIdentity;
  std::vector<Eigen::Index> weight_offsets_;
  std::vector<Eigen::Index> bias_offsets_;
  VectorType params_;
};

/// Adam moments and hyperparameters for one parameter array.
template <typename Scalar = double>
struct AdamState {
  Vector<Scalar> m;
  Vector<Scalar> v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(Eigen::Index size, double learning_rate)
      : m(Vector<Scalar>::Zero(size)), v(Vector<Scalar>::Zero(size)), lr(learning_rate) {}
};

/// One bias-corrected Adam update. `name_of` maps a flat index to the name
/// of the array holding it, used to report non-finite gradients.
template <typename Scalar, typename NameFn>
void adam_step(Eigen::Ref<Vector<Scalar>> params, const Eigen::Ref<const Vector<Scalar>>& grads,
               AdamState<Scalar>& state, NameFn&& name_of) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw Error("adam: parameter, gradient and moment shapes disagree");
  }
  for (Eigen::Index i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(static_cast<double>(grads[i]))) {
      throw Error("adam: non-finite gradient in " + std::string(name_of(i)));
    }
  }
  ++state.step;
  const Scalar b1 = Scalar(state.beta1);
  const Scalar b2 = Scalar(state.beta2);
  state.m = b1 * state.m + (Scalar(1) - b1) * grads;
  state.v = b2 * state.v + (Scalar(1) - b2) * grads.cwiseProduct(grads);
  const double t = static_cast<double>(state.step);
  const Scalar c1 = Scalar(1.0 - std::pow(state.beta1, t));
  const Scalar c2 = Scalar(1.0 - std::pow(state.beta2, t));
  params.array() -= Scalar(state.lr) * (state.m.array() / c1) /
                    ((state.v.array() / c2).sqrt() + Scalar(state.eps));
}

template <typename Scalar>
void adam_step(Eigen::Ref<Vector<Scalar>> params, const Eigen::Ref<const Vector<Scalar>>& grads,
               AdamState<Scalar>& state) {
  adam_step<Scalar>(params, grads, state, [](Eigen::Index) { return std::string("params"); });
}

template <typename Scalar>
void adam_step(Mlp<Scalar>& net, const Vector<Scalar>& grads, AdamState<Scalar>& state) {
  adam_step<Scalar>(net.params(), grads, state,
                    [&net](Eigen::Index i) { return net.block_name(i); });
}

/// Polyak averaging: target <- tau * source + (1 - tau) * target.
template <typename Scalar>
void soft_update(Mlp<Scalar>& target, const Mlp<Scalar>& source, double tau) {
  if (target.num_params() != source.num_params()) {
    throw Error("soft_update: networks differ in shape");
  }
  target.params() = Scalar(tau) * source.params() + Scalar(1.0 - tau) * target.params();
}

using MlpD = Mlp<double>;
using AdamD = AdamState<double>;

/// Checkpoint document: {version, widths, head, params}.
nlohmann::json to_json(const MlpD& net);
MlpD mlp_from_json(const nlohmann::json& doc);
void save_checkpoint(const MlpD& net, const std::string& path);
MlpD load_checkpoint(const std::string& path);

}  // namespace prefres::nn
