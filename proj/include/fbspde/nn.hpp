#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fbspde/random.hpp"

namespace fbspde {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Fully connected network parameters theta = (W_n, beta_n), n = 1..N, stored
/// in one flat buffer: for each layer the out x in weight block (row-major)
/// followed by its bias.
class MlpParams {
 public:
  MlpParams() = default;

  explicit MlpParams(std::vector<int> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw std::invalid_argument("MlpParams: need at least input and output sizes");
    std::size_t total = 0;
    for (std::size_t n = 0; n + 1 < sizes_.size(); ++n) {
      if (sizes_[n] < 1 || sizes_[n + 1] < 1) throw std::invalid_argument("MlpParams: layer sizes must be >= 1");
      offsets_.push_back(total);
      total += static_cast<std::size_t>(sizes_[n] + 1) * sizes_[n + 1];
    }
    data_.assign(total, 0.0);
  }

  const std::vector<int>& sizes() const { return sizes_; }
  int layers() const { return static_cast<int>(sizes_.size()) - 1; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  Eigen::Map<RowMatrix> weight(int n) {
    return {data_.data() + offsets_[n], sizes_[n + 1], sizes_[n]};
  }
  Eigen::Map<const RowMatrix> weight(int n) const {
    return {data_.data() + offsets_[n], sizes_[n + 1], sizes_[n]};
  }
  Eigen::Map<Eigen::VectorXd> bias(int n) {
    return {data_.data() + offsets_[n] + static_cast<std::size_t>(sizes_[n]) * sizes_[n + 1], sizes_[n + 1]};
  }
  Eigen::Map<const Eigen::VectorXd> bias(int n) const {
    return {data_.data() + offsets_[n] + static_cast<std::size_t>(sizes_[n]) * sizes_[n + 1], sizes_[n + 1]};
  }

  void set_zero() { std::fill(data_.begin(), data_.end(), 0.0); }

  bool operator==(const MlpParams& o) const {
    return sizes_ == o.sizes_ && std::equal(data_.begin(), data_.end(), o.data_.begin(), o.data_.end());
  }

 private:
  std::vector<int> sizes_;
  std::vector<std::size_t> offsets_;
  // Aligned storage keeps vectorized reductions independent of the heap address.
  std::vector<double, Eigen::aligned_allocator<double>> data_;
};

/// Activations cached by a forward pass; activations[0] is the input and
/// activations[N] the network output.
struct Tape {
  std::vector<RowMatrix> activations;
  bool consumed = false;
};

/// Hidden layers use tanh, the output layer is affine.
inline RowMatrix mlp_forward(const MlpParams& p, const RowMatrix& x, Tape* tape = nullptr) {
  if (x.cols() != p.input_dim()) throw std::invalid_argument("mlp_forward: input width does not match network");
  const int N = p.layers();
  if (tape) {
    tape->activations.resize(static_cast<std::size_t>(N) + 1);
    tape->activations[0] = x;
    tape->consumed = false;
  }
  RowMatrix a = x;
  for (int n = 0; n < N; ++n) {
    RowMatrix next = a * p.weight(n).transpose();
    next.rowwise() += p.bias(n).transpose();
    if (n + 1 < N) next = next.array().tanh().matrix();
    a = std::move(next);
    if (tape) tape->activations[static_cast<std::size_t>(n) + 1] = a;
  }
  return a;
}

inline std::pair<RowMatrix, Tape> mlp_forward_taped(const MlpParams& p, const RowMatrix& x) {
  Tape tape;
  RowMatrix out = mlp_forward(p, x, &tape);
  return {std::move(out), std::move(tape)};
}

/// Reverse pass for the scalar sum_b <out_grad[b], out[b]>. Parameter
/// gradients are added into `grads`; input gradients are written to
/// `input_grad` when given. Consumes the tape.
inline void mlp_backward(const MlpParams& p, Tape& tape, const RowMatrix& out_grad, MlpParams& grads,
                         RowMatrix* input_grad = nullptr) {
  const int N = p.layers();
  if (tape.consumed) throw std::logic_error("mlp_backward: tape already consumed");
  if (static_cast<int>(tape.activations.size()) != N + 1) throw std::logic_error("mlp_backward: tape does not match network");
  if (out_grad.cols() != p.output_dim() || out_grad.rows() != tape.activations[0].rows()) {
    throw std::invalid_argument("mlp_backward: out_grad shape mismatch");
  }
  if (grads.sizes() != p.sizes()) throw std::invalid_argument("mlp_backward: gradient buffer shape mismatch");
  tape.consumed = true;
  RowMatrix delta = out_grad;
  for (int n = N - 1; n >= 0; --n) {
    const RowMatrix& a_in = tape.activations[static_cast<std::size_t>(n)];
    grads.weight(n).noalias() += delta.transpose() * a_in;
    grads.bias(n) += delta.colwise().sum().transpose();
    if (n > 0) {
      RowMatrix back = delta * p.weight(n);
      delta = (back.array() * (1.0 - a_in.array().square())).matrix();
    } else if (input_grad) {
      *input_grad = delta * p.weight(0);
    }
  }
}

struct MlpGradients {
  MlpParams params;
  RowMatrix input;
};

inline MlpGradients mlp_backward(const MlpParams& p, Tape& tape, const RowMatrix& out_grad) {
  MlpGradients g{MlpParams(p.sizes()), RowMatrix()};
  mlp_backward(p, tape, out_grad, g.params, &g.input);
  return g;
}

/// Xavier-uniform weights on [-a, a], a = sqrt(6/(fan_in+fan_out)); zero biases.
inline MlpParams init_params(std::uint64_t seed, const std::vector<int>& sizes) {
  MlpParams p(sizes);
  SplitMix64 rng(seed);
  for (int n = 0; n < p.layers(); ++n) {
    const double a = std::sqrt(6.0 / (sizes[n] + sizes[n + 1]));
    auto w = p.weight(n);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-a, a);
    }
  }
  return p;
}

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamHyper hyper;
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;

  AdamState() = default;
  AdamState(std::size_t n, AdamHyper h) : hyper(h), m(n, 0.0), v(n, 0.0) {}
};

/// Bias-corrected Adam update of `params` in place. `lr` overrides the
/// state's learning rate when positive (schedules).
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, double lr = -1.0) {
  if (params.size() != grads.size() || params.size() != s.m.size()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  ++s.step;
  const AdamHyper& h = s.hyper;
  const double rate = lr > 0.0 ? lr : h.lr;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    s.m[i] = h.beta1 * s.m[i] + (1.0 - h.beta1) * g;
    s.v[i] = h.beta2 * s.v[i] + (1.0 - h.beta2) * g * g;
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    params[i] -= rate * mhat / (std::sqrt(vhat) + h.eps);
  }
}

// Checkpoint format, version 1 (plain text):
//   fbspde-mlp 1
//   sizes <N+1> d_0 d_1 ... d_N
//   <one parameter per line, %.17g, in MlpParams buffer order>
inline void save_checkpoint(const std::string& path, const MlpParams& p) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << "fbspde-mlp 1\nsizes " << p.sizes().size();
  for (int s : p.sizes()) out << ' ' << s;
  out << '\n' << std::setprecision(17);
  for (double v : p.data()) out << v << '\n';
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline MlpParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string magic, key;
  int version = 0;
  std::size_t count = 0;
  in >> magic >> version >> key >> count;
  if (magic != "fbspde-mlp" || version != 1 || key != "sizes" || count < 2) {
    throw std::runtime_error("load_checkpoint: unrecognized header in " + path);
  }
  std::vector<int> sizes(count);
  for (auto& s : sizes) in >> s;
  MlpParams p(sizes);
  for (double& v : p.data()) {
    if (!(in >> v)) throw std::runtime_error("load_checkpoint: truncated parameter list in " + path);
  }
  return p;
}

}  // namespace fbspde
