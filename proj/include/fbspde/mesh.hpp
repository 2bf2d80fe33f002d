#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace fbspde {

/// Partition 0 = x_0 < x_1 < ... < x_L < x_{L+1} = 1 of the unit interval.
/// Degrees of freedom live on the L internal nodes only.
class Mesh1D {
 public:
  explicit Mesh1D(std::vector<double> nodes) : nodes_(std::move(nodes)) {
    if (nodes_.size() < 3) {
      throw std::invalid_argument("Mesh1D: need at least one internal node");
    }
    if (nodes_.front() != 0.0 || nodes_.back() != 1.0) {
      throw std::invalid_argument("Mesh1D: endpoints must be exactly 0 and 1");
    }
    for (std::size_t i = 1; i < nodes_.size(); ++i) {
      if (!std::isfinite(nodes_[i]) || !(nodes_[i] > nodes_[i - 1])) {
        throw std::invalid_argument("Mesh1D: nodes must be finite and strictly increasing");
      }
    }
  }

  /// Uniform mesh with `internal` interior nodes, h = 1/(internal+1).
  static Mesh1D uniform(int internal) {
    if (internal < 1) throw std::invalid_argument("Mesh1D::uniform: L must be >= 1");
    std::vector<double> nodes(static_cast<std::size_t>(internal) + 2);
    const double n = internal + 1;
    for (int i = 0; i <= internal + 1; ++i) nodes[i] = i / n;
    nodes.back() = 1.0;
    return Mesh1D(std::move(nodes));
  }

  /// Number of internal nodes L.
  int internal_nodes() const { return static_cast<int>(nodes_.size()) - 2; }
  int elements() const { return static_cast<int>(nodes_.size()) - 1; }

  /// x_i for i in [0, L+1].
  double node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  /// h_j = x_j - x_{j-1}, j in [1, L+1].
  double element_length(int j) const { return nodes_[j] - nodes_[j - 1]; }

  double max_h() const {
    double h = 0.0;
    for (int j = 1; j <= elements(); ++j) h = std::max(h, element_length(j));
    return h;
  }

  const std::vector<double>& nodes() const { return nodes_; }

  /// Element index j in [1, L+1] with x in [x_{j-1}, x_j]. Nodes belong to the
  /// element on their left, except x = 0.
  int locate(double x) const {
    if (!(x >= 0.0 && x <= 1.0)) throw std::out_of_range("Mesh1D::locate: x outside [0,1]");
    if (x == 0.0) return 1;
    auto it = std::lower_bound(nodes_.begin(), nodes_.end(), x);
    return static_cast<int>(it - nodes_.begin());
  }

 private:
  std::vector<double> nodes_;
};

}  // namespace fbspde
