#pragma once

// Dense reverse-mode differentiation over Eigen matrices.
//
// A BasicTape records every operation of one forward pass. Each recorded
// node owns its value and, once backward() runs, its gradient. Parameters
// live outside the tape; their gradients are only touched by
// accumulate_parameter_gradients(), so several tapes can run on separate
// threads against the same read-only parameters.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace glf {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename Derived>
std::string shape_string(const Eigen::DenseBase<Derived>& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

template <typename A, typename B>
void require_same_shape(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

template <typename Scalar>
struct BasicParameter {
  std::string name;
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;
  bool trainable = true;
  bool decay = true;

  BasicParameter(std::string n, MatrixX<Scalar> v, bool decayed = true)
      : name(std::move(n)), value(std::move(v)), grad(MatrixX<Scalar>::Zero(value.rows(), value.cols())), decay(decayed) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class BasicTape;

/// Handle to a node on a tape. Cheap to copy; valid as long as the tape.
template <typename Scalar>
class BasicVar {
 public:
  BasicVar() = default;
  BasicVar(BasicTape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const MatrixX<Scalar>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  BasicTape<Scalar>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  BasicTape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class BasicTape {
 public:
  using Mat = MatrixX<Scalar>;
  using Var = BasicVar<Scalar>;
  using Parameter = BasicParameter<Scalar>;
  // Receives the tape and the gradient of the node being processed.
  using Backward = std::function<void(BasicTape&, const Mat&)>;

  BasicTape() = default;
  /// A tape built with record_gradients = false treats parameters as
  /// constants and records no backward closures.
  explicit BasicTape(bool record_gradients) : record_gradients_(record_gradients) {}
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Var constant(Mat value) {
    nodes_.push_back(Node{std::move(value), nullptr, Mat(), {}, nullptr, false});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Leaf referencing a parameter's value without copying it.
  Var parameter(Parameter& p) {
    nodes_.push_back(Node{Mat(), &p.value, Mat(), {}, &p, p.trainable && record_gradients_});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var record(Mat value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), nullptr, Mat(), requires_grad ? std::move(backward) : Backward{}, nullptr,
                          requires_grad});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat& value(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  bool requires_grad(const Var& v) const { return requires_grad(v.id()); }

  /// Gradient of a node after backward(); zero-sized if nothing reached it.
  const Mat& grad(const Var& v) const { return nodes_[static_cast<size_t>(v.id())].grad; }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Reverse sweep from a 1x1 loss. A tape can be swept once.
  void backward(const Var& loss) {
    if (consumed_) throw AutodiffError("backward: computation graph already consumed");
    const Mat& lv = value(loss.id());
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw DimensionError("backward: loss must be scalar, got " + shape_string(lv));
    }
    consumed_ = true;
    if (!requires_grad(loss.id())) return;
    nodes_[static_cast<size_t>(loss.id())].grad = Mat::Ones(1, 1);
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Adds leaf gradients into the referenced Parameter::grad.
  void accumulate_parameter_gradients(Scalar weight = Scalar(1)) const {
    for (const Node& n : nodes_) {
      if (n.param && n.grad.size() != 0) n.param->grad += weight * n.grad;
    }
  }

  bool consumed() const { return consumed_; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* external;
    Mat grad;
    Backward backward;
    Parameter* param;
    bool requires_grad;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool record_gradients_ = true;
};

using Tape = BasicTape<double>;
using Var = BasicVar<double>;
using Parameter = BasicParameter<double>;

// ---------------------------------------------------------------------------
// Plain kernels (no tape). Shared by the recorded ops and usable directly.

/// Row softmax restricted to permitted entries. Masked entries are exactly 0;
/// a row with no permitted entry is all zeros.
template <typename Derived>
MatrixX<typename Derived::Scalar> masked_softmax_rows(const Eigen::MatrixBase<Derived>& scores, const BoolMatrix& mask) {
  using Scalar = typename Derived::Scalar;
  require_same_shape(scores, mask, "masked_softmax_rows");
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Scalar top = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (mask(i, j) && scores(i, j) > top) top = scores(i, j);
    }
    if (top == -std::numeric_limits<Scalar>::infinity()) continue;
    Scalar total = 0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (mask(i, j)) {
        out(i, j) = std::exp(scores(i, j) - top);
        total += out(i, j);
      }
    }
    out.row(i) /= total;
  }
  return out;
}

template <typename Scalar>
Scalar gelu_value(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(c * (x + Scalar(0.044715) * x * x * x)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  const Scalar inner = c * (x + Scalar(0.044715) * x * x * x);
  const Scalar th = std::tanh(inner);
  const Scalar dinner = c * (Scalar(1) + Scalar(3) * Scalar(0.044715) * x * x);
  return Scalar(0.5) * (Scalar(1) + th) + Scalar(0.5) * x * (Scalar(1) - th * th) * dinner;
}

// ---------------------------------------------------------------------------
// Recorded operations.

namespace detail {
template <typename Scalar>
bool any_requires_grad(std::initializer_list<BasicVar<Scalar>> vars) {
  for (const auto& v : vars) {
    if (v.tape().requires_grad(v)) return true;
  }
  return false;
}
}  // namespace detail

template <typename Scalar>
BasicVar<Scalar> matmul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.value()) + " x " +
                         shape_string(b.value()));
  }
  auto& tape = a.tape();
  const int ia = a.id(), ib = b.id();
  MatrixX<Scalar> out = a.value() * b.value();
  return tape.record(std::move(out), detail::any_requires_grad({a, b}), [ia, ib](BasicTape<Scalar>& t, const auto& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T
template <typename Scalar>
BasicVar<Scalar> matmul_transposed(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: inner dimensions disagree " + shape_string(a.value()) + " x " +
                         shape_string(b.value()) + "^T");
  }
  auto& tape = a.tape();
  const int ia = a.id(), ib = b.id();
  MatrixX<Scalar> out = a.value() * b.value().transpose();
  return tape.record(std::move(out), detail::any_requires_grad({a, b}), [ia, ib](BasicTape<Scalar>& t, const auto& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

template <typename Scalar>
BasicVar<Scalar> add(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  require_same_shape(a.value(), b.value(), "add");
  const int ia = a.id(), ib = b.id();
  MatrixX<Scalar> out = a.value() + b.value();
  return a.tape().record(std::move(out), detail::any_requires_grad({a, b}),
                         [ia, ib](BasicTape<Scalar>& t, const auto& g) {
                           t.accumulate(ia, g);
                           t.accumulate(ib, g);
                         });
}

/// Adds a 1 x cols row to every row of a.
template <typename Scalar>
BasicVar<Scalar> add_row(const BasicVar<Scalar>& a, const BasicVar<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: " + shape_string(a.value()) + " + " + shape_string(row.value()));
  }
  const int ia = a.id(), ib = row.id();
  MatrixX<Scalar> out = a.value().rowwise() + row.value().row(0);
  return a.tape().record(std::move(out), detail::any_requires_grad({a, row}),
                         [ia, ib](BasicTape<Scalar>& t, const auto& g) {
                           t.accumulate(ia, g);
                           if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                         });
}

template <typename Scalar>
BasicVar<Scalar> scale(const BasicVar<Scalar>& a, Scalar s) {
  const int ia = a.id();
  MatrixX<Scalar> out = a.value() * s;
  return a.tape().record(std::move(out), a.tape().requires_grad(a),
                         [ia, s](BasicTape<Scalar>& t, const auto& g) { t.accumulate(ia, g * s); });
}

template <typename Scalar>
BasicVar<Scalar> hadamard(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  const int ia = a.id(), ib = b.id();
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), detail::any_requires_grad({a, b}),
                         [ia, ib](BasicTape<Scalar>& t, const auto& g) {
                           if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                           if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                         });
}

/// Multiplies row r of a by the scalar factors(r, 0).
template <typename Scalar>
BasicVar<Scalar> scale_rows(const BasicVar<Scalar>& a, const BasicVar<Scalar>& factors) {
  if (factors.cols() != 1 || factors.rows() != a.rows()) {
    throw DimensionError("scale_rows: " + shape_string(a.value()) + " by " + shape_string(factors.value()));
  }
  const int ia = a.id(), ifac = factors.id();
  MatrixX<Scalar> out = a.value().array().colwise() * factors.value().col(0).array();
  return a.tape().record(std::move(out), detail::any_requires_grad({a, factors}),
                         [ia, ifac](BasicTape<Scalar>& t, const auto& g) {
                           if (t.requires_grad(ia)) {
                             MatrixX<Scalar> ga = g.array().colwise() * t.value(ifac).col(0).array();
                             t.accumulate(ia, ga);
                           }
                           if (t.requires_grad(ifac)) {
                             t.accumulate(ifac, g.cwiseProduct(t.value(ia)).rowwise().sum());
                           }
                         });
}

template <typename Scalar>
BasicVar<Scalar> tanh(const BasicVar<Scalar>& a) {
  const int ia = a.id();
  MatrixX<Scalar> out = a.value().array().tanh().matrix();
  auto& tape = a.tape();
  const int self = static_cast<int>(tape.size());
  return tape.record(std::move(out), tape.requires_grad(a), [ia, self](BasicTape<Scalar>& t, const auto& g) {
    const auto& y = t.value(self);
    t.accumulate(ia, (g.array() * (Scalar(1) - y.array().square())).matrix());
  });
}

template <typename Scalar>
BasicVar<Scalar> gelu(const BasicVar<Scalar>& a) {
  const int ia = a.id();
  MatrixX<Scalar> out = a.value().unaryExpr([](Scalar x) { return gelu_value(x); });
  return a.tape().record(std::move(out), a.tape().requires_grad(a), [ia](BasicTape<Scalar>& t, const auto& g) {
    MatrixX<Scalar> d = t.value(ia).unaryExpr([](Scalar x) { return gelu_derivative(x); });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

template <typename Scalar>
BasicVar<Scalar> masked_softmax_rows(const BasicVar<Scalar>& scores, const BoolMatrix& mask) {
  const int is = scores.id();
  MatrixX<Scalar> out = masked_softmax_rows(scores.value(), mask);
  auto& tape = scores.tape();
  const int self = static_cast<int>(tape.size());
  return tape.record(std::move(out), tape.requires_grad(scores), [is, self](BasicTape<Scalar>& t, const auto& g) {
    const auto& p = t.value(self);
    // dS = P . (dP - rowsum(dP . P)); masked entries have P = 0.
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = g.cwiseProduct(p).rowwise().sum();
    MatrixX<Scalar> ds = p.cwiseProduct(g - dots.replicate(1, g.cols()));
    t.accumulate(is, ds);
  });
}

/// Row-wise layer normalization with learned gain and bias rows.
template <typename Scalar>
BasicVar<Scalar> layer_norm(const BasicVar<Scalar>& x, const BasicVar<Scalar>& gain, const BasicVar<Scalar>& bias,
                            Scalar eps = Scalar(1e-5)) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("layer_norm: " + shape_string(x.value()) + " with gain " + shape_string(gain.value()));
  }
  const Eigen::Index rows = x.rows(), cols = x.cols();
  MatrixX<Scalar> normed(rows, cols);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(rows);
  const auto& xv = x.value();
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Scalar mu = xv.row(i).mean();
    const Scalar var = (xv.row(i).array() - mu).square().mean();
    inv_std(i) = Scalar(1) / std::sqrt(var + eps);
    normed.row(i) = (xv.row(i).array() - mu) * inv_std(i);
  }
  MatrixX<Scalar> out = (normed.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), detail::any_requires_grad({x, gain, bias}),
      [ix, ig, ib, normed = std::move(normed), inv_std = std::move(inv_std)](BasicTape<Scalar>& t, const auto& g) {
        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(normed).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (t.requires_grad(ix)) {
          MatrixX<Scalar> dn = g.array().rowwise() * t.value(ig).row(0).array();
          MatrixX<Scalar> dx(dn.rows(), dn.cols());
          for (Eigen::Index i = 0; i < dn.rows(); ++i) {
            const Scalar m1 = dn.row(i).mean();
            const Scalar m2 = dn.row(i).cwiseProduct(normed.row(i)).mean();
            dx.row(i) = inv_std(i) * (dn.row(i).array() - m1 - normed.row(i).array() * m2);
          }
          t.accumulate(ix, dx);
        }
      });
}

/// Concatenation along the last axis.
template <typename Scalar>
BasicVar<Scalar> concat_cols(const std::vector<BasicVar<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().value()) + " vs " +
                           shape_string(p.value()));
    }
    cols += p.cols();
    needs = needs || p.tape().requires_grad(p);
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  MatrixX<Scalar> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape().record(std::move(out), needs, [ids, widths](BasicTape<Scalar>& t, const auto& g) {
    Eigen::Index off = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) t.accumulate(ids[k], g.middleCols(off, widths[k]));
      off += widths[k];
    }
  });
}

template <typename Scalar>
BasicVar<Scalar> slice_cols(const BasicVar<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of " + shape_string(a.value()));
  }
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  MatrixX<Scalar> out = a.value().middleCols(start, count);
  return a.tape().record(std::move(out), a.tape().requires_grad(a),
                         [ia, start, count, rows, cols](BasicTape<Scalar>& t, const auto& g) {
                           MatrixX<Scalar> full = MatrixX<Scalar>::Zero(rows, cols);
                           full.middleCols(start, count) = g;
                           t.accumulate(ia, full);
                         });
}

/// out.row(k) = a.row(index[k]); repeated indices are allowed.
template <typename Scalar>
BasicVar<Scalar> gather_rows(const BasicVar<Scalar>& a, std::vector<int> index) {
  const Eigen::Index rows = a.rows(), cols = a.cols();
  MatrixX<Scalar> out(static_cast<Eigen::Index>(index.size()), cols);
  for (size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || index[k] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(index[k]) + " out of " + shape_string(a.value()));
    }
    out.row(static_cast<Eigen::Index>(k)) = a.value().row(index[k]);
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), a.tape().requires_grad(a),
                         [ia, rows, cols, index = std::move(index)](BasicTape<Scalar>& t, const auto& g) {
                           MatrixX<Scalar> full = MatrixX<Scalar>::Zero(rows, cols);
                           for (size_t k = 0; k < index.size(); ++k) full.row(index[k]) += g.row(static_cast<Eigen::Index>(k));
                           t.accumulate(ia, full);
                         });
}

/// Places row k of a at row index[k] of a zero matrix with total_rows rows.
/// Indices must be distinct.
template <typename Scalar>
BasicVar<Scalar> scatter_rows(const BasicVar<Scalar>& a, std::vector<int> index, Eigen::Index total_rows) {
  if (static_cast<Eigen::Index>(index.size()) != a.rows()) {
    throw DimensionError("scatter_rows: " + std::to_string(index.size()) + " indices for " + shape_string(a.value()));
  }
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(total_rows, a.cols());
  for (size_t k = 0; k < index.size(); ++k) {
    if (index[k] < 0 || index[k] >= total_rows) {
      throw DimensionError("scatter_rows: index " + std::to_string(index[k]) + " out of " + std::to_string(total_rows));
    }
    out.row(index[k]) = a.value().row(static_cast<Eigen::Index>(k));
  }
  const int ia = a.id();
  return a.tape().record(std::move(out), a.tape().requires_grad(a),
                         [ia, index = std::move(index)](BasicTape<Scalar>& t, const auto& g) {
                           MatrixX<Scalar> part(static_cast<Eigen::Index>(index.size()), g.cols());
                           for (size_t k = 0; k < index.size(); ++k) part.row(static_cast<Eigen::Index>(k)) = g.row(index[k]);
                           t.accumulate(ia, part);
                         });
}

// Segment reductions: output row s reduces the rows of `a` listed in
// segments[s]. An empty segment yields a zero row for every reduction.

using Segments = std::vector<std::vector<int>>;

namespace detail {
template <typename Derived>
void check_segments(const Eigen::DenseBase<Derived>& a, const Segments& segments, const char* op) {
  for (const auto& seg : segments) {
    for (int r : seg) {
      if (r < 0 || r >= a.rows()) {
        throw DimensionError(std::string(op) + ": row " + std::to_string(r) + " out of " + shape_string(a));
      }
    }
  }
}
}  // namespace detail

template <typename Scalar>
BasicVar<Scalar> segment_mean(const BasicVar<Scalar>& a, const Segments& segments) {
  detail::check_segments(a.value(), segments, "segment_mean");
  const auto& av = a.value();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(static_cast<Eigen::Index>(segments.size()), av.cols());
  for (size_t s = 0; s < segments.size(); ++s) {
    if (segments[s].empty()) continue;
    for (int r : segments[s]) out.row(static_cast<Eigen::Index>(s)) += av.row(r);
    out.row(static_cast<Eigen::Index>(s)) /= static_cast<Scalar>(segments[s].size());
  }
  const int ia = a.id();
  const Eigen::Index rows = av.rows();
  return a.tape().record(std::move(out), a.tape().requires_grad(a),
                         [ia, rows, segments](BasicTape<Scalar>& t, const auto& g) {
                           MatrixX<Scalar> full = MatrixX<Scalar>::Zero(rows, g.cols());
                           for (size_t s = 0; s < segments.size(); ++s) {
                             if (segments[s].empty()) continue;
                             const Scalar w = Scalar(1) / static_cast<Scalar>(segments[s].size());
                             for (int r : segments[s]) full.row(r) += w * g.row(static_cast<Eigen::Index>(s));
                           }
                           t.accumulate(ia, full);
                         });
}

template <typename Scalar>
BasicVar<Scalar> segment_max(const BasicVar<Scalar>& a, const Segments& segments) {
  detail::check_segments(a.value(), segments, "segment_max");
  const auto& av = a.value();
  const Eigen::Index cols = av.cols();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(static_cast<Eigen::Index>(segments.size()), cols);
  // Winning source row per (segment, column); first occurrence wins ties.
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> arg =
      Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(
          static_cast<Eigen::Index>(segments.size()), cols, -1);
  for (size_t s = 0; s < segments.size(); ++s) {
    const auto si = static_cast<Eigen::Index>(s);
    if (segments[s].empty()) continue;
    for (Eigen::Index c = 0; c < cols; ++c) {
      int best = segments[s].front();
      for (int r : segments[s]) {
        if (av(r, c) > av(best, c)) best = r;
      }
      out(si, c) = av(best, c);
      arg(si, c) = best;
    }
  }
  const int ia = a.id();
  const Eigen::Index rows = av.rows();
  return a.tape().record(std::move(out), a.tape().requires_grad(a),
                         [ia, rows, arg = std::move(arg)](BasicTape<Scalar>& t, const auto& g) {
                           MatrixX<Scalar> full = MatrixX<Scalar>::Zero(rows, g.cols());
                           for (Eigen::Index s = 0; s < arg.rows(); ++s) {
                             for (Eigen::Index c = 0; c < arg.cols(); ++c) {
                               if (arg(s, c) >= 0) full(arg(s, c), c) += g(s, c);
                             }
                           }
                           t.accumulate(ia, full);
                         });
}

/// Population standard deviation, shifted so zero variance maps to exactly 0:
/// sqrt(var + eps) - sqrt(eps). The shift keeps the gradient finite at var = 0.
template <typename Scalar>
BasicVar<Scalar> segment_std(const BasicVar<Scalar>& a, const Segments& segments, Scalar eps = Scalar(1e-9)) {
  detail::check_segments(a.value(), segments, "segment_std");
  const auto& av = a.value();
  const Eigen::Index cols = av.cols();
  const auto nseg = static_cast<Eigen::Index>(segments.size());
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(nseg, cols);
  MatrixX<Scalar> means = MatrixX<Scalar>::Zero(nseg, cols);
  MatrixX<Scalar> roots = MatrixX<Scalar>::Ones(nseg, cols);
  const Scalar root_eps = std::sqrt(eps);
  for (size_t s = 0; s < segments.size(); ++s) {
    const auto si = static_cast<Eigen::Index>(s);
    if (segments[s].empty()) continue;
    const Scalar k = static_cast<Scalar>(segments[s].size());
    for (int r : segments[s]) means.row(si) += av.row(r);
    means.row(si) /= k;
    RowVectorX<Scalar> var = RowVectorX<Scalar>::Zero(cols);
    for (int r : segments[s]) var += (av.row(r) - means.row(si)).array().square().matrix();
    var /= k;
    roots.row(si) = (var.array() + eps).sqrt().matrix();
    out.row(si) = (roots.row(si).array() - root_eps).matrix();
  }
  const int ia = a.id();
  const Eigen::Index rows = av.rows();
  return a.tape().record(
      std::move(out), a.tape().requires_grad(a),
      [ia, rows, segments, means = std::move(means), roots = std::move(roots)](BasicTape<Scalar>& t, const auto& g) {
        const auto& x = t.value(ia);
        MatrixX<Scalar> full = MatrixX<Scalar>::Zero(rows, g.cols());
        for (size_t s = 0; s < segments.size(); ++s) {
          const auto si = static_cast<Eigen::Index>(s);
          if (segments[s].empty()) continue;
          const Scalar k = static_cast<Scalar>(segments[s].size());
          // d std / d x_r = (x_r - mean) / (k * sqrt(var + eps))
          RowVectorX<Scalar> coef = (g.row(si).array() / (k * roots.row(si).array())).matrix();
          for (int r : segments[s]) full.row(r) += ((x.row(r) - means.row(si)).array() * coef.array()).matrix();
        }
        t.accumulate(ia, full);
      });
}

template <typename Scalar>
BasicVar<Scalar> sum(const BasicVar<Scalar>& a) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape().record(std::move(out), a.tape().requires_grad(a), [ia, rows, cols](BasicTape<Scalar>& t, const auto& g) {
    t.accumulate(ia, MatrixX<Scalar>::Constant(rows, cols, g(0, 0)));
  });
}

/// Sum over listed rows of -log softmax(logits.row(r))[target]. Rows with
/// target < 0 are skipped.
template <typename Scalar>
BasicVar<Scalar> cross_entropy_rows(const BasicVar<Scalar>& logits, const std::vector<int>& targets) {
  const auto& lv = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != lv.rows()) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " + shape_string(lv));
  }
  MatrixX<Scalar> probs = MatrixX<Scalar>::Zero(lv.rows(), lv.cols());
  Scalar loss = 0;
  for (Eigen::Index i = 0; i < lv.rows(); ++i) {
    const int tgt = targets[static_cast<size_t>(i)];
    if (tgt < 0) continue;
    if (tgt >= lv.cols()) throw DimensionError("cross_entropy_rows: target " + std::to_string(tgt) + " out of range");
    const Scalar top = lv.row(i).maxCoeff();
    probs.row(i) = (lv.row(i).array() - top).exp().matrix();
    const Scalar total = probs.row(i).sum();
    probs.row(i) /= total;
    loss += -(lv(i, tgt) - top - std::log(total));
  }
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = loss;
  const int il = logits.id();
  return logits.tape().record(std::move(out), logits.tape().requires_grad(logits),
                              [il, targets, probs = std::move(probs)](BasicTape<Scalar>& t, const auto& g) {
                                MatrixX<Scalar> d = probs;
                                for (size_t i = 0; i < targets.size(); ++i) {
                                  if (targets[i] >= 0) d(static_cast<Eigen::Index>(i), targets[i]) -= Scalar(1);
                                }
                                t.accumulate(il, d * g(0, 0));
                              });
}

/// Sum of squared differences against a constant target.
template <typename Scalar>
BasicVar<Scalar> squared_error(const BasicVar<Scalar>& a, const MatrixX<Scalar>& target) {
  require_same_shape(a.value(), target, "squared_error");
  MatrixX<Scalar> diff = a.value() - target;
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = diff.squaredNorm();
  const int ia = a.id();
  return a.tape().record(std::move(out), a.tape().requires_grad(a),
                         [ia, diff = std::move(diff)](BasicTape<Scalar>& t, const auto& g) {
                           t.accumulate(ia, diff * (Scalar(2) * g(0, 0)));
                         });
}

/// One attention query over a contiguous block of key/value rows.
struct SegmentQuery {
  int query_row = 0;
  int key_begin = 0;
  int key_count = 0;
};

/// Grouped attention: output row p is softmax_j(scale * q_p . k_j) v_j over
/// the key rows of queries[p] that are not excluded by key_valid. A query with
/// no valid key yields a zero row. When `evaluations` is non-null it is
/// incremented once per score computed.
template <typename Scalar>
BasicVar<Scalar> attend_segments(const BasicVar<Scalar>& queries_in, const BasicVar<Scalar>& keys,
                                 const BasicVar<Scalar>& values, const std::vector<SegmentQuery>& queries,
                                 const std::vector<char>& key_valid, Scalar scale, std::uint64_t* evaluations = nullptr) {
  const auto& q = queries_in.value();
  const auto& k = keys.value();
  const auto& v = values.value();
  if (q.cols() != k.cols() || k.rows() != v.rows() || static_cast<Eigen::Index>(key_valid.size()) != k.rows()) {
    throw DimensionError("attend_segments: queries " + shape_string(q) + ", keys " + shape_string(k) + ", values " +
                         shape_string(v));
  }
  const auto np = static_cast<Eigen::Index>(queries.size());
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(np, v.cols());
  std::vector<std::vector<Scalar>> weights(queries.size());
  for (size_t p = 0; p < queries.size(); ++p) {
    const SegmentQuery& sq = queries[p];
    if (sq.query_row < 0 || sq.query_row >= q.rows() || sq.key_begin < 0 || sq.key_count < 0 ||
        sq.key_begin + sq.key_count > k.rows()) {
      throw DimensionError("attend_segments: query " + std::to_string(p) + " out of range");
    }
    auto& w = weights[p];
    w.assign(static_cast<size_t>(sq.key_count), Scalar(0));
    Scalar top = -std::numeric_limits<Scalar>::infinity();
    for (int j = 0; j < sq.key_count; ++j) {
      const int r = sq.key_begin + j;
      if (!key_valid[static_cast<size_t>(r)]) continue;
      w[static_cast<size_t>(j)] = scale * q.row(sq.query_row).dot(k.row(r));
      if (evaluations) ++*evaluations;
      top = std::max(top, w[static_cast<size_t>(j)]);
    }
    if (top == -std::numeric_limits<Scalar>::infinity()) {
      w.clear();
      continue;
    }
    Scalar total = 0;
    for (int j = 0; j < sq.key_count; ++j) {
      const int r = sq.key_begin + j;
      if (!key_valid[static_cast<size_t>(r)]) continue;
      w[static_cast<size_t>(j)] = std::exp(w[static_cast<size_t>(j)] - top);
      total += w[static_cast<size_t>(j)];
    }
    for (int j = 0; j < sq.key_count; ++j) {
      const int r = sq.key_begin + j;
      if (!key_valid[static_cast<size_t>(r)]) continue;
      w[static_cast<size_t>(j)] /= total;
      out.row(static_cast<Eigen::Index>(p)) += w[static_cast<size_t>(j)] * v.row(r);
    }
  }
  const int iq = queries_in.id(), ik = keys.id(), iv = values.id();
  return queries_in.tape().record(
      std::move(out), detail::any_requires_grad({queries_in, keys, values}),
      [iq, ik, iv, queries, key_valid, scale, weights = std::move(weights)](BasicTape<Scalar>& t, const auto& g) {
        const auto& qv = t.value(iq);
        const auto& kv = t.value(ik);
        const auto& vv = t.value(iv);
        MatrixX<Scalar> dq = MatrixX<Scalar>::Zero(qv.rows(), qv.cols());
        MatrixX<Scalar> dk = MatrixX<Scalar>::Zero(kv.rows(), kv.cols());
        MatrixX<Scalar> dv = MatrixX<Scalar>::Zero(vv.rows(), vv.cols());
        for (size_t p = 0; p < queries.size(); ++p) {
          const auto& w = weights[p];
          if (w.empty()) continue;
          const SegmentQuery& sq = queries[p];
          const auto gp = g.row(static_cast<Eigen::Index>(p));
          // dw_j = g . v_j ; ds_j = w_j (dw_j - sum_l w_l dw_l)
          Scalar expect = 0;
          std::vector<Scalar> dw(w.size(), Scalar(0));
          for (int j = 0; j < sq.key_count; ++j) {
            const int r = sq.key_begin + j;
            if (!key_valid[static_cast<size_t>(r)]) continue;
            dw[static_cast<size_t>(j)] = gp.dot(vv.row(r));
            expect += w[static_cast<size_t>(j)] * dw[static_cast<size_t>(j)];
            dv.row(r) += w[static_cast<size_t>(j)] * gp;
          }
          for (int j = 0; j < sq.key_count; ++j) {
            const int r = sq.key_begin + j;
            if (!key_valid[static_cast<size_t>(r)]) continue;
            const Scalar ds = scale * w[static_cast<size_t>(j)] * (dw[static_cast<size_t>(j)] - expect);
            dq.row(sq.query_row) += ds * kv.row(r);
            dk.row(r) += ds * qv.row(sq.query_row);
          }
        }
        if (t.requires_grad(iq)) t.accumulate(iq, dq);
        if (t.requires_grad(ik)) t.accumulate(ik, dk);
        if (t.requires_grad(iv)) t.accumulate(iv, dv);
      });
}

}  // namespace glf
