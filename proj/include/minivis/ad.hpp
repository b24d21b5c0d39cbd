#pragma once

// Reverse-mode automatic differentiation over Eigen dense matrices.
//
// A Graph owns the nodes of one forward pass in creation order, which is
// already a topological order, so backward() is a single reverse sweep.
// Feature maps are stored as (channels x pixels) matrices with row-major
// pixel indexing (index = y * width + x).

#include "minivis/common.hpp"

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace minivis::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Mat val;
  Mat grad;  // empty until touched by backward
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backprop;

  double scalar() const { return val(0, 0); }
};

inline void accumulate(Node& n, const Mat& g) {
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

// A trainable tensor. Optimizers consume `grad` after Graph::backward().
struct Param {
  Mat value;
  Mat grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

// Named parameter collection with stable insertion order.
class ParamStore {
 public:
  Param& add(const std::string& name, Mat init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate param: " + name);
    index_[name] = params_.size();
    names_.push_back(name);
    params_.push_back(Param{std::move(init), Mat()});
    params_.back().zero_grad();
    return params_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Param& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown param: " + name);
    return params_[it->second];
  }

  const Param& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown param: " + name);
    return params_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return params_.size(); }
  Param& at(std::size_t i) { return params_[i]; }
  const Param& at(std::size_t i) const { return params_[i]; }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  NodePtr input(Mat v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    return n;
  }

  NodePtr param(Param& p) {
    auto n = std::make_shared<Node>();
    n->val = p.value;
    if (grad_enabled_) {
      n->requires_grad = true;
      bindings_.emplace_back(&p, n);
      nodes_.push_back(n);
    }
    return n;
  }

  NodePtr record(NodePtr n, std::vector<NodePtr> parents, std::function<void(Node&)> backprop) {
    if (grad_enabled_) {
      for (const auto& p : parents) {
        if (p->requires_grad) {
          n->requires_grad = true;
          break;
        }
      }
      if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
        nodes_.push_back(n);
      }
    }
    return n;
  }

  // Seeds d(loss)/d(loss) = 1, sweeps the tape once, then flushes leaf
  // gradients into their bound Params.
  void backward(const NodePtr& loss) {
    if (!grad_enabled_) throw std::logic_error("backward() on a no-grad graph");
    if (loss->val.rows() != 1 || loss->val.cols() != 1) {
      throw std::invalid_argument("backward() expects a scalar loss node");
    }
    loss->grad = Mat::Ones(1, 1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node& n = **it;
      if (n.grad.size() == 0 || !n.backprop) continue;
      n.backprop(n);
    }
    for (auto& [p, n] : bindings_) {
      if (n->grad.size() != 0) p->grad += n->grad;
    }
  }

 private:
  bool grad_enabled_;
  std::vector<NodePtr> nodes_;
  std::vector<std::pair<Param*, NodePtr>> bindings_;
};

// ---------------------------------------------------------------------------
// elementwise and linear ops
// ---------------------------------------------------------------------------

inline NodePtr add(Graph& g, NodePtr a, NodePtr b) {
  auto n = std::make_shared<Node>();
  n->val = a->val + b->val;
  return g.record(n, {a, b}, [a, b](Node& self) {
    accumulate(*a, self.grad);
    accumulate(*b, self.grad);
  });
}

inline NodePtr sub(Graph& g, NodePtr a, NodePtr b) {
  auto n = std::make_shared<Node>();
  n->val = a->val - b->val;
  return g.record(n, {a, b}, [a, b](Node& self) {
    accumulate(*a, self.grad);
    accumulate(*b, Mat(-self.grad));
  });
}

inline NodePtr scale(Graph& g, NodePtr a, double s) {
  auto n = std::make_shared<Node>();
  n->val = a->val * s;
  return g.record(n, {a}, [a, s](Node& self) { accumulate(*a, Mat(self.grad * s)); });
}

inline NodePtr cmul(Graph& g, NodePtr a, NodePtr b) {
  auto n = std::make_shared<Node>();
  n->val = a->val.cwiseProduct(b->val);
  return g.record(n, {a, b}, [a, b](Node& self) {
    accumulate(*a, Mat(self.grad.cwiseProduct(b->val)));
    accumulate(*b, Mat(self.grad.cwiseProduct(a->val)));
  });
}

inline NodePtr matmul(Graph& g, NodePtr a, NodePtr b) {
  auto n = std::make_shared<Node>();
  n->val = a->val * b->val;
  return g.record(n, {a, b}, [a, b](Node& self) {
    accumulate(*a, Mat(self.grad * b->val.transpose()));
    accumulate(*b, Mat(a->val.transpose() * self.grad));
  });
}

// y = A^T v for A (d x n), v (d x 1); the gradient form avoids a transpose op.
inline NodePtr mat_t_vec(Graph& g, NodePtr a, NodePtr v) {
  auto n = std::make_shared<Node>();
  n->val = a->val.transpose() * v->val;
  return g.record(n, {a, v}, [a, v](Node& self) {
    accumulate(*a, Mat(v->val * self.grad.transpose()));
    accumulate(*v, Mat(a->val * self.grad));
  });
}

// x (C x N) plus per-channel bias b (C x 1).
inline NodePtr add_bias(Graph& g, NodePtr x, NodePtr b) {
  auto n = std::make_shared<Node>();
  n->val = x->val.colwise() + Eigen::VectorXd(b->val.col(0));
  return g.record(n, {x, b}, [x, b](Node& self) {
    accumulate(*x, self.grad);
    accumulate(*b, Mat(self.grad.rowwise().sum()));
  });
}

inline NodePtr relu(Graph& g, NodePtr a) {
  auto n = std::make_shared<Node>();
  n->val = a->val.cwiseMax(0.0);
  return g.record(n, {a}, [a](Node& self) {
    Mat grad = (a->val.array() > 0.0).cast<double>().matrix().cwiseProduct(self.grad);
    accumulate(*a, grad);
  });
}

inline Mat stable_sigmoid(const Mat& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

inline NodePtr sigmoid(Graph& g, NodePtr a) {
  auto n = std::make_shared<Node>();
  n->val = stable_sigmoid(a->val);
  return g.record(n, {a}, [a, n = n.get()](Node& self) {
    Mat grad = self.grad.cwiseProduct(n->val.cwiseProduct((1.0 - n->val.array()).matrix()));
    accumulate(*a, grad);
  });
}

inline double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline NodePtr softplus(Graph& g, NodePtr a) {
  auto n = std::make_shared<Node>();
  n->val = a->val.unaryExpr([](double v) { return softplus_scalar(v); });
  return g.record(n, {a}, [a](Node& self) {
    accumulate(*a, Mat(self.grad.cwiseProduct(stable_sigmoid(a->val))));
  });
}

inline NodePtr sum(Graph& g, NodePtr a) {
  auto n = std::make_shared<Node>();
  n->val = Mat::Constant(1, 1, a->val.sum());
  return g.record(n, {a}, [a](Node& self) {
    accumulate(*a, Mat(Mat::Constant(a->val.rows(), a->val.cols(), self.grad(0, 0))));
  });
}

inline NodePtr mean(Graph& g, NodePtr a) { return scale(g, sum(g, a), 1.0 / static_cast<double>(a->val.size())); }

inline NodePtr concat_rows(Graph& g, NodePtr a, NodePtr b) {
  if (a->val.cols() != b->val.cols()) throw std::invalid_argument("concat_rows: column mismatch");
  auto n = std::make_shared<Node>();
  n->val.resize(a->val.rows() + b->val.rows(), a->val.cols());
  n->val << a->val, b->val;
  return g.record(n, {a, b}, [a, b](Node& self) {
    accumulate(*a, Mat(self.grad.topRows(a->val.rows())));
    accumulate(*b, Mat(self.grad.bottomRows(b->val.rows())));
  });
}

inline NodePtr col(Graph& g, NodePtr a, Eigen::Index j) {
  auto n = std::make_shared<Node>();
  n->val = a->val.col(j);
  return g.record(n, {a}, [a, j](Node& self) {
    Mat grad = Mat::Zero(a->val.rows(), a->val.cols());
    grad.col(j) = self.grad;
    accumulate(*a, grad);
  });
}

inline NodePtr hstack(Graph& g, const std::vector<NodePtr>& cols) {
  if (cols.empty()) throw std::invalid_argument("hstack: empty");
  auto n = std::make_shared<Node>();
  n->val.resize(cols[0]->val.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) n->val.col(static_cast<Eigen::Index>(i)) = cols[i]->val.col(0);
  return g.record(n, cols, [cols](Node& self) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      accumulate(*cols[i], Mat(self.grad.col(static_cast<Eigen::Index>(i))));
    }
  });
}

// Row-major reshape of a flat (len x 1) vector segment to (rows x cols).
inline NodePtr slice_reshape(Graph& g, NodePtr flat, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
  if (offset + rows * cols > flat->val.rows()) throw std::invalid_argument("slice_reshape: out of range");
  auto n = std::make_shared<Node>();
  n->val.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) n->val(r, c) = flat->val(offset + r * cols + c, 0);
  return g.record(n, {flat}, [flat, offset, rows, cols](Node& self) {
    Mat grad = Mat::Zero(flat->val.rows(), 1);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) grad(offset + r * cols + c, 0) = self.grad(r, c);
    accumulate(*flat, grad);
  });
}

// Unit-normalizes a (d x 1) vector.
inline NodePtr l2_normalize(Graph& g, NodePtr v, double eps = 1e-12) {
  auto n = std::make_shared<Node>();
  const double norm = std::sqrt(v->val.squaredNorm() + eps);
  n->val = v->val / norm;
  return g.record(n, {v}, [v, norm, n = n.get()](Node& self) {
    const double d = (n->val.transpose() * self.grad)(0, 0);
    accumulate(*v, Mat((self.grad - n->val * d) / norm));
  });
}

// ---------------------------------------------------------------------------
// conv / norm
// ---------------------------------------------------------------------------

inline int conv_out_extent(int in, int stride) { return (in + 2 - 3) / stride + 1; }

// 3x3 convolution, padding 1. x is (Cin x h*w), weight (Cout x Cin*9) with
// column index c*9 + dy*3 + dx, bias (Cout x 1).
inline NodePtr conv3x3(Graph& g, NodePtr x, NodePtr w, NodePtr b, int h, int width, int stride) {
  const int cin = static_cast<int>(x->val.rows());
  if (w->val.cols() != cin * 9) throw std::invalid_argument("conv3x3: weight/input channel mismatch");
  const int ho = conv_out_extent(h, stride);
  const int wo = conv_out_extent(width, stride);

  auto im2col = std::make_shared<Mat>(Mat::Zero(cin * 9, static_cast<Eigen::Index>(ho) * wo));
  for (int yo = 0; yo < ho; ++yo) {
    for (int xo = 0; xo < wo; ++xo) {
      const int o = yo * wo + xo;
      for (int dy = 0; dy < 3; ++dy) {
        const int yi = yo * stride - 1 + dy;
        if (yi < 0 || yi >= h) continue;
        for (int dx = 0; dx < 3; ++dx) {
          const int xi = xo * stride - 1 + dx;
          if (xi < 0 || xi >= width) continue;
          const int k = dy * 3 + dx;
          for (int c = 0; c < cin; ++c) {
            (*im2col)(c * 9 + k, o) = x->val(c, yi * width + xi);
          }
        }
      }
    }
  }

  auto n = std::make_shared<Node>();
  n->val = (w->val * (*im2col)).colwise() + Eigen::VectorXd(b->val.col(0));
  return g.record(n, {x, w, b}, [x, w, b, im2col, h, width, stride, ho, wo, cin](Node& self) {
    accumulate(*w, Mat(self.grad * im2col->transpose()));
    accumulate(*b, Mat(self.grad.rowwise().sum()));
    if (x->requires_grad) {
      Mat gcol = w->val.transpose() * self.grad;
      Mat gx = Mat::Zero(x->val.rows(), x->val.cols());
      for (int yo = 0; yo < ho; ++yo) {
        for (int xo = 0; xo < wo; ++xo) {
          const int o = yo * wo + xo;
          for (int dy = 0; dy < 3; ++dy) {
            const int yi = yo * stride - 1 + dy;
            if (yi < 0 || yi >= h) continue;
            for (int dx = 0; dx < 3; ++dx) {
              const int xi = xo * stride - 1 + dx;
              if (xi < 0 || xi >= width) continue;
              const int k = dy * 3 + dx;
              for (int c = 0; c < cin; ++c) {
                gx(c, yi * width + xi) += gcol(c * 9 + k, o);
              }
            }
          }
        }
      }
      accumulate(*x, gx);
    }
  });
}

// Per-channel normalization over spatial positions with learnable affine.
inline NodePtr instance_norm(Graph& g, NodePtr x, NodePtr gamma, NodePtr beta, double eps = 1e-5) {
  const Eigen::Index c = x->val.rows();
  const Eigen::Index n_px = x->val.cols();
  auto n = std::make_shared<Node>();
  Eigen::VectorXd mu = x->val.rowwise().mean();
  Mat centered = x->val.colwise() - mu;
  Eigen::VectorXd var = centered.array().square().matrix().rowwise().mean();
  Eigen::VectorXd inv_std = (var.array() + eps).sqrt().inverse();
  auto xhat = std::make_shared<Mat>(centered.array().colwise() * inv_std.array());
  n->val = (xhat->array().colwise() * gamma->val.col(0).array()).colwise() + beta->val.col(0).array();
  auto inv_std_keep = std::make_shared<Eigen::VectorXd>(std::move(inv_std));
  return g.record(n, {x, gamma, beta}, [x, gamma, beta, xhat, inv_std_keep, c, n_px](Node& self) {
    accumulate(*gamma, Mat(self.grad.cwiseProduct(*xhat).rowwise().sum()));
    accumulate(*beta, Mat(self.grad.rowwise().sum()));
    if (x->requires_grad) {
      const double inv_n = 1.0 / static_cast<double>(n_px);
      Mat gxhat = self.grad.array().colwise() * gamma->val.col(0).array();
      Eigen::VectorXd m1 = gxhat.rowwise().mean();
      Eigen::VectorXd m2 = gxhat.cwiseProduct(*xhat).rowwise().mean();
      Mat gx = ((gxhat.colwise() - m1) - (xhat->array().colwise() * m2.array()).matrix()).array().colwise() *
               inv_std_keep->array();
      (void)inv_n;
      (void)c;
      accumulate(*x, gx);
    }
  });
}

// ---------------------------------------------------------------------------
// fused losses
// ---------------------------------------------------------------------------

// Smoothed dice loss: 1 - 2*(sum(p*t) + eps) / (sum(p^2) + sum(t^2) + 2*eps).
inline NodePtr dice_loss_node(Graph& g, NodePtr pred, const Mat& target, double eps = 1e-6) {
  if (pred->val.rows() != target.rows() || pred->val.cols() != target.cols()) {
    throw std::invalid_argument("dice_loss: shape mismatch");
  }
  auto n = std::make_shared<Node>();
  const double inter = pred->val.cwiseProduct(target).sum();
  const double denom = pred->val.squaredNorm() + target.squaredNorm() + 2.0 * eps;
  const double num = 2.0 * (inter + eps);
  n->val = Mat::Constant(1, 1, 1.0 - num / denom);
  return g.record(n, {pred}, [pred, target, num, denom](Node& self) {
    const double s = self.grad(0, 0) * 2.0 / (denom * denom);
    accumulate(*pred, Mat(s * (num * pred->val - denom * target)));
  });
}

// Sum over all entries of the binary sigmoid focal loss. `target` entries are
// {0,1}; alpha weights the positive class.
inline NodePtr sigmoid_focal_sum_node(Graph& g, NodePtr logits, const Mat& target, double alpha, double gamma) {
  if (logits->val.rows() != target.rows() || logits->val.cols() != target.cols()) {
    throw std::invalid_argument("focal: shape mismatch");
  }
  auto n = std::make_shared<Node>();
  double total = 0.0;
  for (Eigen::Index j = 0; j < logits->val.cols(); ++j) {
    for (Eigen::Index i = 0; i < logits->val.rows(); ++i) {
      const double z = logits->val(i, j);
      const double log_s = -softplus_scalar(-z);
      const double log_1ms = -softplus_scalar(z);
      const double s = std::exp(log_s);
      if (target(i, j) > 0.5) {
        total += -alpha * std::pow(1.0 - s, gamma) * log_s;
      } else {
        total += -(1.0 - alpha) * std::pow(s, gamma) * log_1ms;
      }
    }
  }
  n->val = Mat::Constant(1, 1, total);
  return g.record(n, {logits}, [logits, target, alpha, gamma](Node& self) {
    Mat grad(logits->val.rows(), logits->val.cols());
    for (Eigen::Index j = 0; j < logits->val.cols(); ++j) {
      for (Eigen::Index i = 0; i < logits->val.rows(); ++i) {
        const double z = logits->val(i, j);
        const double log_s = -softplus_scalar(-z);
        const double log_1ms = -softplus_scalar(z);
        const double s = std::exp(log_s);
        if (target(i, j) > 0.5) {
          grad(i, j) = alpha * std::pow(1.0 - s, gamma) * (gamma * s * log_s - (1.0 - s));
        } else {
          grad(i, j) = (1.0 - alpha) * std::pow(s, gamma) * (s - gamma * (1.0 - s) * log_1ms);
        }
      }
    }
    accumulate(*logits, Mat(grad * self.grad(0, 0)));
  });
}

// -log softmax(logits)[index] for a (m x 1) logit vector.
inline NodePtr softmax_ce_node(Graph& g, NodePtr logits, Eigen::Index index) {
  if (index < 0 || index >= logits->val.rows()) throw std::out_of_range("softmax_ce: label out of range");
  auto n = std::make_shared<Node>();
  const double m = logits->val.maxCoeff();
  const double lse = m + std::log((logits->val.array() - m).exp().sum());
  n->val = Mat::Constant(1, 1, lse - logits->val(index, 0));
  auto softmax = std::make_shared<Mat>((logits->val.array() - lse).exp().matrix());
  return g.record(n, {logits}, [logits, softmax, index](Node& self) {
    Mat grad = *softmax;
    grad(index, 0) -= 1.0;
    accumulate(*logits, Mat(grad * self.grad(0, 0)));
  });
}

// Sum over columns of -log IoU between predicted and target (l,t,r,b)
// distances. All eight distances must be positive, which holds whenever both
// boxes contain the anchor point.
inline NodePtr iou_loss_sum_node(Graph& g, NodePtr pred, const Mat& target) {
  if (pred->val.rows() != 4 || target.rows() != 4 || pred->val.cols() != target.cols()) {
    throw std::invalid_argument("iou_loss: expects 4 x P distance matrices");
  }
  auto n = std::make_shared<Node>();
  double total = 0.0;
  for (Eigen::Index j = 0; j < pred->val.cols(); ++j) {
    const auto p = pred->val.col(j);
    const auto t = target.col(j);
    const double iw = std::min(p(0), t(0)) + std::min(p(2), t(2));
    const double ih = std::min(p(1), t(1)) + std::min(p(3), t(3));
    const double inter = iw * ih;
    const double ap = (p(0) + p(2)) * (p(1) + p(3));
    const double at = (t(0) + t(2)) * (t(1) + t(3));
    const double uni = ap + at - inter;
    total += -std::log(std::max(inter / uni, 1e-12));
  }
  n->val = Mat::Constant(1, 1, total);
  return g.record(n, {pred}, [pred, target](Node& self) {
    Mat grad = Mat::Zero(4, pred->val.cols());
    for (Eigen::Index j = 0; j < pred->val.cols(); ++j) {
      const auto p = pred->val.col(j);
      const auto t = target.col(j);
      const double iw = std::min(p(0), t(0)) + std::min(p(2), t(2));
      const double ih = std::min(p(1), t(1)) + std::min(p(3), t(3));
      const double inter = iw * ih;
      const double ap = (p(0) + p(2)) * (p(1) + p(3));
      const double at = (t(0) + t(2)) * (t(1) + t(3));
      const double uni = ap + at - inter;
      // loss = -log(inter) + log(uni)
      double d_inter[4] = {p(0) < t(0) ? ih : 0.0, p(1) < t(1) ? iw : 0.0, p(2) < t(2) ? ih : 0.0,
                           p(3) < t(3) ? iw : 0.0};
      double d_ap[4] = {p(1) + p(3), p(0) + p(2), p(1) + p(3), p(0) + p(2)};
      for (int k = 0; k < 4; ++k) {
        const double d_uni = d_ap[k] - d_inter[k];
        grad(k, j) = -d_inter[k] / std::max(inter, 1e-12) + d_uni / std::max(uni, 1e-12);
      }
    }
    accumulate(*pred, Mat(grad * self.grad(0, 0)));
  });
}

}  // namespace minivis::ad
