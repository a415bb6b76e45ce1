#include "resq/autograd.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace resq::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

bool wants_grad(const Var& v) { return v && v->requires_grad; }

void accumulate(const Var& target, const Tensor& delta) {
  if (!wants_grad(target)) return;
  Tensor& g = target->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

void require_rank(const Var& v, int rank, const char* what) {
  if (v->value.rank() != rank) {
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(v->shape()));
  }
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.shape != value.shape) grad = Tensor(value.shape, 0.0);
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) any = any || wants_grad(p);
  }
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

void backward(const Var& root) {
  if (root->value.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.shape == n->value.shape) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "add");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& self) {
    accumulate(a, self.grad);
    accumulate(b, self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "mul");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants_grad(a)) {
      Tensor& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (wants_grad(b)) {
      Tensor& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->value;
  for (auto& v : out.data) v *= s;
  return make_node(std::move(out), {a}, [a, s](Node& self) {
    Tensor& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

Var relu(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {x}, [x](Node& self) {
    Tensor& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x->value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Var tanh(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.data) v = std::tanh(v);
  return make_node(std::move(out), {x}, [x](Node& self) {
    Tensor& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return make_node(std::move(out), {x}, [x](Node& self) {
    Tensor& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.value[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x->value.data) s += v;
  return make_node(Tensor({1}, {s}), {x}, [x](Node& self) {
    Tensor& g = x->grad_buffer();
    for (auto& v : g.data) v += self.grad[0];
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x->value.size());
  return scale(sum(x), 1.0 / n);
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x->value.reshaped(std::move(shape));
  return make_node(std::move(out), {x}, [x](Node& self) {
    Tensor& g = x->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------- dense layers

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 2, "linear input");
  require_rank(w, 2, "linear weight");
  const int m = x->value.dim(0), in = x->value.dim(1), out_dim = w->value.dim(0);
  if (w->value.dim(1) != in) {
    throw std::invalid_argument("linear: weight " + shape_str(w->shape()) + " vs input " +
                                shape_str(x->shape()));
  }
  if (b && (b->value.rank() != 1 || b->value.dim(0) != out_dim)) {
    throw std::invalid_argument("linear: bias shape " + shape_str(b->shape()));
  }
  Tensor out({m, out_dim});
  ConstMapMat X(x->value.ptr(), m, in);
  ConstMapMat W(w->value.ptr(), out_dim, in);
  MapMat Y(out.ptr(), m, out_dim);
  Y.noalias() = X * W.transpose();
  if (b) {
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < out_dim; ++c) Y(r, c) += b->value[c];
  }
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_node(std::move(out), std::move(parents), [x, w, b, m, in, out_dim](Node& self) {
    ConstMapMat dY(self.grad.ptr(), m, out_dim);
    if (wants_grad(x)) {
      MapMat dX(x->grad_buffer().ptr(), m, in);
      dX.noalias() += dY * ConstMapMat(w->value.ptr(), out_dim, in);
    }
    if (wants_grad(w)) {
      MapMat dW(w->grad_buffer().ptr(), out_dim, in);
      dW.noalias() += dY.transpose() * ConstMapMat(x->value.ptr(), m, in);
    }
    if (wants_grad(b)) {
      Tensor& db = b->grad_buffer();
      for (int r = 0; r < m; ++r)
        for (int c = 0; c < out_dim; ++c) db[c] += dY(r, c);
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const int B = x->value.dim(0), Ci = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
  const int Co = w->value.dim(0), k = w->value.dim(2);
  if (w->value.dim(1) != Ci || w->value.dim(3) != k) {
    throw std::invalid_argument("conv2d: weight " + shape_str(w->shape()) + " vs input " +
                                shape_str(x->shape()));
  }
  if (stride < 1 || H + 2 * pad < k || W + 2 * pad < k) {
    throw std::invalid_argument("conv2d: invalid geometry for input " + shape_str(x->shape()));
  }
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  const int P = Ho * Wo;
  const int K = Ci * k * k;
  const int cols_n = B * P;

  // cols [K, B*P]; column index = b*P + oy*Wo + ox.
  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(K) * cols_n, 0.0);
  const double* xv = x->value.ptr();
  for (int c = 0; c < Ci; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols->data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
        for (int bi = 0; bi < B; ++bi) {
          const double* plane = xv + (static_cast<std::size_t>(bi) * Ci + c) * H * W;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            double* dst = row + bi * P + oy * Wo;
            if (iy < 0 || iy >= H) continue;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) dst[ox] = plane[iy * W + ix];
            }
          }
        }
      }
    }
  }

  RowMat prod(Co, cols_n);
  prod.noalias() = ConstMapMat(w->value.ptr(), Co, K) * ConstMapMat(cols->data(), K, cols_n);
  Tensor out({B, Co, Ho, Wo});
  for (int bi = 0; bi < B; ++bi) {
    for (int co = 0; co < Co; ++co) {
      const double bias = b ? b->value[co] : 0.0;
      double* dst = out.ptr() + (static_cast<std::size_t>(bi) * Co + co) * P;
      const double* src = prod.data() + static_cast<std::size_t>(co) * cols_n + bi * P;
      for (int p = 0; p < P; ++p) dst[p] = src[p] + bias;
    }
  }

  std::vector<Var> parents{x, w};
  if (b) parents.push_back(b);
  return make_node(std::move(out), std::move(parents),
                   [=](Node& self) {
                     RowMat dprod(Co, cols_n);
                     for (int bi = 0; bi < B; ++bi) {
                       for (int co = 0; co < Co; ++co) {
                         const double* src =
                             self.grad.ptr() + (static_cast<std::size_t>(bi) * Co + co) * P;
                         double* dst = dprod.data() + static_cast<std::size_t>(co) * cols_n + bi * P;
                         for (int p = 0; p < P; ++p) dst[p] = src[p];
                       }
                     }
                     if (wants_grad(b)) {
                       Tensor& db = b->grad_buffer();
                       for (int co = 0; co < Co; ++co) db[co] += dprod.row(co).sum();
                     }
                     if (wants_grad(w)) {
                       MapMat dW(w->grad_buffer().ptr(), Co, K);
                       dW.noalias() += dprod * ConstMapMat(cols->data(), K, cols_n).transpose();
                     }
                     if (wants_grad(x)) {
                       RowMat dcols(K, cols_n);
                       dcols.noalias() = ConstMapMat(w->value.ptr(), Co, K).transpose() * dprod;
                       double* dx = x->grad_buffer().ptr();
                       for (int c = 0; c < Ci; ++c) {
                         for (int ky = 0; ky < k; ++ky) {
                           for (int kx = 0; kx < k; ++kx) {
                             const double* row =
                                 dcols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
                             for (int bi = 0; bi < B; ++bi) {
                               double* plane = dx + (static_cast<std::size_t>(bi) * Ci + c) * H * W;
                               for (int oy = 0; oy < Ho; ++oy) {
                                 const int iy = oy * stride - pad + ky;
                                 if (iy < 0 || iy >= H) continue;
                                 const double* src = row + bi * P + oy * Wo;
                                 for (int ox = 0; ox < Wo; ++ox) {
                                   const int ix = ox * stride - pad + kx;
                                   if (ix >= 0 && ix < W) plane[iy * W + ix] += src[ox];
                                 }
                               }
                             }
                           }
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------- normalization

namespace {

// Shared backward for (x - mean) * inv_std over groups of `n` elements:
// dx = inv_std / n * (n * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)).
void normalized_backward(const double* dxhat, const double* xhat, double inv_std, std::size_t n,
                         std::size_t stride_outer, std::size_t outer, std::size_t inner,
                         double* dx) {
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t idx = o * stride_outer + i;
      s1 += dxhat[idx];
      s2 += dxhat[idx] * xhat[idx];
    }
  }
  const double dn = static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t idx = o * stride_outer + i;
      dx[idx] += inv_std / dn * (dn * dxhat[idx] - s1 - xhat[idx] * s2);
    }
  }
}

}  // namespace

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state,
               bool training) {
  require_rank(x, 4, "batch_norm input");
  const int B = x->value.dim(0), C = x->value.dim(1);
  const std::size_t P = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
  const std::size_t plane_stride = static_cast<std::size_t>(C) * P;
  if (gamma->value.size() != static_cast<std::size_t>(C) ||
      beta->value.size() != static_cast<std::size_t>(C)) {
    throw std::invalid_argument("batch_norm: affine parameters do not match channels");
  }
  if (state.running_mean.size() != static_cast<std::size_t>(C)) {
    state.running_mean = Tensor({C}, 0.0);
    state.running_var = Tensor({C}, 1.0);
  }

  auto xhat = std::make_shared<Tensor>(x->value.shape);
  auto inv_std = std::make_shared<std::vector<double>>(C);
  const std::size_t n = static_cast<std::size_t>(B) * P;
  for (int c = 0; c < C; ++c) {
    const double* base = x->value.ptr() + c * P;
    double mu, var;
    if (training) {
      double s = 0.0;
      for (int bi = 0; bi < B; ++bi)
        for (std::size_t p = 0; p < P; ++p) s += base[bi * plane_stride + p];
      mu = s / static_cast<double>(n);
      double ss = 0.0;
      for (int bi = 0; bi < B; ++bi)
        for (std::size_t p = 0; p < P; ++p) {
          const double d = base[bi * plane_stride + p] - mu;
          ss += d * d;
        }
      var = ss / static_cast<double>(n);
      const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    (*inv_std)[c] = 1.0 / std::sqrt(var + state.eps);
    double* xh = xhat->ptr() + c * P;
    for (int bi = 0; bi < B; ++bi)
      for (std::size_t p = 0; p < P; ++p)
        xh[bi * plane_stride + p] = (base[bi * plane_stride + p] - mu) * (*inv_std)[c];
  }

  Tensor out(x->value.shape);
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t idx = bi * plane_stride + c * P + p;
        out[idx] = gamma->value[c] * (*xhat)[idx] + beta->value[c];
      }

  return make_node(std::move(out), {x, gamma, beta},
                   [=](Node& self) {
                     const Tensor& dy = self.grad;
                     if (wants_grad(gamma) || wants_grad(beta)) {
                       for (int c = 0; c < C; ++c) {
                         double dg = 0.0, dbt = 0.0;
                         for (int bi = 0; bi < B; ++bi)
                           for (std::size_t p = 0; p < P; ++p) {
                             const std::size_t idx = bi * plane_stride + c * P + p;
                             dg += dy[idx] * (*xhat)[idx];
                             dbt += dy[idx];
                           }
                         if (wants_grad(gamma)) gamma->grad_buffer()[c] += dg;
                         if (wants_grad(beta)) beta->grad_buffer()[c] += dbt;
                       }
                     }
                     if (!wants_grad(x)) return;
                     double* dx = x->grad_buffer().ptr();
                     std::vector<double> dxhat(dy.size());
                     for (int bi = 0; bi < B; ++bi)
                       for (int c = 0; c < C; ++c)
                         for (std::size_t p = 0; p < P; ++p) {
                           const std::size_t idx = bi * plane_stride + c * P + p;
                           dxhat[idx] = dy[idx] * gamma->value[c];
                         }
                     for (int c = 0; c < C; ++c) {
                       if (training) {
                         normalized_backward(dxhat.data() + c * P, xhat->ptr() + c * P,
                                             (*inv_std)[c], n, plane_stride, B, P, dx + c * P);
                       } else {
                         for (int bi = 0; bi < B; ++bi)
                           for (std::size_t p = 0; p < P; ++p) {
                             const std::size_t idx = bi * plane_stride + c * P + p;
                             dx[idx] += dxhat[idx] * (*inv_std)[c];
                           }
                       }
                     }
                   });
}

Var instance_norm(const Var& x, double eps) {
  require_rank(x, 4, "instance_norm input");
  const int B = x->value.dim(0), C = x->value.dim(1);
  const std::size_t P = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
  const std::size_t groups = static_cast<std::size_t>(B) * C;
  Tensor out(x->value.shape);
  auto inv_std = std::make_shared<std::vector<double>>(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const double* src = x->value.ptr() + g * P;
    double s = 0.0;
    for (std::size_t p = 0; p < P; ++p) s += src[p];
    const double mu = s / static_cast<double>(P);
    double ss = 0.0;
    for (std::size_t p = 0; p < P; ++p) ss += (src[p] - mu) * (src[p] - mu);
    (*inv_std)[g] = 1.0 / std::sqrt(ss / static_cast<double>(P) + eps);
    for (std::size_t p = 0; p < P; ++p) out[g * P + p] = (src[p] - mu) * (*inv_std)[g];
  }
  return make_node(std::move(out), {x}, [=](Node& self) {
    double* dx = x->grad_buffer().ptr();
    for (std::size_t g = 0; g < groups; ++g) {
      normalized_backward(self.grad.ptr() + g * P, self.value.ptr() + g * P, (*inv_std)[g], P, 0, 1,
                          P, dx + g * P);
    }
  });
}

// ---------------------------------------------------------------- reshaping / broadcast

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  const int B = a->value.dim(0), Ca = a->value.dim(1), Cb = b->value.dim(1);
  const int H = a->value.dim(2), W = a->value.dim(3);
  if (b->value.dim(0) != B || b->value.dim(2) != H || b->value.dim(3) != W) {
    throw std::invalid_argument("concat_channels: " + shape_str(a->shape()) + " vs " +
                                shape_str(b->shape()));
  }
  const std::size_t P = static_cast<std::size_t>(H) * W;
  Tensor out({B, Ca + Cb, H, W});
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(a->value.ptr() + bi * Ca * P, Ca * P, out.ptr() + bi * (Ca + Cb) * P);
    std::copy_n(b->value.ptr() + bi * Cb * P, Cb * P, out.ptr() + (bi * (Ca + Cb) + Ca) * P);
  }
  return make_node(std::move(out), {a, b}, [=](Node& self) {
    for (int bi = 0; bi < B; ++bi) {
      const double* g = self.grad.ptr() + bi * (Ca + Cb) * P;
      if (wants_grad(a)) {
        double* da = a->grad_buffer().ptr() + bi * Ca * P;
        for (std::size_t i = 0; i < Ca * P; ++i) da[i] += g[i];
      }
      if (wants_grad(b)) {
        double* dbp = b->grad_buffer().ptr() + bi * Cb * P;
        for (std::size_t i = 0; i < Cb * P; ++i) dbp[i] += g[Ca * P + i];
      }
    }
  });
}

Var slice_channels(const Var& x, int start, int count) {
  require_rank(x, 4, "slice_channels");
  const int B = x->value.dim(0), C = x->value.dim(1);
  if (start < 0 || count < 0 || start + count > C) {
    throw std::invalid_argument("slice_channels: range out of bounds");
  }
  const std::size_t P = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
  Tensor out({B, count, x->value.dim(2), x->value.dim(3)});
  for (int bi = 0; bi < B; ++bi) {
    std::copy_n(x->value.ptr() + (bi * C + start) * P, count * P, out.ptr() + bi * count * P);
  }
  return make_node(std::move(out), {x}, [=](Node& self) {
    for (int bi = 0; bi < B; ++bi) {
      double* dx = x->grad_buffer().ptr() + (bi * C + start) * P;
      const double* g = self.grad.ptr() + bi * count * P;
      for (std::size_t i = 0; i < count * P; ++i) dx[i] += g[i];
    }
  });
}

Var film(const Var& x, const Var& gamma, const Var& beta) {
  require_rank(x, 4, "film input");
  const int B = x->value.dim(0), C = x->value.dim(1);
  const Shape bc{B, C};
  if (gamma->value.shape != bc || beta->value.shape != bc) {
    throw std::invalid_argument("film: modulation vectors must be " + shape_str(bc));
  }
  const std::size_t P = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
  Tensor out(x->value.shape);
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      const double g = gamma->value[bi * C + c], bt = beta->value[bi * C + c];
      const std::size_t off = (static_cast<std::size_t>(bi) * C + c) * P;
      for (std::size_t p = 0; p < P; ++p) out[off + p] = x->value[off + p] * g + bt;
    }
  return make_node(std::move(out), {x, gamma, beta}, [=](Node& self) {
    for (int bi = 0; bi < B; ++bi)
      for (int c = 0; c < C; ++c) {
        const std::size_t off = (static_cast<std::size_t>(bi) * C + c) * P;
        const double g = gamma->value[bi * C + c];
        double dg = 0.0, dbt = 0.0;
        for (std::size_t p = 0; p < P; ++p) {
          dg += self.grad[off + p] * x->value[off + p];
          dbt += self.grad[off + p];
        }
        if (wants_grad(x)) {
          double* dx = x->grad_buffer().ptr() + off;
          for (std::size_t p = 0; p < P; ++p) dx[p] += self.grad[off + p] * g;
        }
        if (wants_grad(gamma)) gamma->grad_buffer()[bi * C + c] += dg;
        if (wants_grad(beta)) beta->grad_buffer()[bi * C + c] += dbt;
      }
  });
}

Var spatial_mean(const Var& x) {
  require_rank(x, 4, "spatial_mean");
  const int B = x->value.dim(0), C = x->value.dim(1);
  const std::size_t P = static_cast<std::size_t>(x->value.dim(2)) * x->value.dim(3);
  Tensor out({B, C});
  for (std::size_t g = 0; g < out.size(); ++g) {
    double s = 0.0;
    for (std::size_t p = 0; p < P; ++p) s += x->value[g * P + p];
    out[g] = s / static_cast<double>(P);
  }
  return make_node(std::move(out), {x}, [=](Node& self) {
    double* dx = x->grad_buffer().ptr();
    for (std::size_t g = 0; g < self.grad.size(); ++g) {
      const double v = self.grad[g] / static_cast<double>(P);
      for (std::size_t p = 0; p < P; ++p) dx[g * P + p] += v;
    }
  });
}

Var embedding(const Var& table, const std::vector<int>& ids) {
  require_rank(table, 2, "embedding table");
  const int V = table->value.dim(0), E = table->value.dim(1);
  Tensor out({static_cast<int>(ids.size()), E});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= V) {
      throw std::out_of_range("embedding: index " + std::to_string(ids[r]) + " outside [0," +
                              std::to_string(V) + ")");
    }
    std::copy_n(table->value.ptr() + static_cast<std::size_t>(ids[r]) * E, E, out.ptr() + r * E);
  }
  return make_node(std::move(out), {table}, [=](Node& self) {
    double* dt = table->grad_buffer().ptr();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      double* row = dt + static_cast<std::size_t>(ids[r]) * E;
      for (int e = 0; e < E; ++e) row[e] += self.grad[r * E + e];
    }
  });
}

Var select_batch(const std::vector<char>& take_a, const Var& a, const Var& b) {
  require_same_shape(a->value, b->value, "select_batch");
  const int B = a->value.dim(0);
  if (static_cast<int>(take_a.size()) != B) throw std::invalid_argument("select_batch: mask size");
  const std::size_t per = a->value.size() / static_cast<std::size_t>(B);
  Tensor out(a->value.shape);
  for (int bi = 0; bi < B; ++bi) {
    const Tensor& src = take_a[bi] ? a->value : b->value;
    std::copy_n(src.ptr() + bi * per, per, out.ptr() + bi * per);
  }
  return make_node(std::move(out), {a, b}, [=](Node& self) {
    for (int bi = 0; bi < B; ++bi) {
      const Var& dst = take_a[bi] ? a : b;
      if (!wants_grad(dst)) continue;
      double* d = dst->grad_buffer().ptr() + bi * per;
      for (std::size_t i = 0; i < per; ++i) d[i] += self.grad[bi * per + i];
    }
  });
}

}  // namespace resq::ag
