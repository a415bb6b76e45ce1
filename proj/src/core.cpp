#include "resq/core.hpp"

#include <cmath>

#include "resq/errors.hpp"

namespace resq::core {

using ag::Var;

AttentionScorer::AttentionScorer(ParamRegistry& reg, const std::string& name, int dim, int hidden,
                                 Rng& rng)
    : w0(reg, name + ".w0", dim, hidden, rng), w1(reg, name + ".w1", hidden, 1, rng) {}

RoundParameters::RoundParameters(ParamRegistry& reg, const std::string& name, int dim, int hidden,
                                 Rng& rng)
    : attention(reg, name + ".attention", dim, hidden, rng),
      gamma(reg, name + ".gamma", dim, dim, rng),
      beta(reg, name + ".beta", dim, dim, rng),
      f1(reg, name + ".f1", dim, dim, 1, 1, 0, false, rng),
      f2(reg, name + ".f2", dim, dim, 3, 1, 1, false, rng),
      f2_bn(std::make_unique<BatchNorm2d>(reg, name + ".f2_bn", dim)) {}

namespace {

void require_finite(const Var& v, const char* what) {
  for (double x : v->value.data) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

void check_lengths(const Var& S, const std::vector<int>& lengths) {
  if (S->value.rank() != 3) throw ContractError("word features must be [B, N, C]");
  const int B = S->value.dim(0), N = S->value.dim(1);
  if (static_cast<int>(lengths.size()) != B) throw ContractError("lengths do not match batch size");
  for (int L : lengths)
    if (L < 1 || L > N) throw ContractError("query length outside [1, max_len]");
}

// x[b, n, :] = h[b, n] * (vbar[b, :] . S[b, n, :]) -> [B*N, C]
Var attention_input(const Var& S, const Var& vbar, const Var& h) {
  const int B = S->value.dim(0), N = S->value.dim(1), C = S->value.dim(2);
  if (vbar->value.shape != Shape{B, C} || h->value.shape != Shape{B, N}) {
    throw ContractError("attention input shapes inconsistent: S " + shape_str(S->shape()) +
                        ", vbar " + shape_str(vbar->shape()) + ", h " + shape_str(h->shape()));
  }
  Tensor out({B * N, C});
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) {
      const double hn = h->value[b * N + n];
      for (int c = 0; c < C; ++c) {
        const std::size_t i = (static_cast<std::size_t>(b) * N + n) * C + c;
        out[i] = hn * vbar->value[b * C + c] * S->value[i];
      }
    }
  return ag::make_node(std::move(out), {S, vbar, h}, [=](ag::Node& self) {
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n) {
        const double hn = h->value[b * N + n];
        double dh = 0.0;
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(b) * N + n) * C + c;
          const double g = self.grad[i], vb = vbar->value[b * C + c], s = S->value[i];
          dh += g * vb * s;
          if (S->requires_grad) S->grad_buffer()[i] += g * hn * vb;
          if (vbar->requires_grad) vbar->grad_buffer()[b * C + c] += g * hn * s;
        }
        if (h->requires_grad) h->grad_buffer()[b * N + n] += dh;
      }
  });
}

Var score_words(const Var& x, int B, int N, const AttentionScorer& scorer,
                const std::vector<int>& lengths) {
  auto hidden = ag::tanh(scorer.w0(x));
  auto scores = ag::reshape(scorer.w1(hidden), {B, N});
  return masked_softmax(scores, lengths);
}

}  // namespace

Var pool_visual(const Var& v) { return ag::spatial_mean(v); }

Var compute_history(const std::vector<Var>& previous_alphas, int batch, int max_len) {
  const Shape shape{batch, max_len};
  Tensor total(shape, 0.0);
  for (const auto& a : previous_alphas) {
    if (a->value.shape != shape) {
      throw ContractError("history: attention shape " + shape_str(a->shape()) + " != " +
                          shape_str(shape));
    }
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += a->value[i];
  }
  Tensor out(shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 - std::min(total[i], 1.0);
  return ag::make_node(std::move(out), previous_alphas, [previous_alphas, total](ag::Node& self) {
    for (const auto& a : previous_alphas) {
      if (!a->requires_grad) continue;
      Tensor& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (total[i] < 1.0) g[i] -= self.grad[i];
    }
  });
}

Var masked_softmax(const Var& scores, const std::vector<int>& lengths) {
  const int B = scores->value.dim(0), N = scores->value.dim(1);
  Tensor out({B, N}, 0.0);
  for (int b = 0; b < B; ++b) {
    const int L = lengths[b];
    const double* z = scores->value.ptr() + static_cast<std::size_t>(b) * N;
    double mx = z[0];
    for (int n = 1; n < L; ++n) mx = std::max(mx, z[n]);
    double s = 0.0;
    for (int n = 0; n < L; ++n) s += (out[b * N + n] = std::exp(z[n] - mx));
    for (int n = 0; n < L; ++n) out[b * N + n] /= s;
  }
  return ag::make_node(std::move(out), {scores}, [=](ag::Node& self) {
    Tensor& g = scores->grad_buffer();
    for (int b = 0; b < B; ++b) {
      double dot = 0.0;
      for (int n = 0; n < lengths[b]; ++n) dot += self.value[b * N + n] * self.grad[b * N + n];
      for (int n = 0; n < lengths[b]; ++n)
        g[b * N + n] += self.value[b * N + n] * (self.grad[b * N + n] - dot);
    }
  });
}

Var subquery_attention(const Var& S, const Var& vbar, const Var& history,
                       const std::vector<int>& lengths, const AttentionScorer& scorer) {
  check_lengths(S, lengths);
  require_finite(S, "word features");
  require_finite(vbar, "pooled visual feature");
  require_finite(history, "history vector");
  const int B = S->value.dim(0), N = S->value.dim(1);
  return score_words(attention_input(S, vbar, history), B, N, scorer, lengths);
}

Var text_attention(const Var& S, const std::vector<int>& lengths, const AttentionScorer& scorer) {
  check_lengths(S, lengths);
  require_finite(S, "word features");
  const int B = S->value.dim(0), N = S->value.dim(1), C = S->value.dim(2);
  return score_words(ag::reshape(S, {B * N, C}), B, N, scorer, lengths);
}

Var subquery_embed(const Var& S, const Var& alpha) {
  const int B = S->value.dim(0), N = S->value.dim(1), C = S->value.dim(2);
  if (alpha->value.shape != Shape{B, N}) throw ContractError("attention length does not match words");
  Tensor out({B, C}, 0.0);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < N; ++n) {
      const double a = alpha->value[b * N + n];
      if (a == 0.0) continue;
      for (int c = 0; c < C; ++c) out[b * C + c] += a * S->value[(static_cast<std::size_t>(b) * N + n) * C + c];
    }
  return ag::make_node(std::move(out), {S, alpha}, [=](ag::Node& self) {
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < N; ++n) {
        const double a = alpha->value[b * N + n];
        double da = 0.0;
        for (int c = 0; c < C; ++c) {
          const std::size_t i = (static_cast<std::size_t>(b) * N + n) * C + c;
          da += self.grad[b * C + c] * S->value[i];
          if (S->requires_grad) S->grad_buffer()[i] += self.grad[b * C + c] * a;
        }
        if (alpha->requires_grad) alpha->grad_buffer()[b * N + n] += da;
      }
  });
}

Modulation modulation_params(const Var& q, const RoundParameters& p) {
  return {ag::tanh(p.gamma(q)), ag::tanh(p.beta(q))};
}

Var modulate(const Var& v_prev, const Modulation& mods, RoundParameters& p, bool training) {
  Var f1 = p.identity_maps ? v_prev : ag::instance_norm(p.f1(v_prev));
  Var fused = ag::add(ag::relu(ag::film(f1, mods.gamma, mods.beta)), v_prev);
  if (p.identity_maps) return fused;
  return ag::relu(p.f2_bn->forward(p.f2(fused), training));
}

RoundsResult run_rounds(const Var& S, const std::vector<int>& lengths, const Var& v0,
                        std::span<RoundParameters* const> params, int rounds, bool training) {
  if (rounds < 1) throw ContractError("run_rounds needs at least one round");
  if (static_cast<int>(params.size()) < rounds) throw ContractError("fewer parameter sets than rounds");
  check_lengths(S, lengths);
  const int B = S->value.dim(0), N = S->value.dim(1);
  RoundsResult result;
  result.v = v0;
  std::vector<Var> alphas;
  for (int k = 0; k < rounds; ++k) {
    RoundParameters& p = *params[k];
    RoundRecord rec;
    rec.history = compute_history(alphas, B, N);
    rec.alpha = subquery_attention(S, pool_visual(result.v), rec.history, lengths, p.attention);
    rec.q = subquery_embed(S, rec.alpha);
    const Modulation mods = modulation_params(rec.q, p);
    rec.gamma = mods.gamma;
    rec.beta = mods.beta;
    rec.v = modulate(result.v, mods, p, training);
    result.v = rec.v;
    alphas.push_back(rec.alpha);
    result.trace.push_back(rec);
  }
  return result;
}

Var reg_diversity(const std::vector<Var>& alphas, const std::vector<int>& lengths) {
  const int B = static_cast<int>(lengths.size());
  const int K = static_cast<int>(alphas.size());
  if (K == 0) return ag::constant(Tensor({B}, 0.0));
  const int N = alphas[0]->value.dim(1);
  // gram[b][k][l]
  auto gram = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B) * K * K, 0.0);
  Tensor out({B}, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int k = 0; k < K; ++k)
      for (int l = 0; l < K; ++l) {
        double g = 0.0;
        for (int n = 0; n < lengths[b]; ++n)
          g += alphas[k]->value[b * N + n] * alphas[l]->value[b * N + n];
        (*gram)[(static_cast<std::size_t>(b) * K + k) * K + l] = g;
        if (k != l) out[b] += g * g;
      }
  }
  return ag::make_node(std::move(out), alphas, [=](ag::Node& self) {
    for (int k = 0; k < K; ++k) {
      if (!alphas[k]->requires_grad) continue;
      Tensor& g = alphas[k]->grad_buffer();
      for (int b = 0; b < B; ++b)
        for (int n = 0; n < lengths[b]; ++n) {
          double d = 0.0;
          for (int l = 0; l < K; ++l)
            if (l != k) d += (*gram)[(static_cast<std::size_t>(b) * K + k) * K + l] * alphas[l]->value[b * N + n];
          g[b * N + n] += self.grad[b] * 4.0 * d;
        }
    }
  });
}

Var reg_coverage(const std::vector<Var>& alphas, const std::vector<int>& lengths) {
  const int B = static_cast<int>(lengths.size());
  if (alphas.empty()) {
    Tensor out({B});
    for (int b = 0; b < B; ++b) out[b] = lengths[b];
    return ag::constant(std::move(out));
  }
  const int N = alphas[0]->value.dim(1);
  Tensor total({B, N}, 0.0);
  for (const auto& a : alphas)
    for (std::size_t i = 0; i < total.size(); ++i) total[i] += a->value[i];
  Tensor out({B}, 0.0);
  for (int b = 0; b < B; ++b)
    for (int n = 0; n < lengths[b]; ++n) out[b] += 1.0 - std::min(total[b * N + n], 1.0);
  return ag::make_node(std::move(out), alphas, [=](ag::Node& self) {
    for (const auto& a : alphas) {
      if (!a->requires_grad) continue;
      Tensor& g = a->grad_buffer();
      for (int b = 0; b < B; ++b)
        for (int n = 0; n < lengths[b]; ++n)
          if (total[b * N + n] < 1.0) g[b * N + n] -= self.grad[b];
    }
  });
}

Var mean_words(const Var& S, const std::vector<int>& lengths) {
  check_lengths(S, lengths);
  const int B = S->value.dim(0), N = S->value.dim(1), C = S->value.dim(2);
  Tensor out({B, C}, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int n = 0; n < lengths[b]; ++n)
      for (int c = 0; c < C; ++c) out[b * C + c] += S->value[(static_cast<std::size_t>(b) * N + n) * C + c];
    for (int c = 0; c < C; ++c) out[b * C + c] /= lengths[b];
  }
  return ag::make_node(std::move(out), {S}, [=](ag::Node& self) {
    Tensor& g = S->grad_buffer();
    for (int b = 0; b < B; ++b)
      for (int n = 0; n < lengths[b]; ++n)
        for (int c = 0; c < C; ++c)
          g[(static_cast<std::size_t>(b) * N + n) * C + c] += self.grad[b * C + c] / lengths[b];
  });
}

Var word_at(const Var& S, const std::vector<int>& lengths, int index) {
  check_lengths(S, lengths);
  const int B = S->value.dim(0), N = S->value.dim(1), C = S->value.dim(2);
  Tensor out({B, C}, 0.0);
  for (int b = 0; b < B; ++b)
    if (index < lengths[b])
      for (int c = 0; c < C; ++c) out[b * C + c] = S->value[(static_cast<std::size_t>(b) * N + index) * C + c];
  return ag::make_node(std::move(out), {S}, [=](ag::Node& self) {
    Tensor& g = S->grad_buffer();
    for (int b = 0; b < B; ++b)
      if (index < lengths[b])
        for (int c = 0; c < C; ++c) g[(static_cast<std::size_t>(b) * N + index) * C + c] += self.grad[b * C + c];
  });
}

SubqueryResult variant_subqueries(const Var& S, const std::vector<int>& lengths, const Var& v0,
                                  Strategy strategy, std::span<RoundParameters* const> round_params,
                                  std::span<const AttentionScorer> scorers, int rounds,
                                  bool training) {
  check_lengths(S, lengths);
  SubqueryResult r;
  switch (strategy) {
    case Strategy::average_vector: {
      auto q = mean_words(S, lengths);
      r.queries.assign(static_cast<std::size_t>(rounds), q);
      break;
    }
    case Strategy::per_word: {
      for (int k = 0; k < S->value.dim(1); ++k) r.queries.push_back(word_at(S, lengths, k));
      break;
    }
    case Strategy::single_head: {
      if (scorers.empty()) throw ConfigError("single_head needs one scorer");
      auto alpha = text_attention(S, lengths, scorers[0]);
      auto q = subquery_embed(S, alpha);
      r.queries.assign(static_cast<std::size_t>(rounds), q);
      r.alphas.push_back(alpha);
      r.round_alphas.assign(static_cast<std::size_t>(rounds), alpha);
      break;
    }
    case Strategy::multi_head: {
      if (static_cast<int>(scorers.size()) < rounds) throw ConfigError("multi_head needs K scorers");
      for (int k = 0; k < rounds; ++k) {
        auto alpha = text_attention(S, lengths, scorers[k]);
        r.queries.push_back(subquery_embed(S, alpha));
        r.alphas.push_back(alpha);
        r.round_alphas.push_back(alpha);
      }
      break;
    }
    case Strategy::recursive: {
      r.rounds = run_rounds(S, lengths, v0, round_params, rounds, training);
      for (const auto& rec : r.rounds->trace) {
        r.queries.push_back(rec.q);
        r.alphas.push_back(rec.alpha);
        r.round_alphas.push_back(rec.alpha);
      }
      break;
    }
    default:
      throw ConfigError("unknown strategy");
  }
  return r;
}

// ---------------------------------------------------------------- plain helpers

std::vector<double> compute_history(const std::vector<std::vector<double>>& previous_alphas,
                                    int length) {
  std::vector<Var> vars;
  for (const auto& a : previous_alphas) {
    if (static_cast<int>(a.size()) != length) {
      throw ContractError("history: attention vector of length " + std::to_string(a.size()) +
                          ", expected " + std::to_string(length));
    }
    vars.push_back(ag::constant(Tensor({1, length}, a)));
  }
  ag::NoGradGuard guard;
  return compute_history(vars, 1, length)->value.data;
}

namespace {

std::vector<Var> columns(const Tensor& A) {
  if (A.rank() != 2) throw ContractError("attention matrix must be [N, K]");
  const int N = A.dim(0), K = A.dim(1);
  std::vector<Var> cols;
  for (int k = 0; k < K; ++k) {
    Tensor c({1, N});
    for (int n = 0; n < N; ++n) c[n] = A[static_cast<std::size_t>(n) * K + k];
    cols.push_back(ag::constant(std::move(c)));
  }
  return cols;
}

}  // namespace

double reg_diversity(const Tensor& A) {
  ag::NoGradGuard guard;
  return reg_diversity(columns(A), {A.dim(0)})->value[0];
}

double reg_coverage(const Tensor& A) {
  ag::NoGradGuard guard;
  return reg_coverage(columns(A), {A.dim(0)})->value[0];
}

}  // namespace resq::core
