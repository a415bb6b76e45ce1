#include "resq/grounding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "resq/errors.hpp"

namespace resq::grounding {

using ag::Var;

double centered_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  return inter / (w1 * h1 + w2 * h2 - inter);
}

namespace {

int nearest_anchor(const AnchorSet& anchors, double w, double h, double* best_iou = nullptr) {
  int best = 0;
  double bi = -1.0;
  for (int a = 0; a < static_cast<int>(anchors.size()); ++a) {
    const double v = centered_iou(w, h, anchors[a].w, anchors[a].h);
    if (v > bi) {
      bi = v;
      best = a;
    }
  }
  if (best_iou) *best_iou = bi;
  return best;
}

void sort_by_area(AnchorSet& anchors) {
  std::stable_sort(anchors.begin(), anchors.end(), [](const Anchor& x, const Anchor& y) {
    const double ax = x.w * x.h, ay = y.w * y.h;
    if (ax != ay) return ax < ay;
    return x.w < y.w;
  });
}

}  // namespace

AnchorSet compute_anchors(const std::vector<Box>& boxes, std::uint64_t seed, int iterations) {
  if (static_cast<int>(boxes.size()) < kNumAnchors) {
    throw DegenerateInputError("anchor clustering needs at least 9 boxes, got " +
                               std::to_string(boxes.size()));
  }
  for (const auto& b : boxes)
    if (!(b.w > 0 && b.h > 0)) throw DegenerateInputError("anchor clustering got a box without area");

  std::set<std::pair<double, double>> distinct;
  for (const auto& b : boxes) distinct.insert({b.w, b.h});
  AnchorSet anchors;
  if (static_cast<int>(distinct.size()) < kNumAnchors) {
    std::vector<Anchor> uniq;
    for (const auto& [w, h] : distinct) uniq.push_back({w, h});
    for (int a = 0; a < kNumAnchors; ++a) anchors.push_back(uniq[a % uniq.size()]);
    sort_by_area(anchors);
    return anchors;
  }

  Rng rng(seed);
  const std::size_t n = boxes.size();
  const Box& first = boxes[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1))];
  anchors.push_back({first.w, first.h});
  std::vector<double> d2(n);
  while (static_cast<int>(anchors.size()) < kNumAnchors) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = 0.0;
      nearest_anchor(anchors, boxes[i].w, boxes[i].h, &best);
      d2[i] = (1.0 - best) * (1.0 - best);
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double r = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= d2[pick];
        if (r < 0) break;
      }
    }
    while (d2[pick] == 0.0) pick = (pick + 1) % n;
    anchors.push_back({boxes[pick].w, boxes[pick].h});
  }

  std::vector<int> assign(n, -1);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = nearest_anchor(anchors, boxes[i].w, boxes[i].h);
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<double> sw(kNumAnchors, 0.0), sh(kNumAnchors, 0.0);
    std::vector<int> cnt(kNumAnchors, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sw[assign[i]] += boxes[i].w;
      sh[assign[i]] += boxes[i].h;
      ++cnt[assign[i]];
    }
    for (int a = 0; a < kNumAnchors; ++a)
      if (cnt[a] > 0) anchors[a] = {sw[a] / cnt[a], sh[a] / cnt[a]};
  }
  sort_by_area(anchors);
  return anchors;
}

double anchor_cost(const std::vector<Box>& boxes, const AnchorSet& anchors) {
  double cost = 0.0;
  for (const auto& b : boxes) {
    double best = 0.0;
    nearest_anchor(anchors, b.w, b.h, &best);
    cost += 1.0 - best;
  }
  return cost;
}

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  // Areas from the same corner arithmetic as the overlap, so iou(a, a) == 1.
  const double area_a = ((a.x + a.w) - a.x) * ((a.y + a.h) - a.y);
  const double area_b = ((b.x + b.w) - b.x) * ((b.y + b.h) - b.y);
  const double uni = std::min(area_a, area_b) + std::max(area_a, area_b) - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Box decode_box(const Offsets& t, int i, int j, const Anchor& anchor, int stride) {
  const double cx = (j + sigmoid(t.tx)) * stride;
  const double cy = (i + sigmoid(t.ty)) * stride;
  const double w = anchor.w * std::exp(std::clamp(t.tw, -kSizeClamp, kSizeClamp));
  const double h = anchor.h * std::exp(std::clamp(t.th, -kSizeClamp, kSizeClamp));
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

Offsets encode_target(const Box& gt, int i, int j, const Anchor& anchor, int stride) {
  const double fx = (gt.x + 0.5 * gt.w) / stride - j;
  const double fy = (gt.y + 0.5 * gt.h) / stride - i;
  if (fx < 0.0 || fx > 1.0 || fy < 0.0 || fy > 1.0) {
    throw ContractError("box center is outside cell (" + std::to_string(i) + ", " +
                        std::to_string(j) + ")");
  }
  if (!(gt.w > 0 && gt.h > 0)) throw ContractError("box without area");
  auto logit = [](double f) {
    f = std::clamp(f, 1e-12, 1.0 - 1e-12);
    return std::log(f / (1.0 - f));
  };
  return {logit(fx), logit(fy), std::log(gt.w / anchor.w), std::log(gt.h / anchor.h)};
}

TargetAssignment assign_anchor(const Box& gt, const AnchorSet& anchors, int stride, int grid_h,
                               int grid_w) {
  TargetAssignment t;
  const double cx = gt.x + 0.5 * gt.w, cy = gt.y + 0.5 * gt.h;
  t.j = std::clamp(static_cast<int>(std::floor(cx / stride)), 0, grid_w - 1);
  t.i = std::clamp(static_cast<int>(std::floor(cy / stride)), 0, grid_h - 1);
  t.a = nearest_anchor(anchors, gt.w, gt.h);
  t.target = encode_target(gt, t.i, t.j, anchors[t.a], stride);
  t.flat_index = (t.i * grid_w + t.j) * kNumAnchors + t.a;
  return t;
}

Offsets BoxPrediction::offsets(int flat) const {
  return {field(flat, 0), field(flat, 1), field(flat, 2), field(flat, 3)};
}

BoxPrediction to_box_prediction(const Tensor& head_out, int b) {
  const int H = head_out.dim(2), W = head_out.dim(3);
  if (head_out.dim(1) != kNumAnchors * kFields) throw ContractError("head output must have 45 channels");
  const std::size_t P = static_cast<std::size_t>(H) * W;
  BoxPrediction p{Tensor({H, W, kNumAnchors, kFields})};
  const double* src = head_out.ptr() + static_cast<std::size_t>(b) * kNumAnchors * kFields * P;
  for (std::size_t cell = 0; cell < P; ++cell)
    for (int ch = 0; ch < kNumAnchors * kFields; ++ch) p.raw[cell * kNumAnchors * kFields + ch] = src[ch * P + cell];
  return p;
}

Selection select_prediction(const BoxPrediction& pred, const AnchorSet& anchors, int stride) {
  Selection s;
  s.confidence = -std::numeric_limits<double>::infinity();
  for (int m = 0; m < pred.count(); ++m) {
    if (pred.confidence(m) > s.confidence) {
      s.confidence = pred.confidence(m);
      s.flat_index = m;
    }
  }
  s.a = s.flat_index % kNumAnchors;
  const int cell = s.flat_index / kNumAnchors;
  s.i = cell / pred.grid_w();
  s.j = cell % pred.grid_w();
  s.box = decode_box(pred.offsets(s.flat_index), s.i, s.j, anchors[s.a], stride);
  return s;
}

GroundingHead::GroundingHead(ParamRegistry& reg, const std::string& name, int dim, int hidden,
                             Rng& rng)
    : c1(reg, name + ".c1", dim, hidden, 1, 1, 0, true, rng),
      c2(reg, name + ".c2", hidden, kNumAnchors * kFields, 1, 1, 0, true, rng) {}

Var GroundingHead::operator()(const Var& v) const { return c2(ag::relu(c1(v))); }

Var detection_loss(const Var& head_out, const std::vector<TargetAssignment>& targets,
                   const LossOptions& opt, double* cls_out, double* reg_out) {
  const auto& x = head_out->value;
  if (x.rank() != 4 || x.dim(1) != kNumAnchors * kFields) throw ContractError("head output must be [B, 45, H, W]");
  const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
  if (static_cast<int>(targets.size()) != B) throw ContractError("one target per sample required");
  const std::size_t P = static_cast<std::size_t>(H) * W;
  const int M = H * W * kNumAnchors;
  auto at = [&](int b, int flat, int f) {
    const int cell = flat / kNumAnchors, a = flat % kNumAnchors;
    return (static_cast<std::size_t>(b) * kNumAnchors * kFields + a * kFields + f) * P + cell;
  };

  Tensor grad(x.shape, 0.0);
  double cls = 0.0, reg = 0.0;
  std::vector<double> z(M);
  for (int b = 0; b < B; ++b) {
    const auto& t = targets[b];
    if (t.flat_index < 0 || t.flat_index >= M) throw ContractError("target index outside the grid");
    double mx = -std::numeric_limits<double>::infinity();
    for (int m = 0; m < M; ++m) mx = std::max(mx, z[m] = x[at(b, m, 4)]);
    double s = 0.0;
    for (int m = 0; m < M; ++m) s += std::exp(z[m] - mx);
    const double lse = mx + std::log(s);
    cls += lse - z[t.flat_index];
    for (int m = 0; m < M; ++m) grad[at(b, m, 4)] = std::exp(z[m] - lse) / B;
    grad[at(b, t.flat_index, 4)] -= 1.0 / B;

    const double raw[4] = {x[at(b, t.flat_index, 0)], x[at(b, t.flat_index, 1)],
                           x[at(b, t.flat_index, 2)], x[at(b, t.flat_index, 3)]};
    const double pred[4] = {sigmoid(raw[0]), sigmoid(raw[1]), raw[2], raw[3]};
    const double goal[4] = {sigmoid(t.target.tx), sigmoid(t.target.ty), t.target.tw, t.target.th};
    for (int f = 0; f < 4; ++f) {
      const double d = pred[f] - goal[f];
      double val, dval;
      if (opt.regression == RegressionLoss::mse) {
        val = d * d;
        dval = 2.0 * d;
      } else if (std::abs(d) < 1.0) {
        val = 0.5 * d * d;
        dval = d;
      } else {
        val = std::abs(d) - 0.5;
        dval = d > 0 ? 1.0 : -1.0;
      }
      reg += val;
      const double dpred = f < 2 ? pred[f] * (1.0 - pred[f]) : 1.0;
      grad[at(b, t.flat_index, f)] = opt.coord_weight * dval * dpred / B;
    }
  }
  cls /= B;
  reg /= B;
  if (cls_out) *cls_out = cls;
  if (reg_out) *reg_out = reg;
  Tensor out({1}, cls + opt.coord_weight * reg);
  return ag::make_node(std::move(out), {head_out}, [head_out, grad](ag::Node& self) {
    Tensor& g = head_out->grad_buffer();
    const double s = self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * grad[i];
  });
}

Var loss_total(const Var& head_out, const std::vector<TargetAssignment>& targets, const Var& div,
               const Var& cover, const LossOptions& opt, LossComponents* components) {
  LossComponents c;
  Var total = detection_loss(head_out, targets, opt, &c.cls, &c.reg);
  if (div) {
    Var m = ag::mean(div);
    c.div = m->value[0];
    if (opt.reg_weight != 0.0) total = ag::add(total, ag::scale(m, opt.reg_weight));
  }
  if (cover) {
    Var m = ag::mean(cover);
    c.cover = m->value[0];
    if (opt.reg_weight != 0.0) total = ag::add(total, ag::scale(m, opt.reg_weight));
  }
  c.total = total->value[0];
  if (components) *components = c;
  return total;
}

Tensor heatmap_from_prediction(const BoxPrediction& pred) {
  const int H = pred.grid_h(), W = pred.grid_w();
  Tensor map({H, W});
  double mx = -std::numeric_limits<double>::infinity();
  for (int cell = 0; cell < H * W; ++cell) {
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < kNumAnchors; ++a) best = std::max(best, pred.confidence(cell * kNumAnchors + a));
    map[cell] = best;
    mx = std::max(mx, best);
  }
  double s = 0.0;
  for (auto& v : map.data) s += (v = std::exp(v - mx));
  for (auto& v : map.data) v /= s;
  return map;
}

Tensor intermediate_heatmap(const Var& v_k, const GroundingHead& head) {
  ag::NoGradGuard guard;
  const Tensor out = head(v_k)->value;
  const int B = out.dim(0), H = out.dim(2), W = out.dim(3);
  Tensor maps({B, H, W});
  for (int b = 0; b < B; ++b) {
    const Tensor m = heatmap_from_prediction(to_box_prediction(out, b));
    std::copy(m.data.begin(), m.data.end(), maps.ptr() + static_cast<std::size_t>(b) * H * W);
  }
  return maps;
}

ConvLSTM::ConvLSTM(ParamRegistry& reg, const std::string& name, int dim, Rng& rng)
    : gates(reg, name + ".gates", 2 * dim, 4 * dim, 3, 1, 1, true, rng), channels(dim) {}

Var ConvLSTM::aggregate(const std::vector<Var>& sequence) const {
  if (sequence.empty()) throw ContractError("ConvLSTM needs at least one input");
  const Shape& shp = sequence[0]->shape();
  const int C = channels;
  Var h = ag::constant(Tensor(shp, 0.0));
  Var c = ag::constant(Tensor(shp, 0.0));
  for (const auto& x : sequence) {
    if (x->shape() != shp) throw ContractError("ConvLSTM inputs must share a shape");
    Var g = gates(ag::concat_channels(x, h));
    Var in = ag::sigmoid(ag::slice_channels(g, 0, C));
    Var forget = ag::sigmoid(ag::slice_channels(g, C, C));
    Var out = ag::sigmoid(ag::slice_channels(g, 2 * C, C));
    Var cand = ag::tanh(ag::slice_channels(g, 3 * C, C));
    c = ag::add(ag::mul(forget, c), ag::mul(in, cand));
    h = ag::mul(out, ag::tanh(c));
  }
  return h;
}

}  // namespace resq::grounding
