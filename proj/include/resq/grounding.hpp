#pragma once

// Anchor-based box prediction on the fused feature map.
//
// The head emits 9 x 5 channels per cell, channel a*5 + f for anchor a and
// field f in (t_x, t_y, t_w, t_h, confidence). Boxes are flattened as
// (i * W_f + j) * 9 + a, which is also the order of the joint softmax over
// confidence logits.

#include <cstdint>
#include <vector>

#include "resq/config.hpp"
#include "resq/datagen.hpp"
#include "resq/layers.hpp"

namespace resq::grounding {

using data::Box;

constexpr int kNumAnchors = 9;
constexpr int kFields = 5;

struct Anchor {
  double w = 0, h = 0;
  bool operator==(const Anchor&) const = default;
};
using AnchorSet = std::vector<Anchor>;

/// IoU of two boxes sharing a center.
double centered_iou(double w1, double h1, double w2, double h2);

/// k-means (k = 9) on box sizes with distance 1 - centered IoU, seeded with
/// k-means++. Throws DegenerateInputError for fewer than 9 boxes. With fewer
/// than 9 distinct sizes the distinct sizes are repeated to fill the set.
/// Result is sorted by area.
AnchorSet compute_anchors(const std::vector<Box>& boxes, std::uint64_t seed, int iterations = 300);

/// Sum over boxes of (1 - best centered IoU), the k-means objective.
double anchor_cost(const std::vector<Box>& boxes, const AnchorSet& anchors);

double iou(const Box& a, const Box& b);

struct Offsets {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

constexpr double kSizeClamp = 8.0;

double sigmoid(double x);

/// Center ((j + s(t_x)) * stride, (i + s(t_y)) * stride), size anchor *
/// exp(clamp(t, -8, 8)), returned in corner form.
Box decode_box(const Offsets& t, int i, int j, const Anchor& anchor, int stride);

/// Inverse of decode_box. Throws ContractError if the box center is not
/// inside cell (i, j).
Offsets encode_target(const Box& gt, int i, int j, const Anchor& anchor, int stride);

struct TargetAssignment {
  int i = 0, j = 0, a = 0;
  Offsets target;
  int flat_index = 0;
};

/// Cell containing the gt center (floor, clamped to the grid), anchor with
/// the highest centered IoU (ties go to the lowest index).
TargetAssignment assign_anchor(const Box& gt, const AnchorSet& anchors, int stride, int grid_h,
                               int grid_w);

/// Raw predictions of one sample, laid out [H_f, W_f, 9, 5].
struct BoxPrediction {
  Tensor raw;

  int grid_h() const { return raw.dim(0); }
  int grid_w() const { return raw.dim(1); }
  int count() const { return grid_h() * grid_w() * kNumAnchors; }
  double field(int flat, int f) const { return raw[static_cast<std::size_t>(flat) * kFields + f]; }
  double confidence(int flat) const { return field(flat, 4); }
  Offsets offsets(int flat) const;
};

/// Extracts sample b from a head output [B, 45, H, W].
BoxPrediction to_box_prediction(const Tensor& head_out, int b);

struct Selection {
  Box box;
  int flat_index = 0;
  int i = 0, j = 0, a = 0;
  double confidence = 0;
};

/// Highest-confidence box; ties go to the lowest flat index.
Selection select_prediction(const BoxPrediction& pred, const AnchorSet& anchors, int stride);

/// Two 1x1 convolutions with a rectifier between, C -> hidden -> 45.
struct GroundingHead {
  Conv2d c1;
  Conv2d c2;

  GroundingHead() = default;
  GroundingHead(ParamRegistry& reg, const std::string& name, int dim, int hidden, Rng& rng);
  ag::Var operator()(const ag::Var& v) const;
};

struct LossOptions {
  double coord_weight = 1.0;
  double reg_weight = 1.0;
  RegressionLoss regression = RegressionLoss::mse;
};

struct LossComponents {
  double total = 0;
  double cls = 0;
  double reg = 0;
  double div = 0;
  double cover = 0;
};

/// Cross-entropy over the joint softmax of all confidence logits and
/// regression of (s(t_x), s(t_y), t_w, t_h) at the positive anchor against
/// (s(t^_x), s(t^_y), t^_w, t^_h), both averaged over the batch.
/// Returns a [1] node; the two terms are also written to cls_out / reg_out
/// when non-null.
ag::Var detection_loss(const ag::Var& head_out, const std::vector<TargetAssignment>& targets,
                       const LossOptions& opt, double* cls_out, double* reg_out);

/// Detection loss plus reg_weight * (mean L_div + mean L_cover). div/cover
/// are per-sample [B] values and may be null. With reg_weight = 0 they are
/// reported but not part of the optimized total.
ag::Var loss_total(const ag::Var& head_out, const std::vector<TargetAssignment>& targets,
                   const ag::Var& div, const ag::Var& cover, const LossOptions& opt,
                   LossComponents* components);

/// Per-cell max confidence over anchors, softmax over cells. [H_f, W_f].
Tensor heatmap_from_prediction(const BoxPrediction& pred);

/// Heatmaps of a batch of feature maps through the head, [B, H_f, W_f].
Tensor intermediate_heatmap(const ag::Var& v_k, const GroundingHead& head);

/// Convolutional LSTM over the round sequence (3x3 gate convolution on
/// [x, h]); zero initial state; returns the last hidden state.
struct ConvLSTM {
  Conv2d gates;
  int channels = 0;

  ConvLSTM() = default;
  ConvLSTM(ParamRegistry& reg, const std::string& name, int dim, Rng& rng);
  ag::Var aggregate(const std::vector<ag::Var>& sequence) const;
};

}  // namespace resq::grounding
