#pragma once

#include <string>
#include <vector>

#include "resq/autograd.hpp"
#include "resq/rng.hpp"

namespace resq {

struct NamedParam {
  std::string name;
  ag::Var var;
};

struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

/// Owns the naming of every trainable tensor and persistent buffer of a model.
class ParamRegistry {
 public:
  ag::Var create(const std::string& name, Tensor init);
  void add_buffer(const std::string& name, Tensor* tensor);

  const std::vector<NamedParam>& params() const { return params_; }
  const std::vector<NamedBuffer>& buffers() const { return buffers_; }

  std::size_t parameter_count() const;
  void zero_grad();

 private:
  std::vector<NamedParam> params_;
  std::vector<NamedBuffer> buffers_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
Tensor fan_in_uniform(Shape shape, int fan_in, Rng& rng);

struct Linear {
  ag::Var weight;  // [out, in]
  ag::Var bias;    // [out]

  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng);
  ag::Var operator()(const ag::Var& x) const { return ag::linear(x, weight, bias); }
  int in_features() const { return weight->value.dim(1); }
  int out_features() const { return weight->value.dim(0); }
};

struct Conv2d {
  ag::Var weight;  // [out, in, k, k]
  ag::Var bias;    // [out] or null
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(ParamRegistry& reg, const std::string& name, int in, int out, int kernel, int stride,
         int pad, bool with_bias, Rng& rng);
  ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
};

struct BatchNorm2d {
  ag::Var gamma;
  ag::Var beta;
  ag::BatchNormState state;

  BatchNorm2d() = default;
  BatchNorm2d(ParamRegistry& reg, const std::string& name, int channels);
  BatchNorm2d(const BatchNorm2d&) = delete;
  BatchNorm2d& operator=(const BatchNorm2d&) = delete;
  BatchNorm2d(BatchNorm2d&&) = delete;
  ag::Var forward(const ag::Var& x, bool training) {
    return ag::batch_norm(x, gamma, beta, state, training);
  }
};

}  // namespace resq
