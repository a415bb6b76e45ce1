#include "resq/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace resq {

ag::Var ParamRegistry::create(const std::string& name, Tensor init) {
  for (const auto& p : params_) {
    if (p.name == name) throw std::logic_error("duplicate parameter name: " + name);
  }
  auto v = ag::leaf(std::move(init));
  params_.push_back({name, v});
  return v;
}

void ParamRegistry::add_buffer(const std::string& name, Tensor* tensor) {
  buffers_.push_back({name, tensor});
}

std::size_t ParamRegistry::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var->value.size();
  return n;
}

void ParamRegistry::zero_grad() {
  for (auto& p : params_) p.var->grad = Tensor();
}

Tensor fan_in_uniform(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng) {
  weight = reg.create(name + ".weight", fan_in_uniform({out, in}, in, rng));
  bias = reg.create(name + ".bias", fan_in_uniform({out}, in, rng));
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& name, int in, int out, int kernel, int s,
               int p, bool with_bias, Rng& rng)
    : stride(s), pad(p) {
  const int fan_in = in * kernel * kernel;
  weight = reg.create(name + ".weight", fan_in_uniform({out, in, kernel, kernel}, fan_in, rng));
  if (with_bias) bias = reg.create(name + ".bias", fan_in_uniform({out}, fan_in, rng));
}

BatchNorm2d::BatchNorm2d(ParamRegistry& reg, const std::string& name, int channels) {
  gamma = reg.create(name + ".gamma", Tensor({channels}, 1.0));
  beta = reg.create(name + ".beta", Tensor({channels}, 0.0));
  state.running_mean = Tensor({channels}, 0.0);
  state.running_var = Tensor({channels}, 1.0);
  reg.add_buffer(name + ".running_mean", &state.running_mean);
  reg.add_buffer(name + ".running_var", &state.running_var);
}

}  // namespace resq
