#pragma once

#include <cmath>
#include <map>
#include <string>

#include "atomflow/common.hpp"
#include "atomflow/tensor.hpp"

namespace atomflow {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Weight decay is the classic L2 form: wd * theta
// is added to the gradient before it feeds the moment accumulators. Moment
// slots are created lazily per parameter name; call begin_step() once per
// optimizer step so bias correction uses a shared step count.
class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  void begin_step() { ++step_; }
  long long step_count() const { return step_; }
  void set_step_count(long long t) { step_ = t; }
  const AdamConfig& config() const { return cfg_; }

  void update(const std::string& name, Tensor& param, const Tensor& grad, double lr,
              double weight_decay) {
    AF_CHECK(param.same_shape(grad), "adam: grad shape " << grad.shape_str()
                                                         << " vs param "
                                                         << param.shape_str() << " for "
                                                         << name);
    AF_CHECK(step_ >= 1, "adam: begin_step() must precede update()");
    Slot& s = slots_[name];
    if (s.m.empty()) {
      s.m = Tensor(param.shape());
      s.v = Tensor(param.shape());
    }
    AF_CHECK(s.m.same_shape(param), "adam: slot shape changed for " << name);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < param.numel(); ++i) {
      const double g = grad[i] + weight_decay * param[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      param[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

  // Deterministic iteration for serialization (map is name-ordered).
  template <typename Fn>
  void visit_slots(Fn&& fn) const {
    for (const auto& [name, slot] : slots_) fn(name, slot.m, slot.v);
  }

  void restore_slot(const std::string& name, Tensor m, Tensor v) {
    AF_CHECK(m.same_shape(v), "adam restore: m/v shape mismatch for " << name);
    slots_[name] = Slot{std::move(m), std::move(v)};
  }

  size_t num_slots() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor m, v;
  };
  std::map<std::string, Slot> slots_;
  long long step_ = 0;
  AdamConfig cfg_;
};

}  // namespace atomflow
