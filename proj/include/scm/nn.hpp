#pragma once
// Parameter containers and convolution blocks shared by the networks.

#include <map>
#include <random>

#include "scm/ops.hpp"

namespace scm {

// Named, ordered collection of learnable tensors.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }
  void append(const std::string& prefix, const ParamSet& other) {
    for (auto& [n, t] : other.entries_) {
      if (index_.count(prefix + n)) throw ConfigError("duplicate parameter name " + prefix + n);
      index_[prefix + n] = entries_.size();
      entries_.emplace_back(prefix + n, t);
    }
  }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return entries_[it->second].second;
  }
  std::size_t size() const { return entries_.size(); }
  std::int64_t numel() const {
    std::int64_t n = 0;
    for (auto& e : entries_) n += e.second.numel();
    return n;
  }
  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Kaiming-normal weights (gain for leaky ReLU 0.2) and uniform fan-in bias.
inline void kaiming_init(Tensor& w, Tensor& b, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(w.numel() / w.dim(0));
  const double gain = std::sqrt(2.0 / (1.0 + 0.2 * 0.2));
  std::normal_distribution<double> nd(0.0, gain / std::sqrt(fan_in));
  for (auto& v : w.mutable_data()) v = nd(rng);
  std::uniform_real_distribution<double> ud(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
  for (auto& v : b.mutable_data()) v = ud(rng);
}

struct Conv {
  Tensor weight;
  Tensor bias;
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  PadMode mode = PadMode::kZero;

  Conv() = default;
  Conv(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride_, PadMode mode_,
       std::mt19937_64& rng)
      : weight(Shape{cout, cin, k, k}), bias(Shape{cout}), stride(stride_), pad(k / 2), mode(mode_) {
    kaiming_init(weight, bias, rng);
  }

  void register_into(ParamSet& ps, const std::string& name) {
    weight = ps.add(name + ".weight", weight);
    bias = ps.add(name + ".bias", bias);
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad, mode); }
};

inline Tensor conv_lrelu(const Conv& c, const Tensor& x) { return leaky_relu(c(x), 0.2); }

}  // namespace scm
