#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace ssmt {

// Ordered collection of named trainable tensors. Creation order is fixed by
// construction order of the modules, which also pins RNG consumption, so a
// given seed always yields the same initialization.
class ParamRegistry {
  public:
    Tensor add(const std::string& name, Tensor t) {
        if (by_name_.count(name)) {
            throw std::invalid_argument("duplicate parameter name: " + name);
        }
        t.set_requires_grad(true);
        by_name_.emplace(name, t);
        order_.push_back(name);
        return t;
    }

    Tensor xavier_uniform(const std::string& name, Shape shape, int fan_in, int fan_out,
                          Rng& rng) {
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        std::vector<double> v(n);
        for (auto& x : v) x = rng.uniform(-limit, limit);
        return add(name, Tensor::from_data(std::move(shape), std::move(v)));
    }

    Tensor normal_init(const std::string& name, Shape shape, double stddev, Rng& rng) {
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        std::vector<double> v(n);
        for (auto& x : v) x = rng.normal(0.0, stddev);
        return add(name, Tensor::from_data(std::move(shape), std::move(v)));
    }

    Tensor constant_init(const std::string& name, Shape shape, double value) {
        return add(name, Tensor::full(std::move(shape), value));
    }

    const std::vector<std::string>& names() const { return order_; }

    const Tensor& get(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return by_name_.count(name) > 0; }
    size_t size() const { return order_.size(); }

    void zero_grads() {
        for (auto& [name, t] : by_name_) t.zero_grad();
    }

  private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> by_name_;
};

}  // namespace ssmt
